#pragma once

// Human-readable explanations: which positions each head selected, how much
// each head contributed, what each head's concept predicts on its own, and a
// per-head catalog of the strongest prototype activations across a dataset.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sesm/data.hpp"
#include "sesm/model.hpp"

namespace sesm {

struct HeadExplanation {
    std::size_t head = 0;
    double weight = 0;                              // p_h
    double concept_norm = 0;                        // ||c_h||
    double relevance = 0;                           // p_h * ||c_h||
    std::vector<std::size_t> segments;              // selected segment indices
    std::vector<std::pair<std::size_t, std::size_t>> spans;  // raw [begin, end)
    std::vector<float> concept_vec;                 // (d)
    std::int32_t standalone_class = 0;              // argmax of the concept alone
    double standalone_prob = 0;
    bool supporting = false;  // standalone class agrees with the prediction
};

struct Explanation {
    std::size_t input_id = 0;
    std::int32_t label = 0;
    std::int32_t predicted = 0;
    std::vector<double> logits, probs;
    std::vector<HeadExplanation> heads;
    std::vector<HeadExplanation> heads_b;  // pair mode second sequence
};

// Deterministic (eval-mode) explanation of a single dataset item.
Explanation explain_input(const SesmModel& model, const Dataset& ds, std::size_t index);

// Recomputes the logits implied by the stored concepts and weights; must
// reproduce Explanation::logits (the prediction is exactly the weighted sum
// of its parts).
std::vector<double> recompose_logits(const SesmModel& model, const Explanation& expl);

std::string render_text(const Explanation& expl, const Dataset& ds);
nlohmann::json render_json(const Explanation& expl);
// position,value,head_id,selected rows for plotting; value is the raw sample
// (or token id) at that position.
std::string render_plot_csv(const Explanation& expl, const Dataset& ds);

// --- prototype catalog -------------------------------------------------------

struct PrototypeEntry {
    std::size_t input_id = 0;
    std::int32_t label = 0;
    double activation = 0;    // p_h(x) * ||c_h(x)||
    double consistency = 0;   // cos(c_h(x), mean concept of head h)
    std::vector<std::pair<std::size_t, std::size_t>> spans;
};

struct PrototypeCatalog {
    std::vector<std::vector<PrototypeEntry>> per_head;  // top-k, by activation desc
    std::vector<std::vector<float>> mean_concept;       // (H x d)
};

PrototypeCatalog build_prototype_catalog(const SesmModel& model, const Dataset& ds,
                                         const std::vector<std::size_t>& indices,
                                         std::size_t top_k, std::size_t batch_size);

nlohmann::json catalog_json(const PrototypeCatalog& catalog);
std::string catalog_text(const PrototypeCatalog& catalog);

} // namespace sesm
