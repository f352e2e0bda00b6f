#pragma once

// Classification metrics, prototype-deletion faithfulness (AOPC), selection
// quality against planted ground truth, and per-head usage statistics.

#include <cstdint>
#include <string>
#include <vector>

#include "sesm/data.hpp"
#include "sesm/model.hpp"

namespace sesm {

struct ClassificationMetrics {
    double accuracy = 0;
    double macro_precision = 0;   // averaged over all classes; empty classes count 0
    double macro_recall = 0;
    double macro_f1 = 0;
    std::vector<std::size_t> confusion;  // C x C, row = truth, col = prediction
    std::size_t count = 0;
};

ClassificationMetrics classification_metrics(const std::vector<std::int32_t>& predictions,
                                             const std::vector<std::int32_t>& labels,
                                             std::size_t num_classes);

// Argmax predictions over a dataset subset (deterministic eval forwards).
std::vector<std::int32_t> predict(const SesmModel& model, const Dataset& ds,
                                  const std::vector<std::size_t>& indices,
                                  std::size_t batch_size);

// Area over the perturbation curve for prototype deletion. Heads are removed
// cumulatively in decreasing relevance order (p_h * ||c_h||, ties broken by
// lower head index); each removal zeroes that head's weight; the probability
// of the originally predicted class is re-read without renormalization.
// AOPC = mean_k [ p_full - p_after_k ] over k = 1..H-1.
struct AopcResult {
    double mean = 0;
    std::vector<double> per_input;
};
AopcResult compute_aopc(const SesmModel& model, const Dataset& ds,
                        const std::vector<std::size_t>& indices);

// Position-level precision/recall/F1 of the union of all heads' selections
// against planted ground truth (items without ground truth are skipped).
struct SelectionQuality {
    double precision = 0, recall = 0, f1 = 0;
    std::size_t items = 0;
};
SelectionQuality selection_quality(const SesmModel& model, const Dataset& ds,
                                   const std::vector<std::size_t>& indices,
                                   std::size_t batch_size);

// Mean over inputs and heads of (selected positions / valid length).
double mean_selection_fraction(const SesmModel& model, const Dataset& ds,
                               const std::vector<std::size_t>& indices,
                               std::size_t batch_size);

// Mean Jaccard overlap between the hard selections of distinct heads
// (0 when both heads select nothing).
double mean_pairwise_overlap(const SesmModel& model, const Dataset& ds,
                             const std::vector<std::size_t>& indices,
                             std::size_t batch_size);

struct HeadStatistics {
    std::vector<double> mean_weight;              // (H)
    std::vector<double> mean_selection_fraction;  // (H)
    std::vector<std::vector<std::size_t>> standalone_votes;  // (H x C)
};
HeadStatistics head_statistics(const SesmModel& model, const Dataset& ds,
                               const std::vector<std::size_t>& indices,
                               std::size_t batch_size);

} // namespace sesm
