// Explanation tests: faithfulness of the recomposition, span mapping back to
// raw positions, rendering formats, and the prototype catalog.

#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "sesm/data.hpp"
#include "sesm/explain.hpp"
#include "sesm/model.hpp"
#include "sesm/rng.hpp"

using namespace sesm;

namespace {

SesmConfig small_cfg() {
    SesmConfig cfg;
    cfg.num_heads = 3;
    cfg.model_dim = 8;
    cfg.head_dim = 4;
    cfg.num_classes = 2;
    cfg.max_positions = 32;
    cfg.encoder_channels = 8;
    cfg.param_channels = {6, 6};
    cfg.segment_kernel = 5;
    cfg.segment_stride = 5;
    return cfg;
}

SesmModel init_model(const SesmConfig& cfg, std::uint64_t seed) {
    SesmModel model(cfg);
    Rng rng(seed);
    auto stream = rng.stream("init");
    model.init_params(stream);
    return model;
}

Dataset tiny_real(std::size_t n, std::uint64_t seed) {
    DatasetSpec spec;
    spec.num_sequences = n;
    spec.min_len = 20;
    spec.max_len = 40;
    spec.seed = seed;
    return gen_motif_real(spec);
}

} // namespace

TEST_CASE("explanations carry consistent head records") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 41);
    auto ds = tiny_real(5, 42);
    Explanation e = explain_input(model, ds, 2);

    CHECK(e.input_id == ds.items[2].id);
    CHECK(e.label == ds.items[2].label);
    REQUIRE(e.heads.size() == cfg.num_heads);
    REQUIRE(e.logits.size() == cfg.num_classes);
    REQUIRE(e.probs.size() == cfg.num_classes);

    std::int32_t argmax = 0;
    for (std::size_t c = 1; c < e.probs.size(); ++c) {
        if (e.probs[c] > e.probs[argmax]) argmax = static_cast<std::int32_t>(c);
    }
    CHECK(e.predicted == argmax);

    const std::size_t raw_len = ds.items[2].signal.size();
    const std::size_t n_seg = segment_count(raw_len, cfg.segment_stride);
    for (const auto& h : e.heads) {
        CHECK(h.weight >= 0.0);
        CHECK(h.relevance == doctest::Approx(h.weight * h.concept_norm).epsilon(1e-9));
        CHECK(h.concept_vec.size() == cfg.model_dim);
        for (auto seg : h.segments) CHECK(seg < n_seg);
        for (const auto& [b, eend] : h.spans) {
            CHECK(b < eend);
            CHECK(eend <= raw_len);
        }
        CHECK((h.standalone_class >= 0 &&
               static_cast<std::size_t>(h.standalone_class) < cfg.num_classes));
        CHECK(h.supporting == (h.standalone_class == e.predicted));
    }
}

TEST_CASE("spans are the merged raw windows of the selected segments") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 43);
    auto ds = tiny_real(4, 44);
    Explanation e = explain_input(model, ds, 0);
    const std::size_t raw_len = ds.items[0].signal.size();

    for (const auto& h : e.heads) {
        // rebuild the expected spans from the segment list
        std::vector<std::pair<std::size_t, std::size_t>> want;
        for (auto seg : h.segments) {
            const std::size_t b = seg * cfg.segment_stride;
            const std::size_t eend = std::min(raw_len, b + cfg.segment_kernel);
            if (!want.empty() && b <= want.back().second) {
                want.back().second = std::max(want.back().second, eend);
            } else {
                want.emplace_back(b, eend);
            }
        }
        CHECK(h.spans == want);
    }
}

TEST_CASE("recomposing the parts reproduces the prediction") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 45);
    auto ds = tiny_real(6, 46);
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        Explanation e = explain_input(model, ds, i);
        auto rebuilt = recompose_logits(model, e);
        REQUIRE(rebuilt.size() == e.logits.size());
        for (std::size_t c = 0; c < rebuilt.size(); ++c) {
            CHECK(std::abs(rebuilt[c] - e.logits[c]) < 1e-6);
        }
    }
}

TEST_CASE("renderers produce valid output in all three formats") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 47);
    auto ds = tiny_real(3, 48);
    Explanation e = explain_input(model, ds, 1);

    const std::string text = render_text(e, ds);
    CHECK(text.find("head") != std::string::npos);
    CHECK(text.find("predicted") != std::string::npos);

    nlohmann::json j = render_json(e);
    CHECK(j.contains("heads"));
    CHECK(j["heads"].size() == cfg.num_heads);
    CHECK(j["predicted"].get<int>() == e.predicted);

    const std::string csv = render_plot_csv(e, ds);
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "position,value,head_id,selected");
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == cfg.num_heads * ds.items[1].signal.size());
}

TEST_CASE("pair-mode explanations cover both sides") {
    DatasetSpec spec;
    spec.num_sequences = 6;
    spec.min_len = 10;
    spec.max_len = 14;
    spec.pair_mode = true;
    spec.seed = 11;
    Dataset ds = gen_motif_token(spec);

    SesmConfig cfg = small_cfg();
    cfg.token_input = true;
    cfg.pair_mode = true;
    cfg.vocab_size = ds.vocab_size();
    cfg.num_classes = ds.num_classes;
    auto model = init_model(cfg, 49);

    Explanation e = explain_input(model, ds, 0);
    CHECK(e.heads.size() == cfg.num_heads);
    CHECK(e.heads_b.size() == cfg.num_heads);

    auto rebuilt = recompose_logits(model, e);
    for (std::size_t c = 0; c < rebuilt.size(); ++c) {
        CHECK(std::abs(rebuilt[c] - e.logits[c]) < 1e-6);
    }
}

TEST_CASE("prototype catalog ranks by activation with stable ties") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 51);
    auto ds = tiny_real(10, 52);
    std::vector<std::size_t> idx(ds.items.size());
    std::iota(idx.begin(), idx.end(), 0);

    PrototypeCatalog cat = build_prototype_catalog(model, ds, idx, 4, 3);
    REQUIRE(cat.per_head.size() == cfg.num_heads);
    REQUIRE(cat.mean_concept.size() == cfg.num_heads);
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        CHECK(cat.per_head[h].size() == 4); // 10 candidates truncated to top_k
        CHECK(cat.mean_concept[h].size() == cfg.model_dim);
        for (std::size_t i = 1; i < cat.per_head[h].size(); ++i) {
            const auto& prev = cat.per_head[h][i - 1];
            const auto& cur = cat.per_head[h][i];
            const bool ordered = prev.activation > cur.activation ||
                                 (prev.activation == cur.activation &&
                                  prev.input_id < cur.input_id);
            CHECK(ordered);
        }
        for (const auto& entry : cat.per_head[h]) {
            CHECK(entry.consistency <= 1.0 + 1e-9);
            CHECK(entry.consistency >= -1.0 - 1e-9);
        }
    }

    nlohmann::json j = catalog_json(cat);
    CHECK(j["heads"].size() == cfg.num_heads);
    const std::string text = catalog_text(cat);
    CHECK(text.find("head") != std::string::npos);
}
