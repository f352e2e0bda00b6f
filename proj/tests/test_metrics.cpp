// Metric tests: classification scores against hand-computed confusion
// matrices, deletion curves against a brute-force re-forward, and the
// selection statistics against direct recomputation from forward outputs.

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "sesm/data.hpp"
#include "sesm/metrics.hpp"
#include "sesm/model.hpp"
#include "sesm/rng.hpp"

using namespace sesm;

namespace {

SesmConfig small_cfg(std::size_t heads = 3) {
    SesmConfig cfg;
    cfg.num_heads = heads;
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

std::vector<std::size_t> all_indices(const Dataset& ds) {
    std::vector<std::size_t> idx(ds.items.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

} // namespace

TEST_CASE("classification metrics match a hand-worked confusion matrix") {
    //            pred: 0  1  2
    // truth 0:         2  1  0
    // truth 1:         0  1  1
    // truth 2:         0  0  2
    std::vector<std::int32_t> truth{0, 0, 0, 1, 1, 2, 2};
    std::vector<std::int32_t> pred{0, 0, 1, 1, 2, 2, 2};
    auto m = classification_metrics(pred, truth, 3);

    CHECK(m.count == 7);
    CHECK(m.accuracy == doctest::Approx(5.0 / 7.0).epsilon(1e-12));
    REQUIRE(m.confusion.size() == 9);
    CHECK(m.confusion[0 * 3 + 0] == 2);
    CHECK(m.confusion[0 * 3 + 1] == 1);
    CHECK(m.confusion[1 * 3 + 2] == 1);
    CHECK(m.confusion[2 * 3 + 2] == 2);

    const double p0 = 2.0 / 2.0, p1 = 1.0 / 2.0, p2 = 2.0 / 3.0;
    const double r0 = 2.0 / 3.0, r1 = 1.0 / 2.0, r2 = 2.0 / 2.0;
    CHECK(m.macro_precision == doctest::Approx((p0 + p1 + p2) / 3).epsilon(1e-12));
    CHECK(m.macro_recall == doctest::Approx((r0 + r1 + r2) / 3).epsilon(1e-12));
    const double f0 = 2 * p0 * r0 / (p0 + r0);
    const double f1 = 2 * p1 * r1 / (p1 + r1);
    const double f2 = 2 * p2 * r2 / (p2 + r2);
    CHECK(m.macro_f1 == doctest::Approx((f0 + f1 + f2) / 3).epsilon(1e-12));
}

TEST_CASE("empty classes contribute zero instead of dividing by zero") {
    std::vector<std::int32_t> truth{0, 0};
    std::vector<std::int32_t> pred{0, 0};
    auto m = classification_metrics(pred, truth, 2); // class 1 never appears
    CHECK(m.accuracy == 1.0);
    CHECK(m.macro_precision == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(m.macro_recall == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("predict equals per-item argmax of eval forwards") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 19);
    auto ds = tiny_real(9, 20);
    auto idx = all_indices(ds);
    auto preds = predict(model, ds, idx, 4); // deliberately uneven batches

    for (std::size_t i = 0; i < idx.size(); ++i) {
        SequenceBatch b = make_batch(ds, {idx[i]}, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        std::int32_t want = 0;
        for (std::size_t c = 1; c < cfg.num_classes; ++c) {
            if (r.probs.data()[c] > r.probs.data()[want]) want = static_cast<std::int32_t>(c);
        }
        CHECK(preds[i] == want);
    }
}

TEST_CASE("deletion curve equals a brute-force re-forward") {
    auto cfg = small_cfg(4);
    auto model = init_model(cfg, 23);
    auto ds = tiny_real(10, 24);
    auto idx = all_indices(ds);

    AopcResult got = compute_aopc(model, ds, idx);
    REQUIRE(got.per_input.size() == idx.size());

    const std::size_t H = cfg.num_heads;
    double total = 0;
    for (std::size_t ii = 0; ii < idx.size(); ++ii) {
        SequenceBatch b = make_batch(ds, {idx[ii]}, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        std::size_t pred = 0;
        for (std::size_t c = 1; c < cfg.num_classes; ++c) {
            if (r.probs.data()[c] > r.probs.data()[pred]) pred = c;
        }
        std::vector<std::pair<double, std::size_t>> rel(H);
        for (std::size_t h = 0; h < H; ++h) {
            double n2 = 0;
            for (std::size_t k = 0; k < cfg.model_dim; ++k) {
                const double v = r.concepts.data()[h * cfg.model_dim + k];
                n2 += v * v;
            }
            rel[h] = {static_cast<double>(r.head_weights.data()[h]) * std::sqrt(n2), h};
        }
        std::stable_sort(rel.begin(), rel.end(), [](const auto& a, const auto& b) {
            return a.first > b.first;
        });
        const double p_full = r.probs.data()[pred];
        double drops = 0;
        ForwardHooks hooks;
        for (std::size_t k = 1; k < H; ++k) {
            hooks.delete_heads.clear();
            for (std::size_t j = 0; j < k; ++j) hooks.delete_heads.push_back(rel[j].second);
            auto rd = model.forward(b, RunMode::Eval, 1.0f, nullptr, &hooks);
            drops += p_full - rd.probs.data()[pred];
        }
        const double want = drops / static_cast<double>(H - 1);
        CHECK(std::abs(got.per_input[ii] - want) < 1e-9);
        total += want;
    }
    CHECK(std::abs(got.mean - total / static_cast<double>(idx.size())) < 1e-9);
}

TEST_CASE("a constant predictor has exactly zero deletion effect") {
    auto cfg = small_cfg(3);
    SesmModel model(cfg); // all parameters stay zero: concepts are all tanh(0)=0
    auto ds = tiny_real(5, 25);
    auto res = compute_aopc(model, ds, all_indices(ds));
    CHECK(res.mean == 0.0);
    for (double v : res.per_input) CHECK(v == 0.0);
}

TEST_CASE("deletion analysis needs at least two heads") {
    auto cfg = small_cfg(1);
    auto model = init_model(cfg, 1);
    auto ds = tiny_real(3, 2);
    CHECK_THROWS_AS((void)compute_aopc(model, ds, all_indices(ds)), UsageError);
}

TEST_CASE("selection statistics agree with direct recomputation") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 29);
    auto ds = tiny_real(8, 30);
    auto idx = all_indices(ds);

    const double frac = mean_selection_fraction(model, ds, idx, 3);
    const double overlap = mean_pairwise_overlap(model, ds, idx, 3);

    const std::size_t H = cfg.num_heads;
    double frac_want = 0, overlap_want = 0;
    std::size_t frac_n = 0, overlap_n = 0;
    for (std::size_t i : idx) {
        SequenceBatch b = make_batch(ds, {i}, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        const std::size_t N = b.num_segments, len = b.lengths[0];
        for (std::size_t h = 0; h < H; ++h) {
            double on = 0;
            for (std::size_t n = 0; n < N; ++n) on += r.sel_hard.data()[h * N + n];
            frac_want += on / static_cast<double>(len);
            ++frac_n;
        }
        for (std::size_t a = 0; a < H; ++a) {
            for (std::size_t bh = a + 1; bh < H; ++bh) {
                std::size_t inter = 0, uni = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    const bool sa = r.sel_hard.data()[a * N + n] > 0.5f;
                    const bool sb = r.sel_hard.data()[bh * N + n] > 0.5f;
                    inter += (sa && sb) ? 1 : 0;
                    uni += (sa || sb) ? 1 : 0;
                }
                overlap_want += uni == 0 ? 0.0
                                         : static_cast<double>(inter) /
                                               static_cast<double>(uni);
                ++overlap_n;
            }
        }
    }
    CHECK(frac == doctest::Approx(frac_want / frac_n).epsilon(1e-9));
    CHECK(overlap == doctest::Approx(overlap_want / overlap_n).epsilon(1e-9));
}

TEST_CASE("selection quality scores the union of heads against planted truth") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 31);
    auto ds = tiny_real(6, 32);
    auto q = selection_quality(model, ds, all_indices(ds), 3);
    CHECK(q.items == 6);
    CHECK(q.precision >= 0.0);
    CHECK(q.precision <= 1.0);
    CHECK(q.recall >= 0.0);
    CHECK(q.recall <= 1.0);
    if (q.precision + q.recall > 0) {
        CHECK(q.f1 == doctest::Approx(2 * q.precision * q.recall /
                                      (q.precision + q.recall))
                          .epsilon(1e-9));
    }
}

TEST_CASE("head statistics have the right extents and bounded values") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 33);
    auto ds = tiny_real(7, 34);
    auto hs = head_statistics(model, ds, all_indices(ds), 4);
    REQUIRE(hs.mean_weight.size() == cfg.num_heads);
    REQUIRE(hs.mean_selection_fraction.size() == cfg.num_heads);
    REQUIRE(hs.standalone_votes.size() == cfg.num_heads);
    std::size_t votes = 0;
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        CHECK(hs.mean_weight[h] >= 0.0);
        CHECK(hs.mean_selection_fraction[h] >= 0.0);
        REQUIRE(hs.standalone_votes[h].size() == cfg.num_classes);
        for (auto v : hs.standalone_votes[h]) votes += v;
    }
    CHECK(votes == 7 * cfg.num_heads); // every head votes once per item
}
