// Model forward-pass tests: shapes, masking discipline, run modes, hooks,
// deterministic evaluation, and both input adapters.

#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "sesm/data.hpp"
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

Dataset tiny_real(std::size_t n, std::uint64_t seed, std::size_t min_len = 20,
                  std::size_t max_len = 40) {
    DatasetSpec spec;
    spec.num_sequences = n;
    spec.min_len = min_len;
    spec.max_len = max_len;
    spec.seed = seed;
    return gen_motif_real(spec);
}

SesmModel init_model(const SesmConfig& cfg, std::uint64_t seed) {
    SesmModel model(cfg);
    Rng rng(seed);
    auto stream = rng.stream("init");
    model.init_params(stream);
    return model;
}

} // namespace

TEST_CASE("forward produces the documented shapes") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 1);
    auto ds = tiny_real(4, 9);
    SequenceBatch b = make_batch(ds, {0, 1, 2, 3}, cfg.segment_kernel, cfg.segment_stride);
    auto r = model.forward(b, RunMode::Eval, 1.0f);

    const std::size_t B = 4, H = cfg.num_heads, N = b.num_segments;
    CHECK(r.logits.shape() == Shape{B, cfg.num_classes});
    CHECK(r.probs.shape() == Shape{B, cfg.num_classes});
    CHECK(r.rep.shape() == Shape{B, cfg.model_dim});
    CHECK(r.head_weights.shape() == Shape{B, H});
    CHECK(r.sel_logits.shape() == Shape{B, H, N});
    CHECK(r.sel_hard.shape() == Shape{B, H, N});
    CHECK(r.concepts.shape() == Shape{B, H, cfg.model_dim});

    for (std::size_t i = 0; i < B; ++i) {
        double s = 0;
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            s += r.probs.data()[i * cfg.num_classes + c];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("parameter initialization is deterministic for a fixed seed") {
    auto cfg = small_cfg();
    auto a = init_model(cfg, 7);
    auto b = init_model(cfg, 7);
    auto c = init_model(cfg, 8);
    bool all_equal = true, any_diff_c = false;
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        const auto& [name, ta] = a.params().items()[i];
        const auto& tb = b.params().items()[i].second;
        const auto& tc = c.params().items()[i].second;
        CHECK(b.params().items()[i].first == name);
        if (ta.data() != tb.data()) all_equal = false;
        if (ta.data() != tc.data()) any_diff_c = true;
    }
    CHECK(all_equal);
    CHECK(any_diff_c);
}

TEST_CASE("eval selections are binary and vanish on padding") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 3);
    auto ds = tiny_real(6, 12, 10, 40); // mixed lengths force padding
    SequenceBatch b =
        make_batch(ds, {0, 1, 2, 3, 4, 5}, cfg.segment_kernel, cfg.segment_stride);
    auto r = model.forward(b, RunMode::Eval, 0.37f); // tau must not matter in eval

    const std::size_t H = cfg.num_heads, N = b.num_segments;
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t n = 0; n < N; ++n) {
                const float v = r.sel_hard.data()[(i * H + h) * N + n];
                CHECK((v == 0.0f || v == 1.0f));
                if (n >= b.lengths[i]) CHECK(v == 0.0f);
            }
        }
        for (std::size_t h = 0; h < H; ++h) {
            CHECK(r.head_weights.data()[i * H + h] >= 0.0f);
        }
    }

    // eval is deterministic and temperature-free
    auto r2 = model.forward(b, RunMode::Eval, 1.9f);
    CHECK(r.logits.data() == r2.logits.data());
    CHECK(r.sel_hard.data() == r2.sel_hard.data());
}

TEST_CASE("train mode needs a noise stream and produces binary straight-through picks") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 3);
    auto ds = tiny_real(3, 5);
    SequenceBatch b = make_batch(ds, {0, 1, 2}, cfg.segment_kernel, cfg.segment_stride);

    CHECK_THROWS_AS((void)model.forward(b, RunMode::Train, 1.0f), UsageError);

    Rng rng(4);
    auto gumbel = rng.stream("gumbel");
    auto r = model.forward(b, RunMode::Train, 1.0f, &gumbel);
    const std::size_t H = cfg.num_heads, N = b.num_segments;
    for (std::size_t i = 0; i < r.sel_hard.data().size(); ++i) {
        const float v = r.sel_hard.data()[i];
        CHECK((v == 0.0f || v == 1.0f));
        const float s = r.sel_soft.data()[i];
        CHECK(s >= 0.0f);
        CHECK(s <= 1.0f);
    }
    // padding stays off even with noise
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t n = b.lengths[i]; n < N; ++n) {
                CHECK(r.sel_soft.data()[(i * H + h) * N + n] == 0.0f);
                CHECK(r.sel_hard.data()[(i * H + h) * N + n] == 0.0f);
            }
        }
    }

    // two train forwards with fresh noise differ somewhere in the soft picks
    auto r2 = model.forward(b, RunMode::Train, 1.0f, &gumbel);
    CHECK(r.sel_soft.data() != r2.sel_soft.data());
}

TEST_CASE("soft mode is noise-free and fully differentiable") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 3);
    auto ds = tiny_real(2, 6);
    SequenceBatch b = make_batch(ds, {0, 1}, cfg.segment_kernel, cfg.segment_stride);
    auto ra = model.forward(b, RunMode::Soft, 2.0f);
    auto rb = model.forward(b, RunMode::Soft, 2.0f);
    CHECK(ra.sel_hard.data() == rb.sel_hard.data());
    CHECK(ra.sel_hard.data() == ra.sel_soft.data()); // hard IS soft here
}

TEST_CASE("per-item outputs are independent of batch padding") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 21);
    auto ds = tiny_real(5, 31, 10, 45);

    // item 0 alone vs item 0 batched with longer items
    SequenceBatch solo = make_batch(ds, {0}, cfg.segment_kernel, cfg.segment_stride);
    SequenceBatch batch =
        make_batch(ds, {0, 1, 2, 3, 4}, cfg.segment_kernel, cfg.segment_stride);
    auto rs = model.forward(solo, RunMode::Eval, 1.0f);
    auto rb = model.forward(batch, RunMode::Eval, 1.0f);

    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        CHECK(rs.logits.data()[c] == rb.logits.data()[c]);
    }
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        CHECK(rs.head_weights.data()[h] == rb.head_weights.data()[h]);
    }
    const std::size_t Ns = solo.num_segments, Nb = batch.num_segments;
    for (std::size_t h = 0; h < cfg.num_heads; ++h) {
        for (std::size_t n = 0; n < Ns; ++n) {
            CHECK(rs.sel_hard.data()[h * Ns + n] == rb.sel_hard.data()[h * Nb + n]);
        }
    }
}

TEST_CASE("hooks: deleting heads, forcing selections, forcing unit weights") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 2);
    auto ds = tiny_real(3, 8);
    SequenceBatch b = make_batch(ds, {0, 1, 2}, cfg.segment_kernel, cfg.segment_stride);

    ForwardHooks del;
    del.delete_heads = {1};
    auto r = model.forward(b, RunMode::Eval, 1.0f, nullptr, &del);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(r.head_weights.data()[i * cfg.num_heads + 1] == 0.0f);
        CHECK(r.head_weights.data()[i * cfg.num_heads + 0] > 0.0f);
    }

    ForwardHooks all_on;
    all_on.force_all_ones_selection = true;
    auto ra = model.forward(b, RunMode::Eval, 1.0f, nullptr, &all_on);
    const std::size_t H = cfg.num_heads, N = b.num_segments;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t n = 0; n < N; ++n) {
                const float want = n < b.lengths[i] ? 1.0f : 0.0f;
                CHECK(ra.sel_hard.data()[(i * H + h) * N + n] == want);
            }
        }
    }

    ForwardHooks unit;
    unit.force_unit_weights = true;
    auto ru = model.forward(b, RunMode::Eval, 1.0f, nullptr, &unit);
    for (std::size_t i = 0; i < 3 * H; ++i) CHECK(ru.head_weights.data()[i] == 1.0f);
}

TEST_CASE("the aggregate representation is the weighted concept sum") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 13);
    auto ds = tiny_real(3, 14);
    SequenceBatch b = make_batch(ds, {0, 1, 2}, cfg.segment_kernel, cfg.segment_stride);
    auto r = model.forward(b, RunMode::Eval, 1.0f);

    const std::size_t H = cfg.num_heads, d = cfg.model_dim;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            double want = 0;
            for (std::size_t h = 0; h < H; ++h) {
                want += static_cast<double>(r.head_weights.data()[i * H + h]) *
                        static_cast<double>(r.concepts.data()[(i * H + h) * d + k]);
            }
            CHECK(r.rep.data()[i * d + k] == doctest::Approx(want).epsilon(1e-5));
        }
    }
}

TEST_CASE("token input adapter works end to end") {
    DatasetSpec spec;
    spec.num_sequences = 8;
    spec.num_classes = 2;
    spec.min_len = 12;
    spec.max_len = 20;
    spec.seed = 3;
    Dataset ds = gen_motif_token(spec);
    REQUIRE(ds.token_mode);

    SesmConfig cfg = small_cfg();
    cfg.token_input = true;
    cfg.vocab_size = ds.vocab_size();
    auto model = init_model(cfg, 5);
    SequenceBatch b = make_batch(ds, {0, 1, 2, 3}, cfg.segment_kernel, cfg.segment_stride);
    auto r = model.forward(b, RunMode::Eval, 1.0f);
    CHECK(r.logits.shape() == Shape{4, cfg.num_classes});
    for (float v : r.logits.data()) CHECK(std::isfinite(v));
}

TEST_CASE("pair mode runs both sides and classifies their interaction") {
    DatasetSpec spec;
    spec.num_sequences = 8;
    spec.min_len = 10;
    spec.max_len = 16;
    spec.pair_mode = true;
    spec.seed = 17;
    Dataset ds = gen_motif_token(spec);
    REQUIRE(ds.pair_mode);
    REQUIRE(ds.num_classes == 3);

    SesmConfig cfg = small_cfg();
    cfg.token_input = true;
    cfg.pair_mode = true;
    cfg.vocab_size = ds.vocab_size();
    cfg.num_classes = ds.num_classes;
    auto model = init_model(cfg, 6);
    SequenceBatch b = make_batch(ds, {0, 1, 2}, cfg.segment_kernel, cfg.segment_stride);
    auto r = model.forward(b, RunMode::Eval, 1.0f);
    CHECK(r.logits.shape() == Shape{3, 3});
    CHECK(r.rep_b.valid());
    CHECK(r.sel_hard_b.shape() == r.sel_hard.shape());
    for (std::size_t i = 0; i < 3 * cfg.num_heads; ++i) {
        CHECK(r.head_weights_b.data()[i] >= 0.0f);
    }
}

TEST_CASE("forward validates batch compatibility") {
    auto cfg = small_cfg();
    auto model = init_model(cfg, 1);
    auto ds = tiny_real(2, 2);
    SequenceBatch b = make_batch(ds, {0, 1}, 7, 7); // kernel mismatch vs cfg (5)
    CHECK_THROWS_AS((void)model.forward(b, RunMode::Eval, 1.0f), ShapeError);

    SequenceBatch too_long = make_batch(ds, {0, 1}, cfg.segment_kernel, 1); // stride 1
    if (too_long.num_segments > cfg.max_positions) {
        CHECK_THROWS_AS((void)model.forward(too_long, RunMode::Eval, 1.0f), ShapeError);
    }
}
