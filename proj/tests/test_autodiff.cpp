// Differentiation tests: every primitive is checked against central
// differences in double precision, plus tape semantics and shape errors.

#include <doctest.h>

#include <cmath>
#include <vector>

#include "sesm/errors.hpp"
#include "sesm/grad_check.hpp"
#include "sesm/tensor.hpp"

using namespace sesm;

using DT = TensorT<double>;
using DTape = TapeT<double>;

namespace {

DT make(const Shape& shape, std::vector<double> v) {
    DT t = DT::from_vector(shape, v);
    t.set_requires_grad(true);
    return t;
}

// deterministic pseudo-random fill, away from kinks of relu/threshold ops
std::vector<double> wiggle(std::size_t n, double scale = 1.0, double offset = 0.3) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = scale * std::sin(1.7 * static_cast<double>(i) + 0.9) + offset;
    }
    return v;
}

constexpr double kTol = 1e-6;

} // namespace

TEST_CASE("add/sub/mul/div with broadcasting match numeric gradients") {
    auto a = make({2, 3}, wiggle(6, 1.0, 0.4));
    auto b = make({3}, wiggle(3, 0.5, 1.2)); // broadcast over rows, nonzero for div

    auto run = [&](auto op) {
        auto res = grad_check<double>([&] { return mean_all(mul(op(a, b), op(a, b))); },
                                      {a, b});
        CAPTURE(res.worst_param);
        CHECK(res.max_rel_error < kTol);
    };
    run([](const DT& x, const DT& y) { return add(x, y); });
    run([](const DT& x, const DT& y) { return sub(x, y); });
    run([](const DT& x, const DT& y) { return mul(x, y); });
    run([](const DT& x, const DT& y) { return div(x, y); });
}

TEST_CASE("scalar ops, neg") {
    auto a = make({4}, wiggle(4));
    auto res = grad_check<double>(
        [&] { return sum_all(neg(add_scalar(mul_scalar(a, 2.5), -0.7))); }, {a});
    CHECK(res.max_rel_error < kTol);
}

TEST_CASE("elementwise nonlinearities match numeric gradients") {
    auto a = make({2, 5}, wiggle(10, 1.3, 0.2));
    auto run = [&](auto op) {
        auto res = grad_check<double>([&] { return sum_all(mul(op(a), op(a))); }, {a});
        CAPTURE(res.max_rel_error);
        CHECK(res.max_rel_error < kTol);
    };
    run([](const DT& x) { return relu(x); });
    run([](const DT& x) { return sigmoid(x); });
    run([](const DT& x) { return tanh_op(x); });
    run([](const DT& x) { return softplus(x); });
    run([](const DT& x) { return exp_op(x); });
}

TEST_CASE("log and sqrt on positive inputs") {
    auto a = make({6}, wiggle(6, 0.4, 1.5)); // strictly positive
    for (int which = 0; which < 3; ++which) {
        auto res = grad_check<double>(
            [&] {
                DT y = which == 0 ? log_op(a) : which == 1 ? sqrt_op(a) : safe_sqrt(a);
                return sum_all(y);
            },
            {a});
        CHECK(res.max_rel_error < kTol);
    }
}

TEST_CASE("safe_sqrt has zero gradient at zero instead of infinity") {
    auto a = make({3}, {0.0, 0.0, 4.0});
    DTape tape;
    DT loss = sum_all(safe_sqrt(a));
    tape.backward(loss);
    CHECK(a.grad()[0] == 0.0);
    CHECK(a.grad()[1] == 0.0);
    CHECK(a.grad()[2] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("sigmoid is stable at extreme inputs") {
    auto a = make({2}, {900.0, -900.0});
    DTape tape;
    DT y = sigmoid(a);
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(0.0));
    DT loss = sum_all(y);
    tape.backward(loss);
    CHECK(std::isfinite(a.grad()[0]));
    CHECK(std::isfinite(a.grad()[1]));
}

TEST_CASE("softplus is exact in both tails") {
    auto a = make({2}, {60.0, -60.0});
    DT y = softplus(a);
    CHECK(y.data()[0] == doctest::Approx(60.0).epsilon(1e-12));
    CHECK(y.data()[1] == doctest::Approx(std::exp(-60.0)).epsilon(1e-6));
    CHECK(y.data()[1] > 0.0);
}

TEST_CASE("straight-through threshold: hard forward, identity backward") {
    auto a = make({4}, {0.2, 0.5, 0.7, 0.50001});
    DTape tape;
    DT y = st_threshold(a);
    CHECK(y.data()[0] == 0.0);
    CHECK(y.data()[1] == 0.0); // strictly greater than 1/2
    CHECK(y.data()[2] == 1.0);
    CHECK(y.data()[3] == 1.0);
    DT loss = sum_all(mul_scalar(y, 3.0));
    tape.backward(loss);
    for (std::size_t i = 0; i < 4; ++i) CHECK(a.grad()[i] == 3.0);
}

TEST_CASE("reshape, transpose, concat, slice gradients") {
    auto a = make({2, 6}, wiggle(12));
    auto b = make({2, 3}, wiggle(6, 0.7, -0.1));
    auto res = grad_check<double>(
        [&] {
            DT r = reshape(a, {2, 2, 3});
            DT t = transpose(r); // (2,3,2)
            DT t2 = transpose(t, 0, 2); // (2,3,2)
            DT flat = reshape(t2, {2, 6});
            DT joined = concat(std::vector<DT>{flat, b}, 1); // (2,9)
            DT piece = slice(joined, 1, 2, 7); // (2,5)
            return sum_all(mul(piece, piece));
        },
        {a, b});
    CHECK(res.max_rel_error < kTol);
}

TEST_CASE("reductions: sum/mean along axes and over all") {
    auto a = make({3, 4}, wiggle(12, 1.1, 0.0));
    for (int which = 0; which < 4; ++which) {
        auto res = grad_check<double>(
            [&] {
                DT red = which == 0   ? sum(a, 0)
                         : which == 1 ? sum(a, 1, true)
                         : which == 2 ? mean(a, 1)
                                      : mean(a, 0, true);
                return sum_all(mul(red, red));
            },
            {a});
        CHECK(res.max_rel_error < kTol);
    }
}

TEST_CASE("softmax gradient and row normalization") {
    auto a = make({2, 4}, wiggle(8, 2.0, 0.0));
    DT target = DT::from_vector({2, 4}, wiggle(8, 0.3, 0.5));
    auto res = grad_check<double>([&] { return sum_all(mul(softmax(a, -1), target)); }, {a});
    CHECK(res.max_rel_error < kTol);

    DT p = softmax(a, -1);
    for (std::size_t r = 0; r < 2; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 4; ++c) s += p.data()[r * 4 + c];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("matmul gradients, including batched with broadcast") {
    auto a = make({2, 3, 4}, wiggle(24, 0.8, 0.1));
    auto b = make({4, 5}, wiggle(20, 0.6, -0.2)); // broadcast over batch
    auto res =
        grad_check<double>([&] { return mean_all(mul(matmul(a, b), matmul(a, b))); }, {a, b});
    CHECK(res.max_rel_error < kTol);
}

TEST_CASE("matmul forward oracle") {
    DT a = DT::from_vector({2, 2}, {1, 2, 3, 4});
    DT b = DT::from_vector({2, 2}, {5, 6, 7, 8});
    DT c = matmul(a, b);
    CHECK(c.data() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("conv1d matches a hand-rolled cross-correlation") {
    auto x = make({2, 2, 7}, wiggle(28, 0.9, 0.2)); // (batch, channels, length)
    auto k = make({3, 2, 3}, wiggle(18, 0.5, -0.3)); // (out, in, width)
    const std::size_t stride = 2;

    DT y = conv1d(x, k, stride);
    REQUIRE(y.shape() == Shape{2, 3, 3});
    for (std::size_t bi = 0; bi < 2; ++bi) {
        for (std::size_t co = 0; co < 3; ++co) {
            for (std::size_t t = 0; t < 3; ++t) {
                double acc = 0;
                for (std::size_t ci = 0; ci < 2; ++ci) {
                    for (std::size_t w = 0; w < 3; ++w) {
                        acc += x.data()[(bi * 2 + ci) * 7 + t * stride + w] *
                               k.data()[(co * 2 + ci) * 3 + w];
                    }
                }
                CHECK(y.data()[(bi * 3 + co) * 3 + t] == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }

    auto res = grad_check<double>(
        [&] { return sum_all(mul(conv1d(x, k, stride), conv1d(x, k, stride))); }, {x, k});
    CHECK(res.max_rel_error < kTol);
}

TEST_CASE("embedding lookup gathers rows and scatter-adds gradients") {
    auto table = make({5, 3}, wiggle(15));
    IntArray ids{{2, 2}, {4, 0, 0, 3}};
    DTape tape;
    DT e = embedding_lookup(table, ids);
    REQUIRE(e.shape() == Shape{2, 2, 3});
    CHECK(e.data()[0] == table.data()[4 * 3 + 0]);
    DT loss = sum_all(e);
    tape.backward(loss);
    // id 0 appears twice, so its row accumulates twice
    CHECK(table.grad()[0 * 3 + 1] == 2.0);
    CHECK(table.grad()[4 * 3 + 2] == 1.0);
    CHECK(table.grad()[1 * 3 + 0] == 0.0);

    IntArray bad{{1, 1}, {7}};
    CHECK_THROWS_AS((void)embedding_lookup(table, bad), DataError);
}

TEST_CASE("l2_normalize produces unit rows and correct gradients") {
    auto a = make({3, 4}, wiggle(12, 1.2, 0.3));
    DT target = DT::from_vector({3, 4}, wiggle(12, 0.4, -0.6));
    auto res = grad_check<double>([&] { return sum_all(mul(l2_normalize(a), target)); }, {a});
    CHECK(res.max_rel_error < kTol);

    DT y = l2_normalize(a);
    for (std::size_t r = 0; r < 3; ++r) {
        double n = 0;
        for (std::size_t c = 0; c < 4; ++c) n += y.data()[r * 4 + c] * y.data()[r * 4 + c];
        CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
    }

    // zero rows stay zero with finite gradients
    auto z = make({1, 3}, {0, 0, 0});
    DTape tape;
    DT yz = l2_normalize(z);
    CHECK(yz.data() == std::vector<double>{0, 0, 0});
    DT loss = sum_all(yz);
    tape.backward(loss);
    for (double g : z.grad()) CHECK(g == 0.0);
}

TEST_CASE("cosine_similarity matches definition and handles zero rows") {
    auto a = make({2, 3}, {1, 0, 0, 1, 2, 2});
    auto b = make({2, 3}, {0, 1, 0, 2, 4, 4});
    DT c = cosine_similarity(a, b);
    REQUIRE(c.shape() == Shape{2});
    CHECK(c.data()[0] == doctest::Approx(0.0));
    CHECK(c.data()[1] == doctest::Approx(1.0).epsilon(1e-12));

    auto x = make({2, 3}, wiggle(6, 1.0, 0.7));
    auto res =
        grad_check<double>([&] { return sum_all(cosine_similarity(x, b)); }, {x, b});
    CHECK(res.max_rel_error < kTol);

    auto z = make({1, 2}, {0, 0});
    auto w = make({1, 2}, {3, 4});
    DTape tape;
    DT sim = cosine_similarity(z, w);
    CHECK(sim.data()[0] == 0.0);
    DT loss = sum_all(sim);
    tape.backward(loss);
    for (double g : z.grad()) CHECK(g == 0.0);
    for (double g : w.grad()) CHECK(g == 0.0);
}

TEST_CASE("masked_fill replaces masked entries and blocks their gradient") {
    auto a = make({2, 3}, wiggle(6));
    DT mask = DT::from_vector({2, 3}, {1, 0, 1, 0, 1, 0});
    DTape tape;
    DT y = masked_fill(a, mask, -9.0);
    CHECK(y.data()[1] == a.data()[1]);
    CHECK(y.data()[0] == -9.0);
    DT loss = sum_all(y);
    tape.backward(loss);
    CHECK(a.grad()[0] == 0.0);
    CHECK(a.grad()[1] == 1.0);

    auto x = make({2, 3}, wiggle(6, 0.5, 0.1));
    auto res = grad_check<double>(
        [&] {
            DT out = masked_fill(x, mask, 0.25);
            return sum_all(mul(out, out));
        },
        {x});
    CHECK(res.max_rel_error < kTol);
}

TEST_CASE("weighted_head_sum: gradients and permutation invariance to the bit") {
    auto values = make({2, 3, 4}, wiggle(24, 0.9, 0.2));
    auto weights = make({2, 3}, wiggle(6, 0.4, 0.8));
    auto res = grad_check<double>(
        [&] {
            DT out = weighted_head_sum(values, weights); // (2,4)
            return sum_all(mul(out, out));
        },
        {values, weights});
    CHECK(res.max_rel_error < kTol);

    // permute heads: the sorted accumulation must give bit-identical output
    std::vector<std::size_t> perm{2, 0, 1};
    std::vector<double> pv(24), pw(6);
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t h = 0; h < 3; ++h) {
            pw[b * 3 + h] = weights.data()[b * 3 + perm[h]];
            for (std::size_t d = 0; d < 4; ++d) {
                pv[(b * 3 + h) * 4 + d] = values.data()[(b * 3 + perm[h]) * 4 + d];
            }
        }
    }
    DT values_p = DT::from_vector({2, 3, 4}, pv);
    DT weights_p = DT::from_vector({2, 3}, pw);
    DT out = weighted_head_sum(values, weights);
    DT out_p = weighted_head_sum(values_p, weights_p);
    for (std::size_t i = 0; i < out.data().size(); ++i) {
        CHECK(out.data()[i] == out_p.data()[i]); // exact, not approximate
    }
}

TEST_CASE("rowmax_detached finds row maxima and carries no gradient") {
    auto a = make({2, 3}, {1, 5, 2, -4, -1, -9});
    DTape tape;
    DT m = rowmax_detached(a, -1);
    REQUIRE(m.shape() == Shape{2, 1});
    CHECK(m.data()[0] == 5.0);
    CHECK(m.data()[1] == -1.0);
    DT loss = sum_all(sub(a, m));
    tape.backward(loss);
    for (double g : a.grad()) CHECK(g == 1.0); // max treated as constant
}

TEST_CASE("shape mismatches raise ShapeError with the offending shapes") {
    DT a = DT::zeros({2, 3});
    DT b = DT::zeros({4, 5});
    CHECK_THROWS_AS((void)add(a, b), ShapeError);
    CHECK_THROWS_AS((void)matmul(a, b), ShapeError);
    try {
        (void)add(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("2") != std::string::npos);
        CHECK(std::string(e.what()).find("5") != std::string::npos);
    }
    CHECK_THROWS_AS((void)concat(std::vector<DT>{a, DT::zeros({2, 4})}, 0), ShapeError);
    CHECK_THROWS_AS((void)slice(a, 1, 2, 9), ShapeError);
    CHECK_THROWS_AS((void)reshape(a, {7}), ShapeError);
}

TEST_CASE("tape: leaf gradients accumulate across backward calls") {
    auto a = make({2}, {3.0, -1.0});
    DTape tape;
    DT loss = sum_all(mul(a, a));
    tape.backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(6.0));
    tape.backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(12.0)); // doubled: leaves accumulate
    a.zero_grad();
    tape.backward(loss);
    CHECK(a.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("no tape, no recording: gradients stay zero") {
    auto a = make({2}, {1.0, 2.0});
    DT y = mul(a, a); // no TapeT alive
    CHECK(y.data()[1] == 4.0);
    for (double g : a.grad()) CHECK(g == 0.0);
}

TEST_CASE("debug mode surfaces non-finite values as NumericError") {
    const bool was = debug_checks();
    debug_checks() = true;
    auto a = make({2}, {1.0, 0.0});
    DT b = DT::from_vector({2}, {0.0, 0.0});
    CHECK_THROWS_AS((void)div(a, b), NumericError);
    debug_checks() = false;
    DT q = div(a, b);
    CHECK(std::isinf(q.data()[0]));
    debug_checks() = was;
}
