#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A TensorT<T> is a shared handle to a node holding shape, values, and an
// optional gradient buffer. Operations are free functions: they compute the
// forward value eagerly and, when a TapeT<T> is active on this thread and any
// operand requires gradients, push a backward closure onto the tape. Tapes are
// per-forward-pass: record in execution order, replay adjoints in reverse,
// discard. No higher-order derivatives.
//
// Scalar type is a template parameter: float for training, double for
// gradient tests. Broadcasting follows trailing-dimension alignment.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sesm/errors.hpp"

namespace sesm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

// Row-major element strides.
inline std::vector<std::size_t> row_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Integer array for token ids and index arguments (not differentiable).
struct IntArray {
    Shape shape;
    std::vector<std::int32_t> data;

    std::size_t numel() const { return shape_numel(shape); }
};

template <typename T>
struct NodeT {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;          // empty until first needed
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), T(0));
    }
};

template <typename T>
class TapeT;

template <typename T>
inline TapeT<T>*& active_tape() {
    thread_local TapeT<T>* tape = nullptr;
    return tape;
}

template <typename T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape) { return filled(std::move(shape), T(0)); }

    static TensorT filled(Shape shape, T v) {
        TensorT t;
        t.node_ = std::make_shared<NodeT<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value.assign(shape_numel(t.node_->shape), v);
        return t;
    }

    static TensorT from_vector(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != data.size()) {
            throw ShapeError("from_vector", shape_str(shape),
                             "(" + std::to_string(data.size()) + " values)");
        }
        TensorT t;
        t.node_ = std::make_shared<NodeT<T>>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(data);
        return t;
    }

    static TensorT scalar(T v) { return from_vector({}, {v}); }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rank() const { return node_->shape.size(); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    std::vector<T>& grad() { return node_->grad; }
    const std::vector<T>& grad() const { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        if (rg) node_->ensure_grad();
        return *this;
    }
    void zero_grad() { node_->zero_grad(); }

    T item() const {
        if (numel() != 1) {
            throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) +
                                        " elements, expected 1");
        }
        return node_->value[0];
    }

    TensorT clone() const {
        TensorT t = from_vector(shape(), data());
        return t;
    }

    template <typename U>
    std::vector<U> to_vector() const {
        return std::vector<U>(data().begin(), data().end());
    }

    std::shared_ptr<NodeT<T>> node() const { return node_; }

private:
    std::shared_ptr<NodeT<T>> node_;
};

// Per-forward-pass tape. Constructing one makes it the active tape on this
// thread (saving any previous); destruction restores the previous. backward()
// replays recorded closures in reverse order, exactly once each.
template <typename T>
class TapeT {
public:
    TapeT() : prev_(active_tape<T>()) { active_tape<T>() = this; }
    ~TapeT() { active_tape<T>() = prev_; }
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    void record(std::shared_ptr<NodeT<T>> out, std::function<void()> backward) {
        records_.push_back({std::move(out), std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }

    // Seeds d(loss)/d(loss) = 1 and accumulates adjoints into every
    // requires_grad leaf. Interior grads are reset per call, so calling twice
    // doubles leaf gradients (accumulation semantics).
    void backward(const TensorT<T>& loss) {
        if (loss.numel() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(loss.shape()));
        }
        for (auto& r : records_) {
            r.out->ensure_grad();
            r.out->zero_grad();
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] += T(1);
        for (std::size_t i = records_.size(); i-- > 0;) {
            records_[i].backward();
        }
    }

private:
    struct Record {
        std::shared_ptr<NodeT<T>> out;
        std::function<void()> backward;
    };
    TapeT* prev_ = nullptr;
    std::vector<Record> records_;
};

namespace detail {

template <typename T>
inline void check_finite(const char* op, const std::vector<T>& v) {
    if (!debug_checks()) return;
    for (T x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
    }
}

// Makes `out` a recorded result of an op when a tape is live and any input
// requires grad. Returns true if the backward closure should be installed.
template <typename T>
inline bool should_record(std::initializer_list<const TensorT<T>*> inputs) {
    if (!active_tape<T>()) return false;
    for (const TensorT<T>* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Broadcast plan: output shape plus per-dimension element strides into each
// operand (stride 0 along broadcast dimensions). Trailing alignment.
struct Bcast {
    Shape out;
    std::vector<std::size_t> sa, sb;
};

inline Bcast broadcast_plan(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Bcast p;
    p.out.assign(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
        const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(op, shape_str(a), shape_str(b));
        }
        p.out[rank - 1 - i] = std::max(da, db);
    }
    const auto full_strides = [&](const Shape& s) {
        std::vector<std::size_t> st(rank, 0);
        auto own = row_strides(s);
        for (std::size_t i = 0; i < s.size(); ++i) {
            const std::size_t out_i = rank - s.size() + i;
            st[out_i] = (s[i] == 1 && p.out[out_i] != 1) ? 0 : own[i];
        }
        return st;
    };
    p.sa = full_strides(a);
    p.sb = full_strides(b);
    return p;
}

// Calls f(out_index, a_offset, b_offset) for every output element.
template <class F>
inline void bcast_for_each(const Bcast& p, F&& f) {
    const std::size_t rank = p.out.size();
    const std::size_t total = shape_numel(p.out);
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < total; ++i) {
        f(i, oa, ob);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            oa += p.sa[d];
            ob += p.sb[d];
            if (idx[d] < p.out[d]) break;
            idx[d] = 0;
            oa -= p.sa[d] * p.out[d];
            ob -= p.sb[d] * p.out[d];
        }
    }
}

// Shared skeleton for broadcasting binary elementwise ops. DA/DB compute the
// local partial given (a_value, b_value, out_value).
template <typename T, class Fwd, class DA, class DB>
TensorT<T> binary_elementwise(const char* name, const TensorT<T>& a, const TensorT<T>& b,
                              Fwd fwd, DA da, DB db) {
    const Bcast plan = broadcast_plan(a.shape(), b.shape(), name);
    TensorT<T> out = TensorT<T>::zeros(plan.out);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
    } else {
        bcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            ov[i] = fwd(av[ia], bv[ib]);
        });
    }
    check_finite(name, ov);
    if (should_record<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape<T>()->record(on, [an, bn, on, plan, da, db]() {
            const auto& go = on->grad;
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            bcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                if (an->requires_grad) {
                    an->grad[ia] += go[i] * da(an->value[ia], bn->value[ib], on->value[i]);
                }
                if (bn->requires_grad) {
                    bn->grad[ib] += go[i] * db(an->value[ia], bn->value[ib], on->value[i]);
                }
            });
        });
    }
    return out;
}

template <typename T, class Fwd, class Dx>
TensorT<T> unary_elementwise(const char* name, const TensorT<T>& a, Fwd fwd, Dx dx) {
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i]);
    check_finite(name, ov);
    if (should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on, dx]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) {
                an->grad[i] += on->grad[i] * dx(an->value[i], on->value[i]);
            }
        });
    }
    return out;
}

inline int normalize_axis(int axis, std::size_t rank, const char* op) {
    int a = axis;
    if (a < 0) a += static_cast<int>(rank);
    if (a < 0 || a >= static_cast<int>(rank)) {
        throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                    " out of range for rank " + std::to_string(rank));
    }
    return a;
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_elementwise<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_elementwise<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_elementwise<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_elementwise<T>(
        "div", a, b, [](T x, T y) { return x / y; },
        [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c) {
    return detail::unary_elementwise<T>(
        "mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    return detail::unary_elementwise<T>(
        "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& a) {
    return mul_scalar(a, T(-1));
}

// ---------------------------------------------------------------------------
// elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> relu(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "relu", a, [](T x) { return x > T(0) ? x : T(0); },
        [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "sigmoid", a,
        [](T x) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorT<T> tanh_op(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "tanh", a, [](T x) { return std::tanh(x); },
        [](T, T y) { return T(1) - y * y; });
}

template <typename T>
TensorT<T> softplus(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "softplus", a,
        [](T x) {
            // ln(1 + e^x), overflow-safe on both tails
            return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        },
        [](T x, T) {
            if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
            const T e = std::exp(x);
            return e / (T(1) + e);
        });
}

template <typename T>
TensorT<T> exp_op(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
TensorT<T> log_op(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
TensorT<T> sqrt_op(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "sqrt", a, [](T x) { return std::sqrt(x); },
        [](T, T y) { return T(0.5) / y; });
}

// sqrt with subgradient 0 at the origin, so exact zeros (e.g. the distance
// of a point to itself) stay differentiable instead of producing inf * 0.
template <typename T>
TensorT<T> safe_sqrt(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "safe_sqrt", a, [](T x) { return std::sqrt(x); },
        [](T x, T y) { return x > T(0) ? T(0.5) / y : T(0); });
}

// Hard threshold with a straight-through backward: forward emits 1[x > 0.5],
// backward passes the incoming gradient through unchanged.
template <typename T>
TensorT<T> st_threshold(const TensorT<T>& a) {
    return detail::unary_elementwise<T>(
        "st_threshold", a, [](T x) { return x > T(0.5) ? T(1) : T(0); },
        [](T, T) { return T(1); });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> reshape(const TensorT<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw ShapeError("reshape", shape_str(a.shape()), shape_str(new_shape));
    }
    TensorT<T> out = TensorT<T>::from_vector(std::move(new_shape), a.data());
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        });
    }
    return out;
}

// Swaps two axes (defaults: the last two).
template <typename T>
TensorT<T> transpose(const TensorT<T>& a, int axis1 = -2, int axis2 = -1) {
    const int a1 = detail::normalize_axis(axis1, a.rank(), "transpose");
    const int a2 = detail::normalize_axis(axis2, a.rank(), "transpose");
    Shape out_shape = a.shape();
    std::swap(out_shape[a1], out_shape[a2]);
    TensorT<T> out = TensorT<T>::zeros(out_shape);

    const auto in_strides = row_strides(a.shape());
    auto perm_strides = in_strides;
    std::swap(perm_strides[a1], perm_strides[a2]);

    const std::size_t rank = a.rank();
    const std::size_t total = a.numel();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t src = 0;
    auto& ov = out.data();
    const auto& av = a.data();
    for (std::size_t i = 0; i < total; ++i) {
        ov[i] = av[src];
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            src += perm_strides[d];
            if (idx[d] < out_shape[d]) break;
            idx[d] = 0;
            src -= perm_strides[d] * out_shape[d];
        }
    }
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on, out_shape, perm_strides, rank, total]() {
            an->ensure_grad();
            std::vector<std::size_t> ix(rank, 0);
            std::size_t src = 0;
            for (std::size_t i = 0; i < total; ++i) {
                an->grad[src] += on->grad[i];
                for (std::size_t d = rank; d-- > 0;) {
                    ++ix[d];
                    src += perm_strides[d];
                    if (ix[d] < out_shape[d]) break;
                    ix[d] = 0;
                    src -= perm_strides[d] * out_shape[d];
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat: no inputs");
    const int ax = detail::normalize_axis(axis, parts[0].rank(), "concat");
    Shape out_shape = parts[0].shape();
    std::size_t cat_dim = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (s.size() != out_shape.size()) {
            throw ShapeError("concat", shape_str(out_shape), shape_str(s));
        }
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (static_cast<int>(d) != ax && s[d] != out_shape[d]) {
                throw ShapeError("concat", shape_str(out_shape), shape_str(s));
            }
        }
        cat_dim += s[ax];
    }
    out_shape[ax] = cat_dim;
    TensorT<T> out = TensorT<T>::zeros(out_shape);

    // outer = product of dims before axis, inner = product after
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= out_shape[d];
    for (std::size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];

    auto& ov = out.data();
    std::size_t axis_offset = 0;
    for (const auto& p : parts) {
        const std::size_t pa = p.shape()[ax];
        const auto& pv = p.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t k = 0; k < pa; ++k) {
                const std::size_t dst = (o * cat_dim + axis_offset + k) * inner;
                const std::size_t srcb = (o * pa + k) * inner;
                std::copy(pv.begin() + srcb, pv.begin() + srcb + inner, ov.begin() + dst);
            }
        }
        axis_offset += pa;
    }

    bool any_grad = false;
    for (const auto& p : parts) {
        if (p.requires_grad()) any_grad = true;
    }
    if (active_tape<T>() && any_grad) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<NodeT<T>>> pn;
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            pn.push_back(p.node());
            widths.push_back(p.shape()[ax]);
        }
        auto on = out.node();
        active_tape<T>()->record(on, [pn, widths, on, outer, inner, cat_dim]() {
            std::size_t axis_offset = 0;
            for (std::size_t pi = 0; pi < pn.size(); ++pi) {
                const std::size_t pa = widths[pi];
                if (pn[pi]->requires_grad) {
                    pn[pi]->ensure_grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t k = 0; k < pa; ++k) {
                            const std::size_t src = (o * cat_dim + axis_offset + k) * inner;
                            const std::size_t dst = (o * pa + k) * inner;
                            for (std::size_t j = 0; j < inner; ++j) {
                                pn[pi]->grad[dst + j] += on->grad[src + j];
                            }
                        }
                    }
                }
                axis_offset += pa;
            }
        });
    }
    return out;
}

// Half-open range [begin, end) along one axis.
template <typename T>
TensorT<T> slice(const TensorT<T>& a, int axis, std::size_t begin, std::size_t end) {
    const int ax = detail::normalize_axis(axis, a.rank(), "slice");
    const std::size_t dim = a.shape()[ax];
    if (begin > end || end > dim) {
        throw ShapeError("slice", shape_str(a.shape()),
                         "[" + std::to_string(begin) + "," + std::to_string(end) + ")");
    }
    Shape out_shape = a.shape();
    out_shape[ax] = end - begin;
    TensorT<T> out = TensorT<T>::zeros(out_shape);

    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= a.shape()[d];
    for (std::size_t d = ax + 1; d < a.shape().size(); ++d) inner *= a.shape()[d];
    const std::size_t width = end - begin;

    auto& ov = out.data();
    const auto& av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t srcb = (o * dim + begin) * inner;
        std::copy(av.begin() + srcb, av.begin() + srcb + width * inner,
                  ov.begin() + o * width * inner);
    }
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on, outer, inner, dim, begin, width]() {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t dstb = (o * dim + begin) * inner;
                const std::size_t srcb = o * width * inner;
                for (std::size_t j = 0; j < width * inner; ++j) {
                    an->grad[dstb + j] += on->grad[srcb + j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum(const TensorT<T>& a, int axis, bool keepdim = false) {
    const int ax = detail::normalize_axis(axis, a.rank(), "sum");
    const std::size_t dim = a.shape()[ax];
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= a.shape()[d];
    for (std::size_t d = ax + 1; d < a.shape().size(); ++d) inner *= a.shape()[d];

    Shape out_shape;
    for (std::size_t d = 0; d < a.shape().size(); ++d) {
        if (static_cast<int>(d) == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(a.shape()[d]);
        }
    }
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    auto& ov = out.data();
    const auto& av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < dim; ++k) {
            const std::size_t srcb = (o * dim + k) * inner;
            for (std::size_t j = 0; j < inner; ++j) ov[o * inner + j] += av[srcb + j];
        }
    }
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on, outer, inner, dim]() {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t k = 0; k < dim; ++k) {
                    const std::size_t dstb = (o * dim + k) * inner;
                    for (std::size_t j = 0; j < inner; ++j) {
                        an->grad[dstb + j] += on->grad[o * inner + j];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& a, int axis, bool keepdim = false) {
    const int ax = detail::normalize_axis(axis, a.rank(), "mean");
    const T scale = T(1) / static_cast<T>(a.shape()[ax]);
    return mul_scalar(sum(a, axis, keepdim), scale);
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& a) {
    TensorT<T> out = TensorT<T>::zeros({});
    T acc = 0;
    for (T x : a.data()) acc += x;
    out.data()[0] = acc;
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on]() {
            an->ensure_grad();
            const T g = on->grad[0];
            for (auto& gi : an->grad) gi += g;
        });
    }
    return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> softmax(const TensorT<T>& a, int axis) {
    const int ax = detail::normalize_axis(axis, a.rank(), "softmax");
    const std::size_t dim = a.shape()[ax];
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= a.shape()[d];
    for (std::size_t d = ax + 1; d < a.shape().size(); ++d) inner *= a.shape()[d];

    TensorT<T> out = TensorT<T>::zeros(a.shape());
    auto& ov = out.data();
    const auto& av = a.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            T mx = av[(o * dim) * inner + j];
            for (std::size_t k = 1; k < dim; ++k) {
                mx = std::max(mx, av[(o * dim + k) * inner + j]);
            }
            T denom = 0;
            for (std::size_t k = 0; k < dim; ++k) {
                const T e = std::exp(av[(o * dim + k) * inner + j] - mx);
                ov[(o * dim + k) * inner + j] = e;
                denom += e;
            }
            for (std::size_t k = 0; k < dim; ++k) ov[(o * dim + k) * inner + j] /= denom;
        }
    }
    detail::check_finite("softmax", ov);
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on, outer, inner, dim]() {
            an->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t j = 0; j < inner; ++j) {
                    T dot = 0;
                    for (std::size_t k = 0; k < dim; ++k) {
                        const std::size_t ix = (o * dim + k) * inner + j;
                        dot += on->grad[ix] * on->value[ix];
                    }
                    for (std::size_t k = 0; k < dim; ++k) {
                        const std::size_t ix = (o * dim + k) * inner + j;
                        an->grad[ix] += on->value[ix] * (on->grad[ix] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace detail {

// Leading (batch) dims broadcast; the last two are matrix dims.
struct MatmulPlan {
    Shape out;                     // full output shape
    std::size_t batch, m, k, n;
    std::vector<std::size_t> a_batch_stride, b_batch_stride; // per leading out dim
    Shape lead;                    // leading out dims
};

inline MatmulPlan matmul_plan(const Shape& a, const Shape& b) {
    if (a.size() < 2 || b.size() < 2) {
        throw ShapeError("matmul", shape_str(a), shape_str(b));
    }
    const std::size_t m = a[a.size() - 2], ka = a[a.size() - 1];
    const std::size_t kb = b[b.size() - 2], n = b[b.size() - 1];
    if (ka != kb) throw ShapeError("matmul", shape_str(a), shape_str(b));

    Shape la(a.begin(), a.end() - 2), lb(b.begin(), b.end() - 2);
    const Bcast lead = broadcast_plan(la, lb, "matmul");

    MatmulPlan p;
    p.lead = lead.out;
    p.out = lead.out;
    p.out.push_back(m);
    p.out.push_back(n);
    p.m = m;
    p.k = ka;
    p.n = n;
    p.batch = shape_numel(lead.out);
    // element strides within the leading-dim space, in units of matrices
    auto mat_strides = [&](const Shape& lshape, const std::vector<std::size_t>& st) {
        // st is element strides over the *leading* shape of that operand;
        // convert: each step over a leading dim advances by st[d] matrices.
        return st;
    };
    p.a_batch_stride = mat_strides(la, lead.sa);
    p.b_batch_stride = mat_strides(lb, lead.sb);
    return p;
}

template <class F>
inline void matmul_for_each_batch(const MatmulPlan& p, F&& f) {
    const std::size_t rank = p.lead.size();
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t i = 0; i < p.batch; ++i) {
        f(i, oa, ob);
        for (std::size_t d = rank; d-- > 0;) {
            ++idx[d];
            oa += p.a_batch_stride[d];
            ob += p.b_batch_stride[d];
            if (idx[d] < p.lead[d]) break;
            idx[d] = 0;
            oa -= p.a_batch_stride[d] * p.lead[d];
            ob -= p.b_batch_stride[d] * p.lead[d];
        }
    }
}

} // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    const detail::MatmulPlan p = detail::matmul_plan(a.shape(), b.shape());
    TensorT<T> out = TensorT<T>::zeros(p.out);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    const std::size_t as = p.m * p.k, bs = p.k * p.n, os = p.m * p.n;
    detail::matmul_for_each_batch(p, [&](std::size_t bi, std::size_t ba, std::size_t bb) {
        const T* A = av.data() + ba * as;
        const T* B = bv.data() + bb * bs;
        T* O = ov.data() + bi * os;
        for (std::size_t i = 0; i < p.m; ++i) {
            for (std::size_t l = 0; l < p.k; ++l) {
                const T x = A[i * p.k + l];
                if (x == T(0)) continue;
                const T* Br = B + l * p.n;
                T* Or = O + i * p.n;
                for (std::size_t j = 0; j < p.n; ++j) Or[j] += x * Br[j];
            }
        }
    });
    detail::check_finite("matmul", ov);
    if (detail::should_record<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape<T>()->record(on, [an, bn, on, p, as, bs, os]() {
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            detail::matmul_for_each_batch(p, [&](std::size_t bi, std::size_t ba, std::size_t bb) {
                const T* A = an->value.data() + ba * as;
                const T* B = bn->value.data() + bb * bs;
                const T* G = on->grad.data() + bi * os;
                if (an->requires_grad) {
                    T* GA = an->grad.data() + ba * as;
                    // dA = G @ B^T
                    for (std::size_t i = 0; i < p.m; ++i) {
                        for (std::size_t l = 0; l < p.k; ++l) {
                            T acc = 0;
                            const T* Gr = G + i * p.n;
                            const T* Br = B + l * p.n;
                            for (std::size_t j = 0; j < p.n; ++j) acc += Gr[j] * Br[j];
                            GA[i * p.k + l] += acc;
                        }
                    }
                }
                if (bn->requires_grad) {
                    T* GB = bn->grad.data() + bb * bs;
                    // dB = A^T @ G
                    for (std::size_t l = 0; l < p.k; ++l) {
                        for (std::size_t i = 0; i < p.m; ++i) {
                            const T x = A[i * p.k + l];
                            if (x == T(0)) continue;
                            const T* Gr = G + i * p.n;
                            T* GBr = GB + l * p.n;
                            for (std::size_t j = 0; j < p.n; ++j) GBr[j] += x * Gr[j];
                        }
                    }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

// Valid cross-correlation: signal (B, Cin, L) * kernel (Cout, Cin, K), given
// stride, -> (B, Cout, 1 + (L - K) / stride). Requires K <= L.
template <typename T>
TensorT<T> conv1d(const TensorT<T>& signal, const TensorT<T>& kernel, std::size_t stride) {
    if (signal.rank() != 3 || kernel.rank() != 3 ||
        signal.shape()[1] != kernel.shape()[1] || kernel.shape()[2] > signal.shape()[2]) {
        throw ShapeError("conv1d", shape_str(signal.shape()), shape_str(kernel.shape()));
    }
    if (stride == 0) throw std::invalid_argument("conv1d: stride must be positive");
    const std::size_t B = signal.shape()[0], Cin = signal.shape()[1], L = signal.shape()[2];
    const std::size_t Cout = kernel.shape()[0], K = kernel.shape()[2];
    const std::size_t Lo = 1 + (L - K) / stride;

    TensorT<T> out = TensorT<T>::zeros({B, Cout, Lo});
    const auto& xv = signal.data();
    const auto& wv = kernel.data();
    auto& ov = out.data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t co = 0; co < Cout; ++co) {
            for (std::size_t o = 0; o < Lo; ++o) {
                T acc = 0;
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                    const T* xr = xv.data() + (b * Cin + ci) * L + o * stride;
                    const T* wr = wv.data() + (co * Cin + ci) * K;
                    for (std::size_t k = 0; k < K; ++k) acc += xr[k] * wr[k];
                }
                ov[(b * Cout + co) * Lo + o] = acc;
            }
        }
    }
    detail::check_finite("conv1d", ov);
    if (detail::should_record<T>({&signal, &kernel})) {
        out.set_requires_grad(true);
        auto xn = signal.node(), wn = kernel.node(), on = out.node();
        active_tape<T>()->record(on, [xn, wn, on, B, Cin, Cout, L, K, Lo, stride]() {
            if (xn->requires_grad) xn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t co = 0; co < Cout; ++co) {
                    for (std::size_t o = 0; o < Lo; ++o) {
                        const T g = on->grad[(b * Cout + co) * Lo + o];
                        if (g == T(0)) continue;
                        for (std::size_t ci = 0; ci < Cin; ++ci) {
                            const std::size_t xb = (b * Cin + ci) * L + o * stride;
                            const std::size_t wb = (co * Cin + ci) * K;
                            for (std::size_t k = 0; k < K; ++k) {
                                if (xn->requires_grad) {
                                    xn->grad[xb + k] += g * wn->value[wb + k];
                                }
                                if (wn->requires_grad) {
                                    wn->grad[wb + k] += g * xn->value[xb + k];
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

// table (V, D) gathered by integer ids -> ids.shape + (D,). Backward
// scatter-adds into the table rows.
template <typename T>
TensorT<T> embedding_lookup(const TensorT<T>& table, const IntArray& ids) {
    if (table.rank() != 2) {
        throw ShapeError("embedding_lookup", shape_str(table.shape()), shape_str(ids.shape));
    }
    const std::size_t V = table.shape()[0], D = table.shape()[1];
    for (std::size_t i = 0; i < ids.data.size(); ++i) {
        if (ids.data[i] < 0 || static_cast<std::size_t>(ids.data[i]) >= V) {
            throw DataError("embedding_lookup: id " + std::to_string(ids.data[i]) +
                            " out of range [0," + std::to_string(V) + ") at flat position " +
                            std::to_string(i));
        }
    }
    Shape out_shape = ids.shape;
    out_shape.push_back(D);
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const auto& tv = table.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < ids.data.size(); ++i) {
        std::copy(tv.begin() + ids.data[i] * D, tv.begin() + (ids.data[i] + 1) * D,
                  ov.begin() + i * D);
    }
    if (detail::should_record<T>({&table})) {
        out.set_requires_grad(true);
        auto tn = table.node(), on = out.node();
        auto id_copy = ids.data;
        active_tape<T>()->record(on, [tn, on, id_copy, D]() {
            tn->ensure_grad();
            for (std::size_t i = 0; i < id_copy.size(); ++i) {
                for (std::size_t j = 0; j < D; ++j) {
                    tn->grad[id_copy[i] * D + j] += on->grad[i * D + j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// cosine similarity and row normalization
// ---------------------------------------------------------------------------

// Reduces the last axis of two same-shape tensors. cos(0, x) = 0 by
// convention (subgradient 0), keeping the function total.
template <typename T>
TensorT<T> cosine_similarity(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape() || a.rank() < 1) {
        throw ShapeError("cosine_similarity", shape_str(a.shape()), shape_str(b.shape()));
    }
    const std::size_t D = a.shape().back();
    const std::size_t rows = a.numel() / D;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0, na = 0, nb = 0;
        for (std::size_t j = 0; j < D; ++j) {
            const T x = av[r * D + j], y = bv[r * D + j];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        ov[r] = (na > T(0) && nb > T(0)) ? dot / (std::sqrt(na) * std::sqrt(nb)) : T(0);
    }
    if (detail::should_record<T>({&a, &b})) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        active_tape<T>()->record(on, [an, bn, on, rows, D]() {
            if (an->requires_grad) an->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                T na2 = 0, nb2 = 0;
                for (std::size_t j = 0; j < D; ++j) {
                    na2 += an->value[r * D + j] * an->value[r * D + j];
                    nb2 += bn->value[r * D + j] * bn->value[r * D + j];
                }
                if (na2 == T(0) || nb2 == T(0)) continue;
                const T na = std::sqrt(na2), nb = std::sqrt(nb2);
                const T c = on->value[r];
                const T g = on->grad[r];
                for (std::size_t j = 0; j < D; ++j) {
                    const T x = an->value[r * D + j], y = bn->value[r * D + j];
                    if (an->requires_grad) {
                        an->grad[r * D + j] += g * (y / (na * nb) - c * x / na2);
                    }
                    if (bn->requires_grad) {
                        bn->grad[r * D + j] += g * (x / (na * nb) - c * y / nb2);
                    }
                }
            }
        });
    }
    return out;
}

// Unit-normalizes the last axis; all-zero rows stay zero.
template <typename T>
TensorT<T> l2_normalize(const TensorT<T>& a) {
    if (a.rank() < 1) throw std::invalid_argument("l2_normalize: rank-0 input");
    const std::size_t D = a.shape().back();
    const std::size_t rows = a.numel() / D;
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        T n2 = 0;
        for (std::size_t j = 0; j < D; ++j) n2 += av[r * D + j] * av[r * D + j];
        if (n2 > T(0)) {
            const T inv = T(1) / std::sqrt(n2);
            for (std::size_t j = 0; j < D; ++j) ov[r * D + j] = av[r * D + j] * inv;
        }
    }
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        active_tape<T>()->record(on, [an, on, rows, D]() {
            an->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                T n2 = 0;
                for (std::size_t j = 0; j < D; ++j) {
                    n2 += an->value[r * D + j] * an->value[r * D + j];
                }
                if (n2 == T(0)) continue;
                const T inv = T(1) / std::sqrt(n2);
                T dot = 0;
                for (std::size_t j = 0; j < D; ++j) {
                    dot += on->grad[r * D + j] * on->value[r * D + j];
                }
                for (std::size_t j = 0; j < D; ++j) {
                    an->grad[r * D + j] +=
                        inv * (on->grad[r * D + j] - dot * on->value[r * D + j]);
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// masked fill
// ---------------------------------------------------------------------------

// Where mask > 0.5, output is `value` (no gradient); elsewhere the input
// passes through. Mask broadcasts against the input and never receives grad.
template <typename T>
TensorT<T> masked_fill(const TensorT<T>& a, const TensorT<T>& mask, T value) {
    const detail::Bcast plan = detail::broadcast_plan(a.shape(), mask.shape(), "masked_fill");
    if (plan.out != a.shape()) {
        throw ShapeError("masked_fill", shape_str(a.shape()), shape_str(mask.shape()));
    }
    TensorT<T> out = TensorT<T>::zeros(a.shape());
    const auto& av = a.data();
    const auto& mv = mask.data();
    auto& ov = out.data();
    detail::bcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t im) {
        ov[i] = mv[im] > T(0.5) ? value : av[ia];
    });
    if (detail::should_record<T>({&a})) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        auto mn = mask.node();
        active_tape<T>()->record(on, [an, mn, on, plan]() {
            an->ensure_grad();
            detail::bcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t im) {
                if (mn->value[im] <= T(0.5)) an->grad[ia] += on->grad[i];
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// weighted head sum
// ---------------------------------------------------------------------------

// rep[b, j] = sum_h weights[b, h] * values[b, h, j].
// Heads are an unordered set: per output element the addends are accumulated
// in sorted value order, so permuting heads cannot change even the low bits.
template <typename T>
TensorT<T> weighted_head_sum(const TensorT<T>& values, const TensorT<T>& weights) {
    if (values.rank() != 3 || weights.rank() != 2 ||
        values.shape()[0] != weights.shape()[0] || values.shape()[1] != weights.shape()[1]) {
        throw ShapeError("weighted_head_sum", shape_str(values.shape()),
                         shape_str(weights.shape()));
    }
    const std::size_t B = values.shape()[0], H = values.shape()[1], D = values.shape()[2];
    TensorT<T> out = TensorT<T>::zeros({B, D});
    const auto& cv = values.data();
    const auto& wv = weights.data();
    auto& ov = out.data();
    std::vector<T> terms(H);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t j = 0; j < D; ++j) {
            for (std::size_t h = 0; h < H; ++h) {
                terms[h] = wv[b * H + h] * cv[(b * H + h) * D + j];
            }
            std::sort(terms.begin(), terms.end());
            double acc = 0;
            for (T t : terms) acc += static_cast<double>(t);
            ov[b * D + j] = static_cast<T>(acc);
        }
    }
    detail::check_finite("weighted_head_sum", ov);
    if (detail::should_record<T>({&values, &weights})) {
        out.set_requires_grad(true);
        auto cn = values.node(), wn = weights.node(), on = out.node();
        active_tape<T>()->record(on, [cn, wn, on, B, H, D]() {
            if (cn->requires_grad) cn->ensure_grad();
            if (wn->requires_grad) wn->ensure_grad();
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < H; ++h) {
                    const T w = wn->value[b * H + h];
                    T wacc = 0;
                    for (std::size_t j = 0; j < D; ++j) {
                        const T g = on->grad[b * D + j];
                        if (cn->requires_grad) cn->grad[(b * H + h) * D + j] += g * w;
                        wacc += g * cn->value[(b * H + h) * D + j];
                    }
                    if (wn->requires_grad) wn->grad[b * H + h] += wacc;
                }
            }
        });
    }
    return out;
}

// Per-row max over an axis, detached from the graph (used for stable
// log-sum-exp; a constant shift does not change gradients).
template <typename T>
TensorT<T> rowmax_detached(const TensorT<T>& a, int axis) {
    const int ax = detail::normalize_axis(axis, a.rank(), "rowmax");
    const std::size_t dim = a.shape()[ax];
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < ax; ++d) outer *= a.shape()[d];
    for (std::size_t d = ax + 1; d < a.shape().size(); ++d) inner *= a.shape()[d];
    Shape out_shape = a.shape();
    out_shape[ax] = 1;
    TensorT<T> out = TensorT<T>::zeros(out_shape);
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
            T mx = av[(o * dim) * inner + j];
            for (std::size_t k = 1; k < dim; ++k) {
                mx = std::max(mx, av[(o * dim + k) * inner + j]);
            }
            ov[o * inner + j] = mx;
        }
    }
    return out;
}

} // namespace sesm
