#pragma once

// Training objective: weighted cross-entropy plus three interpretability
// regularizers over the selection/concept structure.
//
//   diversity  - hinge on pairwise distances between head selection vectors;
//                identical heads pay the full margin.
//   stability  - mean (1 - cosine) between concepts of the same head across
//                the batch; encourages each head to mean one thing.
//   locality   - mean selected fraction of the sequence, summed over heads;
//                encourages sparse, local selections.
//
// All regularizers consume soft selections so gradients reach the logits
// directly. Breakdown values are logged as doubles; `total` carries the
// graph for backward.

#include <cstdint>
#include <vector>

#include "sesm/batch.hpp"
#include "sesm/config.hpp"
#include "sesm/model.hpp"
#include "sesm/tensor.hpp"

namespace sesm {

struct LossBreakdown {
    double task = 0, diversity = 0, stability = 0, locality = 0, total = 0;
};

template <typename T>
struct LossOutputT {
    TensorT<T> total;
    LossBreakdown parts;
};

// Cross-entropy with per-sample weights, normalized by the weight sum:
// sum_i w_i * nll_i / sum_i w_i. Uniform weights give the plain mean.
template <typename T>
TensorT<T> task_loss(const TensorT<T>& logits, const std::vector<std::int32_t>& labels,
                     const std::vector<T>& sample_weights) {
    const std::size_t B = logits.shape()[0], C = logits.shape()[1];
    if (labels.size() != B || sample_weights.size() != B) {
        throw std::invalid_argument("task_loss: labels/weights must match batch size");
    }
    TensorT<T> onehot = TensorT<T>::zeros({B, C});
    for (std::size_t i = 0; i < B; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C) {
            throw DataError("task_loss: label " + std::to_string(labels[i]) +
                            " out of range for " + std::to_string(C) + " classes");
        }
        onehot.data()[i * C + labels[i]] = T(1);
    }
    T wsum = 0;
    for (T w : sample_weights) wsum += w;
    if (!(wsum > T(0))) throw std::invalid_argument("task_loss: weights must sum to > 0");
    TensorT<T> wts = TensorT<T>::from_vector({B}, sample_weights);

    // log-softmax via a detached row-max shift (constant offsets cancel)
    TensorT<T> shift = sub(logits, rowmax_detached(logits, -1));
    TensorT<T> lse = log_op(sum(exp_op(shift), -1, /*keepdim=*/true));
    TensorT<T> logp = sub(shift, lse);
    TensorT<T> nll = neg(sum(mul(logp, onehot), 1));          // (B)
    return mul_scalar(sum_all(mul(nll, wts)), T(1) / wsum);
}

// Mean over items and ordered head pairs of relu(d_min - ||s_i - s_j||).
template <typename T>
TensorT<T> diversity_loss(const TensorT<T>& sel, T d_min) {
    const std::size_t B = sel.shape()[0], H = sel.shape()[1];
    if (H < 2) return TensorT<T>::scalar(T(0));
    TensorT<T> G = matmul(sel, transpose(sel));               // (B, H, H)
    TensorT<T> sq = sum(mul(sel, sel), 2, /*keepdim=*/true);  // (B, H, 1)
    TensorT<T> d2 = add(add(sq, transpose(sq)), mul_scalar(G, T(-2)));
    // relu clamps the tiny negatives fp cancellation can leave on the diagonal
    TensorT<T> dist = safe_sqrt(relu(d2));
    TensorT<T> pen = relu(add_scalar(neg(dist), d_min));
    TensorT<T> offdiag = TensorT<T>::filled({H, H}, T(1));
    for (std::size_t h = 0; h < H; ++h) offdiag.data()[h * H + h] = T(0);
    const T norm = T(1) / static_cast<T>(B * H * (H - 1));
    return mul_scalar(sum_all(mul(pen, offdiag)), norm);
}

// Mean over heads and unordered item pairs of (1 - cos(c_h(x_i), c_h(x_j))).
// Computed via per-head Gram matrices of unit-normalized concepts:
//   sum_{i<j} (1 - G_ij) = C(B,2) - (sum(G) - tr(G)) / 2.
template <typename T>
TensorT<T> stability_loss(const TensorT<T>& concepts) {
    const std::size_t B = concepts.shape()[0], H = concepts.shape()[1];
    if (B < 2) return TensorT<T>::scalar(T(0));
    TensorT<T> unit = l2_normalize(concepts);                 // (B, H, d)
    TensorT<T> byhead = transpose(unit, 0, 1);                // (H, B, d)
    TensorT<T> G = matmul(byhead, transpose(byhead));         // (H, B, B)
    TensorT<T> tr = sum_all(mul(unit, unit));                 // sum_h tr(G_h)
    TensorT<T> cos_pairs = mul_scalar(sub(sum_all(G), tr), T(0.5));
    const T pairs = static_cast<T>(H) * static_cast<T>(B * (B - 1)) / T(2);
    TensorT<T> pre = sub(TensorT<T>::scalar(pairs), cos_pairs);
    return mul_scalar(pre, T(1) / pairs);
}

// Mean over items of sum_h (selected mass of head h) / (valid length).
template <typename T>
TensorT<T> locality_loss(const TensorT<T>& sel, const std::vector<std::size_t>& lengths) {
    const std::size_t B = sel.shape()[0];
    if (lengths.size() != B) {
        throw std::invalid_argument("locality_loss: lengths must match batch size");
    }
    std::vector<T> inv(B);
    for (std::size_t i = 0; i < B; ++i) {
        if (lengths[i] == 0) throw DataError("locality_loss: zero-length sequence");
        inv[i] = T(1) / static_cast<T>(lengths[i]);
    }
    TensorT<T> inv_len = TensorT<T>::from_vector({B}, std::move(inv));
    TensorT<T> mass = sum(sum(sel, 2), 1);                    // (B)
    return mean_all(mul(mass, inv_len));
}

// Assembles the full objective from a forward pass. Regularizers with zero
// weight are skipped entirely. Pair-mode inputs average each regularizer
// over the two sequences.
template <typename T>
LossOutputT<T> total_loss(const ForwardResultT<T>& r, const SequenceBatch& batch,
                          const LossWeights& w, const std::vector<T>& sample_weights) {
    const bool pair = r.rep_b.valid();
    LossOutputT<T> out;
    TensorT<T> total = task_loss(r.logits, batch.labels, sample_weights);
    out.parts.task = static_cast<double>(total.item());

    auto both = [&](TensorT<T> a, TensorT<T> b) {
        return pair ? mul_scalar(add(a, b), T(0.5)) : a;
    };
    if (w.lambda_div != 0) {
        TensorT<T> d = diversity_loss(r.sel_soft, static_cast<T>(w.d_min));
        if (pair) d = both(d, diversity_loss(r.sel_soft_b, static_cast<T>(w.d_min)));
        out.parts.diversity = static_cast<double>(d.item());
        total = add(total, mul_scalar(d, static_cast<T>(w.lambda_div)));
    }
    if (w.lambda_stab != 0) {
        TensorT<T> s = stability_loss(r.concepts);
        if (pair) s = both(s, stability_loss(r.concepts_b));
        out.parts.stability = static_cast<double>(s.item());
        total = add(total, mul_scalar(s, static_cast<T>(w.lambda_stab)));
    }
    if (w.lambda_loc != 0) {
        TensorT<T> l = locality_loss(r.sel_soft, batch.lengths);
        if (pair) l = both(l, locality_loss(r.sel_soft_b, batch.lengths_b));
        out.parts.locality = static_cast<double>(l.item());
        total = add(total, mul_scalar(l, static_cast<T>(w.lambda_loc)));
    }
    out.total = total;
    out.parts.total = out.parts.task + w.lambda_div * out.parts.diversity +
                      w.lambda_stab * out.parts.stability + w.lambda_loc * out.parts.locality;
    return out;
}

} // namespace sesm
