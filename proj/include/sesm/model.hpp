#pragma once

// Self-explaining selective sequence classifier.
//
// Each of H heads scores every segment of the input and selects a binary
// sub-sequence via a Gumbel-Sigmoid relaxation (hard straight-through samples
// during training, deterministic thresholding at evaluation). Each selected
// sub-sequence is encoded into a concept vector; an input-conditioned
// parameterizer assigns a non-negative weight to every head; the final
// representation is the weighted sum of concepts and is classified by a
// single linear layer, so every prediction decomposes exactly into per-head
// contributions.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sesm/batch.hpp"
#include "sesm/config.hpp"
#include "sesm/errors.hpp"
#include "sesm/rng.hpp"
#include "sesm/tensor.hpp"

namespace sesm {

enum class RunMode {
    Train,  // Gumbel noise + straight-through hard samples
    Eval,   // deterministic: no noise, strict threshold at 0.5
    Soft,   // no noise, no binarization (fully differentiable path)
};

// Test/evaluation interventions applied inside forward().
struct ForwardHooks {
    std::vector<std::size_t> delete_heads;   // zero these heads' weights
    bool force_all_ones_selection = false;   // select every valid position
    bool force_unit_weights = false;         // weight 1 for every head
};

template <typename T>
struct ForwardResultT {
    TensorT<T> logits;        // (B, C)
    TensorT<T> probs;         // (B, C)
    TensorT<T> rep;           // (B, d)
    TensorT<T> head_weights;  // (B, H), after hooks
    TensorT<T> sel_logits;    // (B, H, N)
    TensorT<T> sel_soft;      // (B, H, N), zero at padding
    TensorT<T> sel_hard;      // (B, H, N), the selections used downstream
    TensorT<T> concepts;      // (B, H, d)
    // pair mode: fields for the second sequence (logits/probs/rep above are
    // the pair prediction; rep holds the first side's representation)
    TensorT<T> rep_b;
    TensorT<T> head_weights_b;
    TensorT<T> sel_logits_b, sel_soft_b, sel_hard_b;
    TensorT<T> concepts_b;
};

// Named parameter registry with deterministic iteration order.
template <typename T>
class ParamStoreT {
public:
    TensorT<T>& add(const std::string& name, TensorT<T> t) {
        if (index_.count(name)) {
            throw std::invalid_argument("duplicate parameter: " + name);
        }
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
        return items_.back().second;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    TensorT<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return items_[it->second].second;
    }
    const TensorT<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
        return items_[it->second].second;
    }

    std::vector<std::pair<std::string, TensorT<T>>>& items() { return items_; }
    const std::vector<std::pair<std::string, TensorT<T>>>& items() const { return items_; }
    std::size_t size() const { return items_.size(); }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

private:
    std::vector<std::pair<std::string, TensorT<T>>> items_;
    std::map<std::string, std::size_t> index_;
};

template <typename T>
class SesmModelT {
public:
    explicit SesmModelT(SesmConfig cfg) : cfg_(std::move(cfg)) { build_params(); }

    const SesmConfig& config() const { return cfg_; }
    ParamStoreT<T>& params() { return params_; }
    const ParamStoreT<T>& params() const { return params_; }

    // Glorot-uniform weights, zero biases, scaled-normal embeddings.
    void init_params(Rng::Stream& stream) {
        for (auto& [name, t] : params_.items()) {
            init_one(name, t, stream);
        }
    }

    ForwardResultT<T> forward(const SequenceBatch& batch, RunMode mode, T tau,
                              Rng::Stream* gumbel = nullptr,
                              const ForwardHooks* hooks = nullptr) const {
        check_batch(batch);
        if (mode == RunMode::Train && gumbel == nullptr) {
            throw UsageError("forward: Train mode requires a noise stream");
        }
        ForwardResultT<T> r;
        const TensorT<T> mask = batch.mask<T>();
        run_side(batch, /*side_b=*/false, mask, mode, tau, gumbel, hooks, r.sel_logits,
                 r.sel_soft, r.sel_hard, r.concepts, r.head_weights, r.rep);
        if (!cfg_.pair_mode) {
            r.logits = classify(r.rep);
        } else {
            const TensorT<T> mask_b = batch.mask_b<T>();
            run_side(batch, /*side_b=*/true, mask_b, mode, tau, gumbel, hooks, r.sel_logits_b,
                     r.sel_soft_b, r.sel_hard_b, r.concepts_b, r.head_weights_b, r.rep_b);
            r.logits = classify_pair(r.rep, r.rep_b);
        }
        r.probs = softmax(r.logits, -1);
        return r;
    }

    // Linear classifier over a (B, d) representation.
    TensorT<T> classify(const TensorT<T>& rep) const {
        return add(matmul(rep, params_.at("cls.W")), params_.at("cls.b"));
    }

    // Classifies a single head's concept in isolation (how the classifier
    // would vote if this concept were the whole representation).
    TensorT<T> classify_concept(const TensorT<T>& concept_vec) const { return classify(concept_vec); }

    // Two-sequence head: MLP over [a, b, a-b, a*b].
    TensorT<T> classify_pair(const TensorT<T>& rep_a, const TensorT<T>& rep_b) const {
        const TensorT<T> feats =
            concat<T>({rep_a, rep_b, sub(rep_a, rep_b), mul(rep_a, rep_b)}, 1);
        TensorT<T> h = relu(add(matmul(feats, params_.at("pair.W1")), params_.at("pair.b1")));
        return add(matmul(h, params_.at("pair.W2")), params_.at("pair.b2"));
    }

    // Order-canonical aggregation: rep[b] = sum_h weights[b,h] * concepts[b,h].
    TensorT<T> aggregate(const TensorT<T>& concepts, const TensorT<T>& weights) const {
        return weighted_head_sum(concepts, weights);
    }

private:
    SesmConfig cfg_;
    ParamStoreT<T> params_;

    static std::string head_name(std::size_t h, const char* suffix) {
        return "head" + std::to_string(h) + "." + suffix;
    }

    void build_params() {
        const std::size_t d = cfg_.model_dim, dh = cfg_.head_dim;
        if (cfg_.token_input) {
            params_.add("embed.table", TensorT<T>::zeros({cfg_.vocab_size, d}));
        } else {
            params_.add("embed.W", TensorT<T>::zeros({cfg_.segment_kernel, d}));
            params_.add("embed.b", TensorT<T>::zeros({d}));
        }
        for (std::size_t h = 0; h < cfg_.num_heads; ++h) {
            params_.add(head_name(h, "Wq"), TensorT<T>::zeros({d, dh}));
            params_.add(head_name(h, "bq"), TensorT<T>::zeros({dh}));
            params_.add(head_name(h, "Wk"), TensorT<T>::zeros({d, dh}));
            params_.add(head_name(h, "bk"), TensorT<T>::zeros({dh}));
            params_.add(head_name(h, "mix"), TensorT<T>::zeros({cfg_.max_positions, 1}));
        }
        if (cfg_.encoder == EncoderKind::Mean) {
            params_.add("enc.W", TensorT<T>::zeros({d, d}));
            params_.add("enc.b", TensorT<T>::zeros({d}));
        } else {
            const std::size_t C = cfg_.encoder_channels;
            params_.add("enc.conv", TensorT<T>::zeros({C, d, 3}));
            params_.add("enc.convb", TensorT<T>::zeros({C, 1}));
            params_.add("enc.W", TensorT<T>::zeros({C, d}));
            params_.add("enc.b", TensorT<T>::zeros({d}));
        }
        if (cfg_.param_channels.size() != 2) {
            throw UsageError("param_channels must list exactly two conv widths");
        }
        const std::size_t C1 = cfg_.param_channels[0], C2 = cfg_.param_channels[1];
        const std::size_t hid = C2;
        params_.add("pz.conv1", TensorT<T>::zeros({C1, d, 3}));
        params_.add("pz.conv1b", TensorT<T>::zeros({C1, 1}));
        params_.add("pz.conv2", TensorT<T>::zeros({C2, C1, 3}));
        params_.add("pz.conv2b", TensorT<T>::zeros({C2, 1}));
        params_.add("pz.W1", TensorT<T>::zeros({C2, hid}));
        params_.add("pz.b1", TensorT<T>::zeros({hid}));
        params_.add("pz.W2", TensorT<T>::zeros({hid, cfg_.num_heads}));
        params_.add("pz.b2", TensorT<T>::zeros({cfg_.num_heads}));
        if (!cfg_.pair_mode) {
            params_.add("cls.W", TensorT<T>::zeros({d, cfg_.num_classes}));
            params_.add("cls.b", TensorT<T>::zeros({cfg_.num_classes}));
        } else {
            // pair mode still owns a single-representation classifier so that
            // standalone concepts can be inspected; predictions use pair.*
            params_.add("cls.W", TensorT<T>::zeros({d, cfg_.num_classes}));
            params_.add("cls.b", TensorT<T>::zeros({cfg_.num_classes}));
            params_.add("pair.W1", TensorT<T>::zeros({4 * d, 2 * d}));
            params_.add("pair.b1", TensorT<T>::zeros({2 * d}));
            params_.add("pair.W2", TensorT<T>::zeros({2 * d, cfg_.num_classes}));
            params_.add("pair.b2", TensorT<T>::zeros({cfg_.num_classes}));
        }
    }

    void init_one(const std::string& name, TensorT<T>& t, Rng::Stream& stream) {
        const Shape& s = t.shape();
        const bool is_bias = s.size() == 1 || (s.size() == 2 && s[1] == 1 && name.find("mix") == std::string::npos);
        if (name == "embed.table") {
            const T sd = T(1) / std::sqrt(static_cast<T>(cfg_.model_dim));
            for (auto& v : t.data()) v = static_cast<T>(stream.normal()) * sd;
            // padding row stays zero so pad tokens embed to nothing
            for (std::size_t j = 0; j < cfg_.model_dim; ++j) t.data()[j] = T(0);
            return;
        }
        if (is_bias) {
            for (auto& v : t.data()) v = T(0);
            return;
        }
        std::size_t fan_in, fan_out;
        if (s.size() == 3) {  // conv kernel (Cout, Cin, K)
            fan_in = s[1] * s[2];
            fan_out = s[0] * s[2];
        } else {              // matrix (in, out) or mix (P, 1)
            fan_in = s[0];
            fan_out = s[1];
        }
        const T limit = std::sqrt(T(6) / static_cast<T>(fan_in + fan_out));
        for (auto& v : t.data()) {
            v = static_cast<T>(stream.uniform(-double(limit), double(limit)));
        }
    }

    void check_batch(const SequenceBatch& batch) const {
        if (batch.batch == 0) throw DataError("forward: empty batch");
        if (batch.num_segments > cfg_.max_positions) {
            throw ShapeError("forward", "positions=" + std::to_string(batch.num_segments),
                             "max_positions=" + std::to_string(cfg_.max_positions));
        }
        if (cfg_.token_input) {
            if (batch.token_ids.size() != batch.batch * batch.num_segments) {
                throw ShapeError("forward", "tokens=" + std::to_string(batch.token_ids.size()),
                                 shape_str({batch.batch, batch.num_segments}));
            }
        } else {
            if (batch.segment_kernel != cfg_.segment_kernel) {
                throw ShapeError("forward",
                                 "batch kernel=" + std::to_string(batch.segment_kernel),
                                 "model kernel=" + std::to_string(cfg_.segment_kernel));
            }
            if (batch.segments.size() !=
                batch.batch * batch.num_segments * batch.segment_kernel) {
                throw ShapeError(
                    "forward", "segments=" + std::to_string(batch.segments.size()),
                    shape_str({batch.batch, batch.num_segments, batch.segment_kernel}));
            }
        }
        if (cfg_.pair_mode &&
            (batch.lengths_b.size() != batch.batch)) {
            throw DataError("forward: pair-mode batch is missing the second sequences");
        }
    }

    // Embeds one side of the batch into (B, N, d), zeroed at padding.
    TensorT<T> embed(const SequenceBatch& batch, const TensorT<T>& mask, bool side_b) const {
        const std::size_t B = batch.batch, N = batch.num_segments;
        const std::size_t d = cfg_.model_dim;
        TensorT<T> E;
        if (cfg_.token_input) {
            IntArray ids;
            ids.shape = {B, N};
            ids.data = side_b ? batch.token_ids_b : batch.token_ids;
            E = embedding_lookup(params_.at("embed.table"), ids);
        } else {
            const auto& raw = side_b ? batch.segments_b : batch.segments;
            std::vector<T> vals(raw.begin(), raw.end());
            TensorT<T> X = TensorT<T>::from_vector({B, N, batch.segment_kernel}, std::move(vals));
            E = add(matmul(X, params_.at("embed.W")), params_.at("embed.b"));
        }
        return mul(E, reshape(mask, {B, N, 1}));
    }

    // Per-head position scores: a bilinear self-attention map whose rows are
    // mixed by a learned position profile, scaled by 1/sqrt(d_h).
    TensorT<T> selection_logits(const TensorT<T>& E, const TensorT<T>& mask) const {
        const std::size_t B = E.shape()[0], N = E.shape()[1];
        const T scale = T(1) / std::sqrt(static_cast<T>(cfg_.head_dim));
        // invalid key positions must contribute nothing to the mix
        TensorT<T> inv_cols = TensorT<T>::zeros({B, std::size_t(1), N});
        for (std::size_t i = 0; i < B * N; ++i) {
            inv_cols.data()[i] = mask.data()[i] > T(0.5) ? T(0) : T(1);
        }
        std::vector<TensorT<T>> per_head;
        per_head.reserve(cfg_.num_heads);
        for (std::size_t h = 0; h < cfg_.num_heads; ++h) {
            TensorT<T> Q = add(matmul(E, params_.at(head_name(h, "Wq"))),
                               params_.at(head_name(h, "bq")));
            TensorT<T> K = add(matmul(E, params_.at(head_name(h, "Wk"))),
                               params_.at(head_name(h, "bk")));
            TensorT<T> A = matmul(Q, transpose(K));          // (B, N, N)
            A = masked_fill(A, inv_cols, T(0));
            TensorT<T> W = slice(params_.at(head_name(h, "mix")), 0, 0, N);  // (N, 1)
            TensorT<T> logits = mul_scalar(matmul(A, W), scale);             // (B, N, 1)
            per_head.push_back(reshape(logits, {B, std::size_t(1), N}));
        }
        return concat(per_head, 1);                           // (B, H, N)
    }

    struct Selections {
        TensorT<T> soft, hard;
    };

    // Gumbel-Sigmoid relaxation over (B, H, N) logits. Padding is forced to
    // zero in both outputs.
    Selections gumbel_sigmoid(const TensorT<T>& logits, const TensorT<T>& mask, RunMode mode,
                              T tau, Rng::Stream* gumbel) const {
        const std::size_t B = logits.shape()[0], H = logits.shape()[1], N = logits.shape()[2];
        const TensorT<T> mask3 = reshape_mask3(mask, B, N);
        TensorT<T> noisy = logits;
        if (mode == RunMode::Train) {
            TensorT<T> noise = TensorT<T>::zeros({B, H, N});
            for (auto& v : noise.data()) {
                v = static_cast<T>(gumbel->gumbel() - gumbel->gumbel());
            }
            noisy = add(logits, noise);
        }
        TensorT<T> soft = mul(sigmoid(mul_scalar(noisy, T(1) / tau)), mask3);
        Selections s;
        s.soft = soft;
        // strict > 0.5: an exactly ambivalent score selects nothing
        s.hard = (mode == RunMode::Soft) ? soft : st_threshold(soft);
        return s;
    }

    static TensorT<T> reshape_mask3(const TensorT<T>& mask, std::size_t B, std::size_t N) {
        return TensorT<T>::from_vector({B, std::size_t(1), N}, mask.data());
    }

    // Encodes each head's selected sub-sequence into a concept vector.
    TensorT<T> encode_concepts(const TensorT<T>& E, const TensorT<T>& sel,
                               const TensorT<T>& mask) const {
        const std::size_t B = E.shape()[0], N = E.shape()[1], d = cfg_.model_dim;
        std::vector<TensorT<T>> per_head;
        per_head.reserve(cfg_.num_heads);
        for (std::size_t h = 0; h < cfg_.num_heads; ++h) {
            TensorT<T> s = reshape(slice(sel, 1, h, h + 1), {B, N});     // (B, N)
            TensorT<T> den = add_scalar(reshape(sum(s, 1), {B, std::size_t(1)}), T(1e-8));
            TensorT<T> pooled;  // (B, channels)
            if (cfg_.encoder == EncoderKind::Mean) {
                TensorT<T> num = sum(mul(E, reshape(s, {B, N, std::size_t(1)})), 1);
                pooled = div(num, den);
            } else {
                TensorT<T> X = transpose(mul(E, reshape(s, {B, N, std::size_t(1)})));  // (B,d,N)
                X = pad_conv(X, params_.at("enc.conv"), params_.at("enc.convb"));
                X = mul(relu(X), reshape_mask3(mask, B, N));                   // (B,C,N)
                TensorT<T> num = sum(mul(X, reshape(s, {B, std::size_t(1), N})), 2);
                pooled = div(num, den);
            }
            TensorT<T> c = tanh_op(add(matmul(pooled, params_.at("enc.W")), params_.at("enc.b")));
            per_head.push_back(reshape(c, {B, std::size_t(1), d}));
        }
        return concat(per_head, 1);                                        // (B, H, d)
    }

    // Zero-pads by one position on both ends and applies a width-3 conv.
    TensorT<T> pad_conv(const TensorT<T>& X, const TensorT<T>& kernel,
                        const TensorT<T>& bias) const {
        const std::size_t B = X.shape()[0], C = X.shape()[1];
        TensorT<T> z = TensorT<T>::zeros({B, C, 1});
        TensorT<T> padded = concat<T>({z, X, z}, 2);
        return add(conv1d(padded, kernel, 1), bias);
    }

    // Input-conditioned non-negative head weights p(X) in (B, H).
    TensorT<T> parameterize(const TensorT<T>& E, const TensorT<T>& mask) const {
        const std::size_t B = E.shape()[0], N = E.shape()[1];
        const TensorT<T> mask3 = reshape_mask3(mask, B, N);
        TensorT<T> X = transpose(E);                                        // (B, d, N)
        X = mul(relu(pad_conv(X, params_.at("pz.conv1"), params_.at("pz.conv1b"))), mask3);
        X = mul(relu(pad_conv(X, params_.at("pz.conv2"), params_.at("pz.conv2b"))), mask3);
        TensorT<T> den = add_scalar(reshape(sum(mask, 1), {B, std::size_t(1)}), T(1e-8));
        TensorT<T> pooled = div(sum(X, 2), den);                            // (B, C2)
        TensorT<T> h = relu(add(matmul(pooled, params_.at("pz.W1")), params_.at("pz.b1")));
        return softplus(add(matmul(h, params_.at("pz.W2")), params_.at("pz.b2")));
    }

    void run_side(const SequenceBatch& batch, bool side_b, const TensorT<T>& mask, RunMode mode,
                  T tau, Rng::Stream* gumbel, const ForwardHooks* hooks, TensorT<T>& sel_logits,
                  TensorT<T>& sel_soft, TensorT<T>& sel_hard, TensorT<T>& concepts,
                  TensorT<T>& head_weights, TensorT<T>& rep) const {
        const std::size_t B = batch.batch, N = batch.num_segments, H = cfg_.num_heads;
        TensorT<T> E = embed(batch, mask, side_b);
        sel_logits = selection_logits(E, mask);
        Selections sel = gumbel_sigmoid(sel_logits, mask, mode, tau, gumbel);
        if (hooks && hooks->force_all_ones_selection) {
            TensorT<T> all = mul(TensorT<T>::filled({B, H, N}, T(1)), reshape_mask3(mask, B, N));
            sel.soft = all;
            sel.hard = all;
        }
        sel_soft = sel.soft;
        sel_hard = sel.hard;
        concepts = encode_concepts(E, sel.hard, mask);
        TensorT<T> p = (hooks && hooks->force_unit_weights)
                           ? TensorT<T>::filled({B, H}, T(1))
                           : parameterize(E, mask);
        if (hooks && !hooks->delete_heads.empty()) {
            TensorT<T> keep = TensorT<T>::filled({H}, T(1));
            for (std::size_t h : hooks->delete_heads) {
                if (h >= H) throw std::invalid_argument("delete_heads: head index out of range");
                keep.data()[h] = T(0);
            }
            p = mul(p, keep);
        }
        head_weights = p;
        rep = aggregate(concepts, p);
    }
};

using SesmModel = SesmModelT<float>;

} // namespace sesm
