#include "sesm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sesm/errors.hpp"

namespace sesm {

namespace {

std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& indices,
                                            std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < indices.size(); i += batch_size) {
        out.emplace_back(indices.begin() + i,
                         indices.begin() + std::min(indices.size(), i + batch_size));
    }
    return out;
}

std::int32_t argmax_row(const std::vector<float>& data, std::size_t row, std::size_t width) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < width; ++c) {
        if (data[row * width + c] > data[row * width + best]) best = c;
    }
    return static_cast<std::int32_t>(best);
}

// Expands hard segment selections of one item into raw positions.
std::vector<std::uint8_t> expand_selection(const std::vector<float>& hard, std::size_t row,
                                           std::size_t H, std::size_t N, std::size_t len,
                                           bool token_mode, std::size_t kernel,
                                           std::size_t stride, std::size_t raw_len) {
    std::vector<std::uint8_t> out(raw_len, 0);
    for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t n = 0; n < N && n < len; ++n) {
            if (hard[(row * H + h) * N + n] <= 0.5f) continue;
            if (token_mode) {
                if (n < raw_len) out[n] = 1;
            } else {
                const std::size_t begin = n * stride;
                const std::size_t end = std::min(raw_len, begin + kernel);
                for (std::size_t p = begin; p < end; ++p) out[p] = 1;
            }
        }
    }
    return out;
}

} // namespace

ClassificationMetrics classification_metrics(const std::vector<std::int32_t>& predictions,
                                             const std::vector<std::int32_t>& labels,
                                             std::size_t num_classes) {
    if (predictions.size() != labels.size()) {
        throw std::invalid_argument("metrics: predictions/labels size mismatch");
    }
    ClassificationMetrics m;
    m.count = labels.size();
    m.confusion.assign(num_classes * num_classes, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        const auto p = static_cast<std::size_t>(predictions[i]);
        if (y >= num_classes || p >= num_classes) {
            throw std::invalid_argument("metrics: class index out of range");
        }
        ++m.confusion[y * num_classes + p];
        if (y == p) ++correct;
    }
    m.accuracy = m.count ? static_cast<double>(correct) / static_cast<double>(m.count) : 0.0;

    // macro averages over *all* classes: a class with no predicted positives
    // contributes precision 0, one with no true members contributes recall 0
    double psum = 0, rsum = 0, fsum = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        std::size_t tp = m.confusion[c * num_classes + c], fp = 0, fn = 0;
        for (std::size_t o = 0; o < num_classes; ++o) {
            if (o != c) {
                fp += m.confusion[o * num_classes + c];
                fn += m.confusion[c * num_classes + o];
            }
        }
        const double prec = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
        const double rec = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
        const double f1 = (prec + rec > 0) ? 2 * prec * rec / (prec + rec) : 0.0;
        psum += prec;
        rsum += rec;
        fsum += f1;
    }
    m.macro_precision = psum / static_cast<double>(num_classes);
    m.macro_recall = rsum / static_cast<double>(num_classes);
    m.macro_f1 = fsum / static_cast<double>(num_classes);
    return m;
}

std::vector<std::int32_t> predict(const SesmModel& model, const Dataset& ds,
                                  const std::vector<std::size_t>& indices,
                                  std::size_t batch_size) {
    const auto& cfg = model.config();
    std::vector<std::int32_t> preds;
    preds.reserve(indices.size());
    for (const auto& group : chunk(indices, batch_size)) {
        SequenceBatch b = make_batch(ds, group, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        for (std::size_t i = 0; i < group.size(); ++i) {
            preds.push_back(argmax_row(r.probs.data(), i, cfg.num_classes));
        }
    }
    return preds;
}

AopcResult compute_aopc(const SesmModel& model, const Dataset& ds,
                        const std::vector<std::size_t>& indices) {
    const auto& cfg = model.config();
    const std::size_t H = cfg.num_heads;
    if (H < 2) {
        throw UsageError("prototype-deletion faithfulness needs at least 2 heads");
    }
    AopcResult out;
    for (std::size_t idx : indices) {
        SequenceBatch b = make_batch(ds, {idx}, cfg.segment_kernel, cfg.segment_stride);
        auto full = model.forward(b, RunMode::Eval, 1.0f);
        const auto pred =
            static_cast<std::size_t>(argmax_row(full.probs.data(), 0, cfg.num_classes));
        const float p_full = full.probs.data()[pred];

        const std::size_t d = cfg.model_dim;
        std::vector<double> relevance(H, 0.0);
        for (std::size_t h = 0; h < H; ++h) {
            double norm = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const double c = full.concepts.data()[h * d + j];
                norm += c * c;
            }
            relevance[h] = full.head_weights.data()[h] * std::sqrt(norm);
            if (full.rep_b.valid()) {
                double norm_b = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double c = full.concepts_b.data()[h * d + j];
                    norm_b += c * c;
                }
                relevance[h] += full.head_weights_b.data()[h] * std::sqrt(norm_b);
            }
        }
        std::vector<std::size_t> order(H);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t c) { return relevance[a] > relevance[c]; });

        double acc = 0;
        ForwardHooks hooks;
        for (std::size_t k = 1; k < H; ++k) {
            hooks.delete_heads.assign(order.begin(), order.begin() + k);
            auto deleted = model.forward(b, RunMode::Eval, 1.0f, nullptr, &hooks);
            acc += static_cast<double>(p_full) - static_cast<double>(deleted.probs.data()[pred]);
        }
        out.per_input.push_back(acc / static_cast<double>(H - 1));
    }
    double sum = 0;
    for (double v : out.per_input) sum += v;
    out.mean = out.per_input.empty() ? 0.0 : sum / static_cast<double>(out.per_input.size());
    return out;
}

SelectionQuality selection_quality(const SesmModel& model, const Dataset& ds,
                                   const std::vector<std::size_t>& indices,
                                   std::size_t batch_size) {
    const auto& cfg = model.config();
    std::size_t tp = 0, fp = 0, fn = 0, items = 0;
    for (const auto& group : chunk(indices, batch_size)) {
        SequenceBatch b = make_batch(ds, group, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        const std::size_t N = b.num_segments;
        for (std::size_t i = 0; i < group.size(); ++i) {
            const Sequence& item = ds.items[group[i]];
            if (item.truth.empty()) continue;
            ++items;
            const std::size_t raw_len =
                ds.token_mode ? item.tokens.size() : item.signal.size();
            const auto sel = expand_selection(r.sel_hard.data(), i, cfg.num_heads, N,
                                              b.lengths[i], ds.token_mode, cfg.segment_kernel,
                                              cfg.segment_stride, raw_len);
            for (std::size_t p = 0; p < raw_len; ++p) {
                const bool s = sel[p] != 0;
                const bool t = p < item.truth.size() && item.truth[p] != 0;
                if (s && t) ++tp;
                if (s && !t) ++fp;
                if (!s && t) ++fn;
            }
        }
    }
    SelectionQuality q;
    q.items = items;
    q.precision = (tp + fp) ? static_cast<double>(tp) / (tp + fp) : 0.0;
    q.recall = (tp + fn) ? static_cast<double>(tp) / (tp + fn) : 0.0;
    q.f1 = (q.precision + q.recall > 0)
               ? 2 * q.precision * q.recall / (q.precision + q.recall)
               : 0.0;
    return q;
}

double mean_selection_fraction(const SesmModel& model, const Dataset& ds,
                               const std::vector<std::size_t>& indices,
                               std::size_t batch_size) {
    const auto& cfg = model.config();
    double sum = 0;
    std::size_t terms = 0;
    for (const auto& group : chunk(indices, batch_size)) {
        SequenceBatch b = make_batch(ds, group, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        const std::size_t N = b.num_segments, H = cfg.num_heads;
        for (std::size_t i = 0; i < group.size(); ++i) {
            for (std::size_t h = 0; h < H; ++h) {
                double mass = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    mass += r.sel_hard.data()[(i * H + h) * N + n];
                }
                sum += mass / static_cast<double>(b.lengths[i]);
                ++terms;
            }
        }
    }
    return terms ? sum / static_cast<double>(terms) : 0.0;
}

double mean_pairwise_overlap(const SesmModel& model, const Dataset& ds,
                             const std::vector<std::size_t>& indices,
                             std::size_t batch_size) {
    const auto& cfg = model.config();
    const std::size_t H = cfg.num_heads;
    if (H < 2) return 0.0;
    double sum = 0;
    std::size_t terms = 0;
    for (const auto& group : chunk(indices, batch_size)) {
        SequenceBatch b = make_batch(ds, group, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        const std::size_t N = b.num_segments;
        for (std::size_t i = 0; i < group.size(); ++i) {
            for (std::size_t h1 = 0; h1 < H; ++h1) {
                for (std::size_t h2 = h1 + 1; h2 < H; ++h2) {
                    std::size_t inter = 0, uni = 0;
                    for (std::size_t n = 0; n < N; ++n) {
                        const bool a = r.sel_hard.data()[(i * H + h1) * N + n] > 0.5f;
                        const bool c = r.sel_hard.data()[(i * H + h2) * N + n] > 0.5f;
                        if (a && c) ++inter;
                        if (a || c) ++uni;
                    }
                    sum += uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
                    ++terms;
                }
            }
        }
    }
    return terms ? sum / static_cast<double>(terms) : 0.0;
}

HeadStatistics head_statistics(const SesmModel& model, const Dataset& ds,
                               const std::vector<std::size_t>& indices,
                               std::size_t batch_size) {
    const auto& cfg = model.config();
    const std::size_t H = cfg.num_heads, C = cfg.num_classes, d = cfg.model_dim;
    HeadStatistics stats;
    stats.mean_weight.assign(H, 0.0);
    stats.mean_selection_fraction.assign(H, 0.0);
    stats.standalone_votes.assign(H, std::vector<std::size_t>(C, 0));
    std::size_t total = 0;
    for (const auto& group : chunk(indices, batch_size)) {
        SequenceBatch b = make_batch(ds, group, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        const std::size_t N = b.num_segments;
        for (std::size_t h = 0; h < H; ++h) {
            TensorT<float> ch = reshape(slice(r.concepts, 1, h, h + 1), {group.size(), d});
            TensorT<float> votes = model.classify_concept(ch);
            for (std::size_t i = 0; i < group.size(); ++i) {
                stats.mean_weight[h] += r.head_weights.data()[i * H + h];
                double mass = 0;
                for (std::size_t n = 0; n < N; ++n) {
                    mass += r.sel_hard.data()[(i * H + h) * N + n];
                }
                stats.mean_selection_fraction[h] += mass / static_cast<double>(b.lengths[i]);
                ++stats.standalone_votes[h][static_cast<std::size_t>(
                    argmax_row(votes.data(), i, C))];
            }
        }
        total += group.size();
    }
    if (total > 0) {
        for (std::size_t h = 0; h < H; ++h) {
            stats.mean_weight[h] /= static_cast<double>(total);
            stats.mean_selection_fraction[h] /= static_cast<double>(total);
        }
    }
    return stats;
}

} // namespace sesm
