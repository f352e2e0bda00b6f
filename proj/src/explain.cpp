#include "sesm/explain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sesm/errors.hpp"

namespace sesm {

namespace {

using nlohmann::json;

std::int32_t argmax_row(const std::vector<float>& data, std::size_t row, std::size_t width) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < width; ++c) {
        if (data[row * width + c] > data[row * width + best]) best = c;
    }
    return static_cast<std::int32_t>(best);
}

// Selected segment indices plus merged raw spans for one (item, head) row.
void selected_spans(const std::vector<float>& hard, std::size_t row, std::size_t H,
                    std::size_t h, std::size_t N, std::size_t length, bool token_mode,
                    std::size_t kernel, std::size_t stride, std::size_t raw_len,
                    std::vector<std::size_t>& segments,
                    std::vector<std::pair<std::size_t, std::size_t>>& spans) {
    segments.clear();
    spans.clear();
    for (std::size_t n = 0; n < std::min(N, length); ++n) {
        if (hard[(row * H + h) * N + n] > 0.5f) segments.push_back(n);
    }
    for (std::size_t n : segments) {
        const std::size_t begin = token_mode ? n : n * stride;
        const std::size_t end = token_mode ? n + 1 : std::min(raw_len, n * stride + kernel);
        if (begin >= end) continue;
        if (!spans.empty() && begin <= spans.back().second) {
            spans.back().second = std::max(spans.back().second, end);
        } else {
            spans.emplace_back(begin, end);
        }
    }
}

double vec_norm(const float* v, std::size_t d) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(v[j]) * v[j];
    return std::sqrt(s);
}

// Fills per-head entries for one side of a forward result.
std::vector<HeadExplanation> side_heads(const SesmModel& model, const ForwardResultT<float>& r,
                                        bool side_b, const SequenceBatch& batch,
                                        const Dataset& ds, std::size_t raw_len,
                                        std::int32_t predicted) {
    const auto& cfg = model.config();
    const std::size_t H = cfg.num_heads, d = cfg.model_dim, N = batch.num_segments;
    const auto& concepts = side_b ? r.concepts_b.data() : r.concepts.data();
    const auto& weights = side_b ? r.head_weights_b.data() : r.head_weights.data();
    const auto& hard = side_b ? r.sel_hard_b.data() : r.sel_hard.data();
    const std::size_t length = side_b ? batch.lengths_b[0] : batch.lengths[0];

    // what each concept predicts in isolation
    TensorT<float> votes;
    if (!cfg.pair_mode) {
        TensorT<float> all = TensorT<float>::from_vector({H, d}, concepts);
        votes = softmax(model.classify(all), -1);
    } else {
        TensorT<float> a = TensorT<float>::from_vector({H, d}, r.concepts.data());
        TensorT<float> b = TensorT<float>::from_vector({H, d}, r.concepts_b.data());
        votes = softmax(model.classify_pair(a, b), -1);
    }

    std::vector<HeadExplanation> out(H);
    for (std::size_t h = 0; h < H; ++h) {
        HeadExplanation& e = out[h];
        e.head = h;
        e.weight = weights[h];
        e.concept_vec.assign(concepts.begin() + h * d, concepts.begin() + (h + 1) * d);
        e.concept_norm = vec_norm(concepts.data() + h * d, d);
        e.relevance = e.weight * e.concept_norm;
        selected_spans(hard, 0, H, h, N, length, ds.token_mode, cfg.segment_kernel,
                       cfg.segment_stride, raw_len, e.segments, e.spans);
        e.standalone_class = argmax_row(votes.data(), h, cfg.num_classes);
        e.standalone_prob = votes.data()[h * cfg.num_classes + e.standalone_class];
        e.supporting = e.standalone_class == predicted;
    }
    return out;
}

} // namespace

Explanation explain_input(const SesmModel& model, const Dataset& ds, std::size_t index) {
    if (index >= ds.items.size()) {
        throw UsageError("explain: index " + std::to_string(index) + " out of range (" +
                         std::to_string(ds.items.size()) + " items)");
    }
    const auto& cfg = model.config();
    SequenceBatch batch = make_batch(ds, {index}, cfg.segment_kernel, cfg.segment_stride);
    auto r = model.forward(batch, RunMode::Eval, 1.0f);

    const Sequence& item = ds.items[index];
    Explanation expl;
    expl.input_id = item.id;
    expl.label = item.label;
    expl.predicted = argmax_row(r.probs.data(), 0, cfg.num_classes);
    expl.logits.assign(r.logits.data().begin(), r.logits.data().end());
    expl.probs.assign(r.probs.data().begin(), r.probs.data().end());

    const std::size_t raw_len = ds.token_mode ? item.tokens.size() : item.signal.size();
    expl.heads = side_heads(model, r, false, batch, ds, raw_len, expl.predicted);
    if (cfg.pair_mode) {
        const std::size_t raw_len_b =
            ds.token_mode ? item.tokens_b.size() : item.signal_b.size();
        expl.heads_b = side_heads(model, r, true, batch, ds, raw_len_b, expl.predicted);
    }
    return expl;
}

std::vector<double> recompose_logits(const SesmModel& model, const Explanation& expl) {
    const auto& cfg = model.config();
    const std::size_t H = cfg.num_heads, d = cfg.model_dim;
    auto gather = [&](const std::vector<HeadExplanation>& heads) {
        std::vector<float> cdata(H * d), wdata(H);
        for (std::size_t h = 0; h < H; ++h) {
            std::copy(heads[h].concept_vec.begin(), heads[h].concept_vec.end(),
                      cdata.begin() + h * d);
            wdata[h] = static_cast<float>(heads[h].weight);
        }
        TensorT<float> c = TensorT<float>::from_vector({1, H, d}, std::move(cdata));
        TensorT<float> w = TensorT<float>::from_vector({1, H}, std::move(wdata));
        return weighted_head_sum(c, w);
    };
    TensorT<float> logits;
    if (!cfg.pair_mode) {
        logits = model.classify(gather(expl.heads));
    } else {
        logits = model.classify_pair(gather(expl.heads), gather(expl.heads_b));
    }
    return {logits.data().begin(), logits.data().end()};
}

namespace {

std::string spans_str(const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
    std::ostringstream os;
    for (std::size_t i = 0; i < spans.size(); ++i) {
        if (i) os << " ";
        os << "[" << spans[i].first << "," << spans[i].second << ")";
    }
    return spans.empty() ? "-" : os.str();
}

void render_side(std::ostringstream& os, const std::vector<HeadExplanation>& heads,
                 const Dataset& ds, const std::vector<std::int32_t>* tokens) {
    for (const auto& e : heads) {
        os << "  head " << e.head << ": weight=" << e.weight
           << " relevance=" << e.relevance << " standalone=class " << e.standalone_class
           << " (p=" << e.standalone_prob << (e.supporting ? ", supporting" : ", opposing")
           << ") spans " << spans_str(e.spans);
        if (tokens && !e.spans.empty() && !ds.vocab.empty()) {
            os << "  \"";
            bool first = true;
            for (const auto& [b, eend] : e.spans) {
                for (std::size_t p = b; p < eend && p < tokens->size(); ++p) {
                    if (!first) os << " ";
                    const auto id = static_cast<std::size_t>((*tokens)[p]);
                    os << (id < ds.vocab.size() ? ds.vocab[id] : "?");
                    first = false;
                }
            }
            os << "\"";
        }
        os << "\n";
    }
}

} // namespace

std::string render_text(const Explanation& expl, const Dataset& ds) {
    std::ostringstream os;
    os.precision(4);
    os << "input " << expl.input_id << ": label=" << expl.label
       << " predicted=" << expl.predicted << " probs=[";
    for (std::size_t i = 0; i < expl.probs.size(); ++i) {
        if (i) os << " ";
        os << expl.probs[i];
    }
    os << "]\n";
    const Sequence& item = ds.items[expl.input_id];
    render_side(os, expl.heads, ds, ds.token_mode ? &item.tokens : nullptr);
    if (!expl.heads_b.empty()) {
        os << "  second sequence:\n";
        render_side(os, expl.heads_b, ds, ds.token_mode ? &item.tokens_b : nullptr);
    }
    return os.str();
}

namespace {

json head_json(const HeadExplanation& e) {
    json j;
    j["head"] = e.head;
    j["weight"] = e.weight;
    j["concept_norm"] = e.concept_norm;
    j["relevance"] = e.relevance;
    j["segments"] = e.segments;
    json spans = json::array();
    for (const auto& [b, eend] : e.spans) spans.push_back({b, eend});
    j["spans"] = spans;
    j["concept"] = e.concept_vec;
    j["standalone_class"] = e.standalone_class;
    j["standalone_prob"] = e.standalone_prob;
    j["supporting"] = e.supporting;
    return j;
}

} // namespace

json render_json(const Explanation& expl) {
    json j;
    j["input_id"] = expl.input_id;
    j["label"] = expl.label;
    j["predicted"] = expl.predicted;
    j["logits"] = expl.logits;
    j["probs"] = expl.probs;
    j["heads"] = json::array();
    for (const auto& e : expl.heads) j["heads"].push_back(head_json(e));
    if (!expl.heads_b.empty()) {
        j["heads_b"] = json::array();
        for (const auto& e : expl.heads_b) j["heads_b"].push_back(head_json(e));
    }
    return j;
}

std::string render_plot_csv(const Explanation& expl, const Dataset& ds) {
    const Sequence& item = ds.items[expl.input_id];
    const std::size_t raw_len = ds.token_mode ? item.tokens.size() : item.signal.size();
    std::ostringstream os;
    os << "position,value,head_id,selected\n";
    for (const auto& e : expl.heads) {
        std::vector<std::uint8_t> sel(raw_len, 0);
        for (const auto& [b, eend] : e.spans) {
            for (std::size_t p = b; p < eend && p < raw_len; ++p) sel[p] = 1;
        }
        for (std::size_t p = 0; p < raw_len; ++p) {
            const double value =
                ds.token_mode ? static_cast<double>(item.tokens[p]) : item.signal[p];
            os << p << "," << value << "," << e.head << "," << int(sel[p]) << "\n";
        }
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// prototype catalog
// ---------------------------------------------------------------------------

PrototypeCatalog build_prototype_catalog(const SesmModel& model, const Dataset& ds,
                                         const std::vector<std::size_t>& indices,
                                         std::size_t top_k, std::size_t batch_size) {
    const auto& cfg = model.config();
    const std::size_t H = cfg.num_heads, d = cfg.model_dim;

    struct Row {
        std::size_t input_id;
        std::int32_t label;
        double weight;
        std::vector<float> proto_vec;
        std::vector<std::pair<std::size_t, std::size_t>> spans;
    };
    std::vector<std::vector<Row>> rows(H);

    for (std::size_t begin = 0; begin < indices.size(); begin += batch_size) {
        const std::size_t end = std::min(indices.size(), begin + batch_size);
        const std::vector<std::size_t> group(indices.begin() + begin, indices.begin() + end);
        SequenceBatch b = make_batch(ds, group, cfg.segment_kernel, cfg.segment_stride);
        auto r = model.forward(b, RunMode::Eval, 1.0f);
        const std::size_t N = b.num_segments;
        for (std::size_t i = 0; i < group.size(); ++i) {
            const Sequence& item = ds.items[group[i]];
            const std::size_t raw_len = ds.token_mode ? item.tokens.size() : item.signal.size();
            for (std::size_t h = 0; h < H; ++h) {
                Row row;
                row.input_id = item.id;
                row.label = item.label;
                row.weight = r.head_weights.data()[i * H + h];
                row.proto_vec.assign(r.concepts.data().begin() + (i * H + h) * d,
                                   r.concepts.data().begin() + (i * H + h + 1) * d);
                std::vector<std::size_t> segs;
                selected_spans(r.sel_hard.data(), i, H, h, N, b.lengths[i], ds.token_mode,
                               cfg.segment_kernel, cfg.segment_stride, raw_len, segs, row.spans);
                rows[h].push_back(std::move(row));
            }
        }
    }

    PrototypeCatalog catalog;
    catalog.per_head.resize(H);
    catalog.mean_concept.assign(H, std::vector<float>(d, 0.0f));
    for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> mean(d, 0.0);
        for (const Row& row : rows[h]) {
            for (std::size_t j = 0; j < d; ++j) mean[j] += row.proto_vec[j];
        }
        if (!rows[h].empty()) {
            for (std::size_t j = 0; j < d; ++j) {
                mean[j] /= static_cast<double>(rows[h].size());
                catalog.mean_concept[h][j] = static_cast<float>(mean[j]);
            }
        }
        const double mean_norm = vec_norm(catalog.mean_concept[h].data(), d);

        std::vector<PrototypeEntry> entries;
        entries.reserve(rows[h].size());
        for (const Row& row : rows[h]) {
            PrototypeEntry e;
            e.input_id = row.input_id;
            e.label = row.label;
            e.activation = row.weight * vec_norm(row.proto_vec.data(), d);
            double dot = 0, n = vec_norm(row.proto_vec.data(), d);
            for (std::size_t j = 0; j < d; ++j) dot += row.proto_vec[j] * mean[j];
            e.consistency = (n > 0 && mean_norm > 0) ? dot / (n * mean_norm) : 0.0;
            e.spans = row.spans;
            entries.push_back(std::move(e));
        }
        std::sort(entries.begin(), entries.end(), [](const PrototypeEntry& a,
                                                     const PrototypeEntry& b) {
            if (a.activation != b.activation) return a.activation > b.activation;
            return a.input_id < b.input_id;
        });
        if (entries.size() > top_k) entries.resize(top_k);
        catalog.per_head[h] = std::move(entries);
    }
    return catalog;
}

json catalog_json(const PrototypeCatalog& catalog) {
    json j;
    j["heads"] = json::array();
    for (std::size_t h = 0; h < catalog.per_head.size(); ++h) {
        json hj;
        hj["head"] = h;
        hj["mean_concept"] = catalog.mean_concept[h];
        hj["prototypes"] = json::array();
        for (const auto& e : catalog.per_head[h]) {
            json ej;
            ej["input_id"] = e.input_id;
            ej["label"] = e.label;
            ej["activation"] = e.activation;
            ej["consistency"] = e.consistency;
            json spans = json::array();
            for (const auto& [b, eend] : e.spans) spans.push_back({b, eend});
            ej["spans"] = spans;
            hj["prototypes"].push_back(ej);
        }
        j["heads"].push_back(hj);
    }
    return j;
}

std::string catalog_text(const PrototypeCatalog& catalog) {
    std::ostringstream os;
    os.precision(4);
    for (std::size_t h = 0; h < catalog.per_head.size(); ++h) {
        os << "head " << h << ":\n";
        for (const auto& e : catalog.per_head[h]) {
            os << "  input " << e.input_id << " (label " << e.label
               << "): activation=" << e.activation << " consistency=" << e.consistency
               << " spans " << spans_str(e.spans) << "\n";
        }
    }
    return os.str();
}

} // namespace sesm
