#include "sesm/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "sesm/errors.hpp"

namespace sesm {

namespace {

using nlohmann::json;

std::size_t uniform_int(Rng::Stream& s, std::size_t lo, std::size_t hi) {
    return lo + s.index(hi - lo + 1);
}

// Class label sequence honouring the requested imbalance, shuffled.
std::vector<std::int32_t> make_labels(const DatasetSpec& spec, std::size_t num_classes,
                                      Rng::Stream& stream) {
    std::vector<std::size_t> counts(num_classes, 0);
    if (spec.class_imbalance > 0) {
        if (num_classes != 2) {
            throw UsageError("class_imbalance is only supported for 2 classes");
        }
        const double r = spec.class_imbalance;
        counts[1] = static_cast<std::size_t>(
            std::max(1.0, std::round(spec.num_sequences / (1.0 + r))));
        counts[0] = spec.num_sequences - counts[1];
    } else {
        for (std::size_t c = 0; c < num_classes; ++c) {
            counts[c] = spec.num_sequences / num_classes;
        }
        for (std::size_t i = 0; i < spec.num_sequences % num_classes; ++i) ++counts[i];
    }
    std::vector<std::int32_t> labels;
    labels.reserve(spec.num_sequences);
    for (std::size_t c = 0; c < num_classes; ++c) {
        labels.insert(labels.end(), counts[c], static_cast<std::int32_t>(c));
    }
    stream.shuffle(labels);
    return labels;
}

// Positions for `count` non-overlapping placements of length `mlen`.
std::vector<std::size_t> place_motifs(Rng::Stream& s, std::size_t len, std::size_t mlen,
                                      std::size_t count) {
    std::vector<std::size_t> pos;
    for (std::size_t k = 0; k < count && mlen <= len; ++k) {
        for (int attempt = 0; attempt < 20; ++attempt) {
            const std::size_t p = s.index(len - mlen + 1);
            bool clash = false;
            for (std::size_t q : pos) {
                if (p < q + mlen && q < p + mlen) clash = true;
            }
            if (!clash) {
                pos.push_back(p);
                break;
            }
        }
    }
    return pos;
}

std::string lowercase(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::istringstream in(lowercase(text));
    std::vector<std::string> out;
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::uint64_t hash_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::uint64_t h = 1469598103934665603ULL;
    char buf[65536];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ULL;
        }
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

} // namespace

// ---------------------------------------------------------------------------
// generators
// ---------------------------------------------------------------------------

Dataset gen_motif_real(const DatasetSpec& spec) {
    if (spec.pair_mode) throw UsageError("pair mode requires token data");
    if (spec.min_len > spec.max_len || spec.min_len == 0) {
        throw UsageError("invalid length range for generated data");
    }
    Rng rng(spec.seed);
    auto labels_s = rng.stream("labels");
    auto shape_s = rng.stream("shape");
    auto noise_s = rng.stream("noise");

    Dataset ds;
    ds.num_classes = spec.num_classes;
    ds.token_mode = false;

    const auto labels = make_labels(spec, spec.num_classes, labels_s);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::int32_t c = labels[i];
        Sequence item;
        item.id = i;
        item.label = c;
        const std::size_t len = uniform_int(shape_s, spec.min_len, spec.max_len);
        item.signal.resize(len);
        item.truth.assign(len, 0);
        for (auto& v : item.signal) {
            v = static_cast<float>(noise_s.normal(0.0, spec.noise_std));
        }
        const std::size_t mlen = std::min(uniform_int(shape_s, 20, 30), len);
        const std::size_t count = 1 + shape_s.index(2);
        // class identity: frequency grows with c, sign alternates
        const double freq = 1.0 + 0.5 * c;
        const double sign = (c % 2 == 0) ? 1.0 : -1.0;
        for (std::size_t p : place_motifs(shape_s, len, mlen, count)) {
            for (std::size_t k = 0; k < mlen; ++k) {
                item.signal[p + k] +=
                    static_cast<float>(sign * std::sin(3.141592653589793 * freq * k / 4.0));
                item.truth[p + k] = 1;
            }
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

namespace {

std::vector<std::string> motif_vocab(std::size_t families, std::size_t fillers) {
    std::vector<std::string> v = {"<pad>", "<unk>"};
    for (std::size_t c = 0; c < families; ++c) {
        v.push_back("m" + std::to_string(c) + "a");
        v.push_back("m" + std::to_string(c) + "b");
    }
    for (std::size_t i = 0; i < fillers; ++i) v.push_back("w" + std::to_string(i));
    return v;
}

// Fills `tokens` with filler ids and plants the bigram of family `fam`
// `count` times; marks truth when provided.
void fill_tokens(Rng::Stream& s, std::vector<std::int32_t>& tokens,
                 std::vector<std::uint8_t>* truth, std::size_t families, std::size_t fillers,
                 std::optional<std::size_t> fam, std::size_t count) {
    const std::int32_t filler_base = static_cast<std::int32_t>(2 + 2 * families);
    for (auto& t : tokens) {
        t = filler_base + static_cast<std::int32_t>(s.index(fillers));
    }
    if (!fam) return;
    for (std::size_t p : place_motifs(s, tokens.size(), 2, count)) {
        tokens[p] = static_cast<std::int32_t>(2 + 2 * *fam);
        tokens[p + 1] = static_cast<std::int32_t>(3 + 2 * *fam);
        if (truth) {
            (*truth)[p] = 1;
            (*truth)[p + 1] = 1;
        }
    }
}

} // namespace

Dataset gen_motif_token(const DatasetSpec& spec) {
    if (spec.min_len > spec.max_len || spec.min_len < 4) {
        throw UsageError("invalid length range for generated token data");
    }
    Rng rng(spec.seed);
    auto labels_s = rng.stream("labels");
    auto shape_s = rng.stream("shape");

    const std::size_t fillers = 50;
    const std::size_t families = spec.pair_mode ? 2 : spec.num_classes;
    const std::size_t num_classes = spec.pair_mode ? 3 : spec.num_classes;

    Dataset ds;
    ds.num_classes = num_classes;
    ds.token_mode = true;
    ds.pair_mode = spec.pair_mode;
    ds.vocab = motif_vocab(families, fillers);

    DatasetSpec label_spec = spec;
    const auto labels = make_labels(label_spec, num_classes, labels_s);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::int32_t y = labels[i];
        Sequence item;
        item.id = i;
        item.label = y;
        const std::size_t len = uniform_int(shape_s, spec.min_len, spec.max_len);
        item.tokens.resize(len);
        item.truth.assign(len, 0);
        const std::size_t count = 1 + shape_s.index(2);
        if (!spec.pair_mode) {
            fill_tokens(shape_s, item.tokens, &item.truth, families, fillers,
                        static_cast<std::size_t>(y), count);
        } else {
            // label 0: unrelated, 1: conflicting motifs, 2: shared motif
            const std::size_t fam = shape_s.index(families);
            fill_tokens(shape_s, item.tokens, &item.truth, families, fillers, fam, count);
            const std::size_t len_b = uniform_int(shape_s, spec.min_len, spec.max_len);
            item.tokens_b.resize(len_b);
            std::optional<std::size_t> fam_b;
            if (y == 2) fam_b = fam;
            if (y == 1) fam_b = (fam + 1) % families;
            fill_tokens(shape_s, item.tokens_b, nullptr, families, fillers, fam_b,
                        1 + shape_s.index(2));
        }
        ds.items.push_back(std::move(item));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// external loaders
// ---------------------------------------------------------------------------

Dataset load_csv_real(const std::string& path, std::size_t min_len, std::size_t max_len) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    Dataset ds;
    ds.token_mode = false;
    std::string line;
    std::size_t line_no = 0, rejected = 0;
    std::int32_t max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) fields.push_back(trim(f));
        if (line.back() == ',') fields.push_back("");

        std::vector<float> values;
        values.reserve(fields.size());
        bool numeric = true;
        for (const auto& s : fields) {
            try {
                std::size_t used = 0;
                values.push_back(std::stof(s, &used));
                if (used != s.size()) numeric = false;
            } catch (const std::exception&) {
                numeric = false;
            }
            if (!numeric) break;
        }
        if (!numeric) {
            if (line_no == 1) continue;  // header row
            throw DataError(path + ":" + std::to_string(line_no) + ": non-numeric field");
        }
        if (values.size() < 2) {
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": need at least one signal column plus a label");
        }
        const float raw_label = values.back();
        values.pop_back();
        const auto label = static_cast<std::int32_t>(std::lround(raw_label));
        if (label < 0 || std::abs(raw_label - label) > 1e-6) {
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": label must be a non-negative integer");
        }
        if (values.size() < min_len) {
            ++rejected;
            std::cerr << "[data] " << path << ":" << line_no << ": row with "
                      << values.size() << " samples is shorter than min_len=" << min_len
                      << ", skipped\n";
            continue;
        }
        Sequence item;
        item.id = ds.items.size();
        item.label = label;
        if (values.size() > max_len) {
            values.resize(max_len);
            item.clipped = true;
        }
        item.signal = std::move(values);
        max_label = std::max(max_label, label);
        ds.items.push_back(std::move(item));
    }
    if (ds.items.empty()) throw DataError(path + ": no usable rows");
    ds.num_classes = static_cast<std::size_t>(max_label) + 1;
    if (rejected > 0) {
        std::cerr << "[data] " << path << ": rejected " << rejected << " short row(s)\n";
    }
    return ds;
}

TextCorpus load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    TextCorpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (!j.contains("label") || !j["label"].is_number_integer()) {
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": missing integer \"label\"");
        }
        const std::int32_t label = j["label"].get<std::int32_t>();
        if (label < 0) {
            throw DataError(path + ":" + std::to_string(line_no) + ": negative label");
        }
        const bool pair = j.contains("text_a");
        if (corpus.labels.empty()) corpus.pair_mode = pair;
        if (pair != corpus.pair_mode) {
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": mixed single/pair records");
        }
        if (pair) {
            if (!j.contains("text_b")) {
                throw DataError(path + ":" + std::to_string(line_no) + ": missing text_b");
            }
            corpus.texts.push_back(j["text_a"].get<std::string>());
            corpus.texts_b.push_back(j["text_b"].get<std::string>());
        } else {
            if (!j.contains("text")) {
                throw DataError(path + ":" + std::to_string(line_no) + ": missing text");
            }
            corpus.texts.push_back(j["text"].get<std::string>());
        }
        corpus.labels.push_back(label);
    }
    if (corpus.labels.empty()) throw DataError(path + ": no records");
    return corpus;
}

Dataset tokenize_corpus(const TextCorpus& corpus, const std::vector<std::size_t>& train_idx,
                        std::size_t max_len) {
    std::vector<std::vector<std::string>> toks(corpus.texts.size());
    std::vector<std::vector<std::string>> toks_b(corpus.texts_b.size());
    for (std::size_t i = 0; i < corpus.texts.size(); ++i) {
        toks[i] = whitespace_tokens(corpus.texts[i]);
    }
    for (std::size_t i = 0; i < corpus.texts_b.size(); ++i) {
        toks_b[i] = whitespace_tokens(corpus.texts_b[i]);
    }
    std::map<std::string, std::size_t> freq;
    for (std::size_t i : train_idx) {
        for (const auto& t : toks[i]) ++freq[t];
        if (corpus.pair_mode) {
            for (const auto& t : toks_b[i]) ++freq[t];
        }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Dataset ds;
    ds.token_mode = true;
    ds.pair_mode = corpus.pair_mode;
    ds.vocab = {"<pad>", "<unk>"};
    std::map<std::string, std::int32_t> ids;
    for (const auto& [tok, n] : ranked) {
        ids[tok] = static_cast<std::int32_t>(ds.vocab.size());
        ds.vocab.push_back(tok);
    }
    auto encode = [&](const std::vector<std::string>& ts, bool& clipped) {
        std::vector<std::int32_t> out;
        out.reserve(std::min(ts.size(), max_len));
        for (const auto& t : ts) {
            if (out.size() >= max_len) {
                clipped = true;
                break;
            }
            auto it = ids.find(t);
            out.push_back(it == ids.end() ? 1 : it->second);
        }
        return out;
    };
    std::int32_t max_label = 0;
    std::size_t clipped_count = 0;
    for (std::size_t i = 0; i < corpus.labels.size(); ++i) {
        Sequence item;
        item.id = i;
        item.label = corpus.labels[i];
        item.tokens = encode(toks[i], item.clipped);
        if (corpus.pair_mode) item.tokens_b = encode(toks_b[i], item.clipped);
        if (item.tokens.empty() || (corpus.pair_mode && item.tokens_b.empty())) {
            throw DataError("record " + std::to_string(i) + " tokenizes to nothing");
        }
        if (item.clipped) ++clipped_count;
        max_label = std::max(max_label, item.label);
        ds.items.push_back(std::move(item));
    }
    ds.num_classes = static_cast<std::size_t>(max_label) + 1;
    if (clipped_count > 0) {
        std::cerr << "[data] clipped " << clipped_count << " sequence(s) to max_len="
                  << max_len << "\n";
    }
    return ds;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

void save_dataset(const std::string& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const std::string data_path = dir + "/data.jsonl";
    {
        std::ofstream out(data_path);
        if (!out) throw DataError("cannot write " + data_path);
        for (const auto& item : ds.items) {
            json j;
            j["id"] = item.id;
            j["label"] = item.label;
            if (ds.token_mode) {
                j["tokens"] = item.tokens;
                if (ds.pair_mode) j["tokens_b"] = item.tokens_b;
            } else {
                j["signal"] = item.signal;
            }
            if (!item.truth.empty()) j["truth"] = item.truth;
            out << j.dump() << "\n";
        }
    }
    json manifest;
    manifest["format_version"] = 1;
    manifest["token_mode"] = ds.token_mode;
    manifest["pair_mode"] = ds.pair_mode;
    manifest["num_classes"] = ds.num_classes;
    manifest["count"] = ds.items.size();
    manifest["vocab"] = ds.vocab;
    manifest["data_hash"] = hex64(hash_file(data_path));
    std::ofstream mout(dir + "/manifest.json");
    if (!mout) throw DataError("cannot write " + dir + "/manifest.json");
    mout << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream min(dir + "/manifest.json");
    if (!min) throw DataError("cannot open " + dir + "/manifest.json");
    json manifest;
    try {
        min >> manifest;
    } catch (const json::exception& e) {
        throw DataError(dir + "/manifest.json: " + e.what());
    }
    const std::string data_path = dir + "/data.jsonl";
    const std::string expected = manifest.value("data_hash", "");
    if (!expected.empty() && hex64(hash_file(data_path)) != expected) {
        throw DataError(data_path + ": content hash mismatch with manifest");
    }
    Dataset ds;
    ds.token_mode = manifest.value("token_mode", false);
    ds.pair_mode = manifest.value("pair_mode", false);
    ds.num_classes = manifest.value("num_classes", std::size_t{2});
    ds.vocab = manifest.value("vocab", std::vector<std::string>{});

    std::ifstream in(data_path);
    if (!in) throw DataError("cannot open " + data_path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(data_path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        Sequence item;
        item.id = j.value("id", line_no - 1);
        item.label = j.at("label").get<std::int32_t>();
        if (ds.token_mode) {
            item.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
            if (ds.pair_mode) item.tokens_b = j.at("tokens_b").get<std::vector<std::int32_t>>();
        } else {
            item.signal = j.at("signal").get<std::vector<float>>();
        }
        if (j.contains("truth")) item.truth = j["truth"].get<std::vector<std::uint8_t>>();
        ds.items.push_back(std::move(item));
    }
    if (ds.items.size() != manifest.value("count", ds.items.size())) {
        throw DataError(data_path + ": record count does not match manifest");
    }
    return ds;
}

// ---------------------------------------------------------------------------
// splits & batching
// ---------------------------------------------------------------------------

SplitIndices stratified_split(const std::vector<std::int32_t>& labels, std::uint64_t seed,
                              double val_frac, double test_frac) {
    std::map<std::int32_t, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
    Rng rng(seed);
    auto stream = rng.stream("split");
    SplitIndices out;
    for (auto& [c, idx] : by_class) {
        stream.shuffle(idx);
        const std::size_t n = idx.size();
        const auto n_test = static_cast<std::size_t>(std::floor(n * test_frac));
        const auto n_val = static_cast<std::size_t>(std::floor(n * val_frac));
        for (std::size_t i = 0; i < n; ++i) {
            if (i < n_test) {
                out.test.push_back(idx[i]);
            } else if (i < n_test + n_val) {
                out.val.push_back(idx[i]);
            } else {
                out.train.push_back(idx[i]);
            }
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

namespace {

void segment_into(const std::vector<float>& signal, std::size_t kernel, std::size_t stride,
                  std::size_t n_slots, float* dst) {
    const std::size_t n = segment_count(signal.size(), stride);
    for (std::size_t i = 0; i < n && i < n_slots; ++i) {
        for (std::size_t k = 0; k < kernel; ++k) {
            const std::size_t p = i * stride + k;
            dst[i * kernel + k] = p < signal.size() ? signal[p] : 0.0f;
        }
    }
}

} // namespace

SequenceBatch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                         std::size_t kernel, std::size_t stride) {
    if (indices.empty()) throw DataError("make_batch: empty index list");
    SequenceBatch b;
    b.batch = indices.size();
    b.segment_kernel = ds.token_mode ? 0 : kernel;

    std::size_t N = 0;
    b.lengths.resize(b.batch);
    if (ds.pair_mode) b.lengths_b.resize(b.batch);
    for (std::size_t i = 0; i < b.batch; ++i) {
        const Sequence& s = ds.items.at(indices[i]);
        b.lengths[i] = ds.token_mode ? s.tokens.size() : segment_count(s.signal.size(), stride);
        N = std::max(N, b.lengths[i]);
        if (ds.pair_mode) {
            b.lengths_b[i] =
                ds.token_mode ? s.tokens_b.size() : segment_count(s.signal_b.size(), stride);
            N = std::max(N, b.lengths_b[i]);
        }
    }
    b.num_segments = N;
    b.labels.resize(b.batch);

    if (ds.token_mode) {
        b.token_ids.assign(b.batch * N, 0);
        if (ds.pair_mode) b.token_ids_b.assign(b.batch * N, 0);
    } else {
        b.segments.assign(b.batch * N * kernel, 0.0f);
        if (ds.pair_mode) b.segments_b.assign(b.batch * N * kernel, 0.0f);
    }
    for (std::size_t i = 0; i < b.batch; ++i) {
        const Sequence& s = ds.items.at(indices[i]);
        b.labels[i] = s.label;
        if (ds.token_mode) {
            std::copy(s.tokens.begin(), s.tokens.end(), b.token_ids.begin() + i * N);
            if (ds.pair_mode) {
                std::copy(s.tokens_b.begin(), s.tokens_b.end(), b.token_ids_b.begin() + i * N);
            }
        } else {
            segment_into(s.signal, kernel, stride, N, b.segments.data() + i * N * kernel);
            if (ds.pair_mode) {
                segment_into(s.signal_b, kernel, stride, N, b.segments_b.data() + i * N * kernel);
            }
        }
    }
    return b;
}

std::vector<float> class_weights(const std::vector<std::int32_t>& labels,
                                 std::size_t num_classes) {
    std::vector<std::size_t> counts(num_classes, 0);
    for (std::int32_t y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw DataError("class_weights: label out of range");
        }
        ++counts[y];
    }
    std::vector<float> w(num_classes, 0.0f);
    for (std::size_t c = 0; c < num_classes; ++c) {
        if (counts[c] > 0) {
            w[c] = static_cast<float>(labels.size()) /
                   (static_cast<float>(num_classes) * static_cast<float>(counts[c]));
        }
    }
    return w;
}

} // namespace sesm
