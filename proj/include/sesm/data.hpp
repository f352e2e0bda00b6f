#pragma once

// Dataset generation, loading, splitting, and batching.
//
// Two input families: real-valued signals (segmented into fixed windows
// before the model sees them) and token sequences (one position per token).
// Generated datasets carry per-position ground-truth masks so selection
// quality can be scored.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sesm/batch.hpp"
#include "sesm/config.hpp"
#include "sesm/rng.hpp"

namespace sesm {

struct Sequence {
    std::size_t id = 0;
    std::int32_t label = 0;
    std::vector<float> signal;            // real mode
    std::vector<std::int32_t> tokens;     // token mode
    std::vector<std::uint8_t> truth;      // 1 at planted positions; may be empty
    std::vector<float> signal_b;          // pair mode second sequence
    std::vector<std::int32_t> tokens_b;
    bool clipped = false;                 // truncated to max_len at load time
};

struct Dataset {
    std::vector<Sequence> items;
    std::size_t num_classes = 2;
    bool token_mode = false;
    bool pair_mode = false;
    std::vector<std::string> vocab;       // token mode; index == id, [0]=pad, [1]=unk

    std::size_t vocab_size() const { return vocab.size(); }
    std::size_t size() const { return items.size(); }
};

struct SplitIndices {
    std::vector<std::size_t> train, val, test;
};

// --- synthetic generators ---------------------------------------------------

// Noisy signals with 1-2 planted sinusoidal motifs whose frequency (and sign)
// identify the class. `truth` marks motif samples.
Dataset gen_motif_real(const DatasetSpec& spec);

// Filler-token sequences with 1-2 planted class bigrams. In pair mode the
// label is 0/1/2 for unrelated / conflicting / shared motif between the two
// sequences.
Dataset gen_motif_token(const DatasetSpec& spec);

// --- external loaders --------------------------------------------------------

// Rows of comma-separated numbers; the last column is an integer label, the
// rest are the signal. Rows shorter than min_len are rejected (logged to
// stderr); longer than max_len are truncated and flagged.
Dataset load_csv_real(const std::string& path, std::size_t min_len, std::size_t max_len);

// Raw text corpus, one JSON object per line: {"text": ..., "label": ...} or
// {"text_a": ..., "text_b": ..., "label": ...} for pairs.
struct TextCorpus {
    std::vector<std::string> texts, texts_b;
    std::vector<std::int32_t> labels;
    bool pair_mode = false;
};
TextCorpus load_jsonl(const std::string& path);

// Lowercase whitespace tokenization. The vocabulary is built from the train
// split only (frequency-ranked, ties lexicographic); other splits map unseen
// tokens to unk. Sequences longer than max_len are clipped and flagged.
Dataset tokenize_corpus(const TextCorpus& corpus, const std::vector<std::size_t>& train_idx,
                        std::size_t max_len);

// --- persistence -------------------------------------------------------------

// Writes data.jsonl plus manifest.json (counts, vocabulary, content hash).
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// --- splits & batching -------------------------------------------------------

// Per-class shuffle then 80/10/10. Deterministic for a fixed seed.
SplitIndices stratified_split(const std::vector<std::int32_t>& labels, std::uint64_t seed,
                              double val_frac = 0.1, double test_frac = 0.1);

// Number of windows covering a signal of `len` samples.
inline std::size_t segment_count(std::size_t len, std::size_t stride) {
    return len == 0 ? 0 : (len + stride - 1) / stride;
}

// Assembles a padded batch. Real signals are cut into (kernel)-sample windows
// every (stride) samples, zero-padding the tail; tokens map 1:1 to positions.
SequenceBatch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices,
                         std::size_t kernel, std::size_t stride);

// Inverse-frequency class weights: w_c = n_total / (C * n_c).
std::vector<float> class_weights(const std::vector<std::int32_t>& labels,
                                 std::size_t num_classes);

} // namespace sesm
