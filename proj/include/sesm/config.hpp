#pragma once

// Configuration structs plus a flat key=value config-file format. Unknown
// keys are errors; validation collects every problem before reporting.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sesm/errors.hpp"

namespace sesm {

enum class EncoderKind { Mean, Cnn };

struct SesmConfig {
    std::size_t num_heads = 4;          // H
    std::size_t model_dim = 32;         // d
    std::size_t head_dim = 16;          // d_h
    std::size_t num_classes = 2;
    std::size_t max_positions = 256;    // capacity of the position-mixing weights
    EncoderKind encoder = EncoderKind::Mean;
    std::size_t encoder_channels = 32;  // cnn encoder conv width
    // input adapters
    bool token_input = false;           // token ids + embedding table vs real segments
    std::size_t vocab_size = 0;         // token mode
    std::size_t segment_kernel = 10;    // real mode: raw samples per segment
    std::size_t segment_stride = 10;
    // concept parameterizer
    std::vector<std::size_t> param_channels = {32, 32};
    bool pair_mode = false;             // two-sequence classification head
};

struct LossWeights {
    double lambda_div = 0.1;
    double lambda_stab = 0.1;
    double lambda_loc = 0.1;
    double d_min = 1.0;                 // diversity margin
};

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double clip_norm = 5.0;
    double tau = 1.0;                   // Gumbel-Sigmoid temperature
    double tau_end = 1.0;               // linear anneal target (== tau: constant)
    std::uint64_t seed = 42;
    bool class_weights = false;         // inverse-frequency task weighting
    std::size_t log_every = 1;          // epochs between history records
};

struct DatasetSpec {
    std::string kind;                   // motif_real | motif_token | csv | jsonl
    std::string path;                   // csv/jsonl input
    std::size_t num_sequences = 1000;
    std::size_t num_classes = 2;
    std::size_t min_len = 150;
    std::size_t max_len = 200;
    double noise_std = 0.25;
    double class_imbalance = 0.0;       // 0 = balanced; 9 = 9:1 majority:minority
    bool pair_mode = false;
    std::uint64_t seed = 7;
};

// ---------------------------------------------------------------------------
// flat key=value file
// ---------------------------------------------------------------------------

// Lines are `key = value`; '#' starts a comment; blank lines are ignored.
std::map<std::string, std::string> parse_config_file(const std::string& path);
std::map<std::string, std::string> parse_config_text(const std::string& text,
                                                     const std::string& origin);

struct FullConfig {
    SesmConfig model;
    LossWeights loss;
    TrainConfig train;

    // Applies key=value pairs on top of current values. Unknown keys or
    // malformed values are collected and thrown together as UsageError.
    void apply(const std::map<std::string, std::string>& kv);
    // Cross-field validation; throws UsageError listing every violation.
    void validate() const;
    // Round-trips the resolved configuration for echoing into output dirs.
    std::string to_text() const;
};

} // namespace sesm
