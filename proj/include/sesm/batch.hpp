#pragma once

// A padded mini-batch of sequences, already segmented / tokenized. Decoupled
// from dataset loading so that the model and losses only ever see this.

#include <cstdint>
#include <vector>

#include "sesm/tensor.hpp"

namespace sesm {

struct SequenceBatch {
    // Real-valued inputs: segments (B, N, segment_kernel); empty in token mode.
    std::vector<float> segments;
    // Token inputs: ids (B, N), entries under lengths[i] are valid; 0 pads.
    std::vector<std::int32_t> token_ids;
    std::size_t batch = 0;
    std::size_t num_segments = 0;       // N: padded segment/token count
    std::size_t segment_kernel = 0;     // raw samples per segment (real mode)
    std::vector<std::size_t> lengths;   // valid segments per sequence
    std::vector<std::int32_t> labels;   // (B)

    // Pair mode: second sequence of each pair. Mirrors the primary fields.
    std::vector<float> segments_b;
    std::vector<std::int32_t> token_ids_b;
    std::vector<std::size_t> lengths_b;

    // mask[b, n] = 1 for valid positions, 0 for padding
    template <typename T>
    TensorT<T> mask() const {
        TensorT<T> m = TensorT<T>::zeros({batch, num_segments});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t n = 0; n < lengths[b]; ++n) m.data()[b * num_segments + n] = T(1);
        }
        return m;
    }

    template <typename T>
    TensorT<T> mask_b() const {
        TensorT<T> m = TensorT<T>::zeros({batch, num_segments});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t n = 0; n < lengths_b[b]; ++n) {
                m.data()[b * num_segments + n] = T(1);
            }
        }
        return m;
    }
};

} // namespace sesm
