#pragma once

// Checkpoint = manifest.json + tensors.bin in a directory.
//
// The manifest records the full resolved configuration, a tensor table
// (name, shape, byte offset), and optional trainer state (epoch, optimizer
// step, RNG stream states) for bit-exact resumption. The blob holds every
// tensor as little-endian float32 in table order, so a save/load round trip
// reproduces each value bit for bit.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sesm/config.hpp"
#include "sesm/model.hpp"
#include "sesm/optimizer.hpp"

namespace sesm {

struct TrainerState {
    bool present = false;
    std::uint64_t epoch_next = 0;     // first epoch the resumed run should execute
    std::uint64_t opt_step = 0;
    std::uint64_t skipped_steps = 0;
    std::string shuffle_state;        // serialized RNG streams
    std::string gumbel_state;
};

struct Checkpoint {
    FullConfig config;
    std::vector<std::string> order;                    // tensor table order
    std::map<std::string, Shape> shapes;
    std::map<std::string, std::vector<float>> tensors;
    TrainerState trainer;
};

// Writes manifest.json + tensors.bin. Optimizer moments ride along as
// "opt.m.<param>" / "opt.v.<param>" tensors when an optimizer is given.
void save_checkpoint(const std::string& dir, const SesmModel& model, const FullConfig& config,
                     const AdamW* optimizer = nullptr, const TrainerState* trainer = nullptr);

Checkpoint load_checkpoint(const std::string& dir);

// Builds a model from the checkpoint config and fills its parameters.
SesmModel model_from_checkpoint(const Checkpoint& ckpt);

// Restores optimizer moments saved alongside the model. The optimizer must
// have been constructed over the same parameter store.
void optimizer_from_checkpoint(const Checkpoint& ckpt, const SesmModel& model, AdamW& opt);

} // namespace sesm
