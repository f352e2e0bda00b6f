#pragma once

// Full training loop: shuffled mini-batches, Gumbel-noise forward passes,
// gradient clipping, AdamW updates, per-epoch validation, JSONL history, and
// bit-exact checkpoint/resume (parameters, optimizer moments, and RNG stream
// states all round-trip).

#include <memory>
#include <string>
#include <vector>

#include "sesm/checkpoint.hpp"
#include "sesm/config.hpp"
#include "sesm/data.hpp"
#include "sesm/losses.hpp"
#include "sesm/model.hpp"
#include "sesm/optimizer.hpp"
#include "sesm/rng.hpp"

namespace sesm {

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown loss;        // batch-size-weighted means over the epoch
    double train_accuracy = 0;
    double val_accuracy = 0;
    double tau = 0;
    double lr = 0;
    std::uint64_t skipped_steps = 0;  // cumulative over the run
};

struct TrainOutcome {
    std::vector<EpochRecord> history;
};

class Trainer {
public:
    // The dataset must outlive the trainer. `out_dir` receives history.jsonl
    // and a final checkpoint/ subdirectory; pass "" to keep everything
    // in memory (tests).
    Trainer(FullConfig cfg, const Dataset& ds, SplitIndices splits, std::string out_dir);

    // Fresh parameter initialization from the configured seed.
    void init_fresh();
    // Restores parameters, optimizer moments, RNG stream states, and the
    // next epoch index from a checkpoint.
    void resume(const Checkpoint& ckpt);

    TrainOutcome run();

    SesmModel& model() { return *model_; }
    const SesmModel& model() const { return *model_; }
    const FullConfig& config() const { return cfg_; }
    const SplitIndices& splits() const { return splits_; }

private:
    FullConfig cfg_;
    const Dataset& ds_;
    SplitIndices splits_;
    std::string out_dir_;
    std::unique_ptr<SesmModel> model_;
    std::unique_ptr<AdamW> opt_;
    Rng rng_;
    Rng::Stream shuffle_;
    Rng::Stream gumbel_;
    std::size_t start_epoch_ = 0;
    bool resumed_ = false;
    std::vector<float> class_weight_;

    double tau_at(std::size_t epoch) const;
    double epoch_val_accuracy() const;
    void save_final_checkpoint();
};

} // namespace sesm
