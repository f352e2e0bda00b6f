#include "sesm/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "sesm/metrics.hpp"

namespace sesm {

namespace {

using nlohmann::json;

json record_to_json(const EpochRecord& r) {
    json j;
    j["epoch"] = r.epoch;
    j["loss"] = {{"total", r.loss.total},
                 {"task", r.loss.task},
                 {"diversity", r.loss.diversity},
                 {"stability", r.loss.stability},
                 {"locality", r.loss.locality}};
    j["train_acc"] = r.train_accuracy;
    j["val_acc"] = r.val_accuracy;
    j["tau"] = r.tau;
    j["lr"] = r.lr;
    j["skipped_steps"] = r.skipped_steps;
    return j;
}

std::string breakdown_str(const LossBreakdown& b) {
    std::ostringstream os;
    os.precision(10);
    os << "total=" << b.total << " task=" << b.task << " diversity=" << b.diversity
       << " stability=" << b.stability << " locality=" << b.locality;
    return os.str();
}

} // namespace

Trainer::Trainer(FullConfig cfg, const Dataset& ds, SplitIndices splits, std::string out_dir)
    : cfg_(std::move(cfg)),
      ds_(ds),
      splits_(std::move(splits)),
      out_dir_(std::move(out_dir)),
      rng_(cfg_.train.seed),
      shuffle_(rng_.stream("shuffle")),
      gumbel_(rng_.stream("gumbel")) {
    cfg_.validate();
    if (splits_.train.empty()) throw DataError("trainer: empty training split");
    if (ds_.token_mode != cfg_.model.token_input) {
        throw UsageError("trainer: dataset and model disagree about token input");
    }
    if (ds_.pair_mode != cfg_.model.pair_mode) {
        throw UsageError("trainer: dataset and model disagree about pair mode");
    }
    for (std::size_t i : splits_.train) {
        if (ds_.items.at(i).label < 0 ||
            static_cast<std::size_t>(ds_.items[i].label) >= cfg_.model.num_classes) {
            throw DataError("trainer: label out of range for configured class count");
        }
    }
    class_weight_.assign(cfg_.model.num_classes, 1.0f);
    if (cfg_.train.class_weights) {
        std::vector<std::int32_t> train_labels;
        train_labels.reserve(splits_.train.size());
        for (std::size_t i : splits_.train) train_labels.push_back(ds_.items[i].label);
        class_weight_ = class_weights(train_labels, cfg_.model.num_classes);
    }
}

void Trainer::init_fresh() {
    model_ = std::make_unique<SesmModel>(cfg_.model);
    auto init = rng_.stream("init");
    model_->init_params(init);
    opt_ = std::make_unique<AdamW>(model_->params());
    opt_->weight_decay = static_cast<float>(cfg_.train.weight_decay);
    start_epoch_ = 0;
    resumed_ = false;
}

void Trainer::resume(const Checkpoint& ckpt) {
    if (!ckpt.trainer.present) {
        throw DataError("checkpoint has no trainer state to resume from");
    }
    model_ = std::make_unique<SesmModel>(model_from_checkpoint(ckpt));
    opt_ = std::make_unique<AdamW>(model_->params());
    opt_->weight_decay = static_cast<float>(cfg_.train.weight_decay);
    optimizer_from_checkpoint(ckpt, *model_, *opt_);
    shuffle_.set_state(ckpt.trainer.shuffle_state);
    gumbel_.set_state(ckpt.trainer.gumbel_state);
    start_epoch_ = static_cast<std::size_t>(ckpt.trainer.epoch_next);
    resumed_ = true;
}

double Trainer::tau_at(std::size_t epoch) const {
    const auto& t = cfg_.train;
    if (t.epochs <= 1) return t.tau;
    const double frac = static_cast<double>(epoch) / static_cast<double>(t.epochs - 1);
    return t.tau + (t.tau_end - t.tau) * frac;
}

double Trainer::epoch_val_accuracy() const {
    if (splits_.val.empty()) return 0.0;
    auto preds = predict(*model_, ds_, splits_.val, cfg_.train.batch_size);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < splits_.val.size(); ++i) {
        if (preds[i] == ds_.items[splits_.val[i]].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(splits_.val.size());
}

void Trainer::save_final_checkpoint() {
    if (out_dir_.empty()) return;
    TrainerState state;
    state.present = true;
    state.epoch_next = cfg_.train.epochs;
    state.opt_step = opt_->step_count();
    state.skipped_steps = opt_->skipped_steps();
    state.shuffle_state = shuffle_.state();
    state.gumbel_state = gumbel_.state();
    save_checkpoint(out_dir_ + "/checkpoint", *model_, cfg_, opt_.get(), &state);
}

TrainOutcome Trainer::run() {
    if (!model_) throw UsageError("trainer: call init_fresh() or resume() before run()");
    std::ofstream history_out;
    if (!out_dir_.empty()) {
        std::filesystem::create_directories(out_dir_);
        history_out.open(out_dir_ + "/history.jsonl",
                         resumed_ ? std::ios::app : std::ios::trunc);
        if (!history_out) throw DataError("cannot write " + out_dir_ + "/history.jsonl");
    }

    TrainOutcome outcome;
    LossBreakdown last_finite;
    const auto lr = static_cast<float>(cfg_.train.lr);

    for (std::size_t epoch = start_epoch_; epoch < cfg_.train.epochs; ++epoch) {
        const double tau = tau_at(epoch);
        std::vector<std::size_t> order = splits_.train;
        shuffle_.shuffle(order);

        LossBreakdown sums;
        std::size_t seen = 0, correct = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg_.train.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg_.train.batch_size);
            const std::vector<std::size_t> group(order.begin() + begin, order.begin() + end);
            SequenceBatch batch =
                make_batch(ds_, group, cfg_.model.segment_kernel, cfg_.model.segment_stride);

            TapeT<float> tape;
            auto fwd = model_->forward(batch, RunMode::Train, static_cast<float>(tau), &gumbel_);
            std::vector<float> sample_w(group.size());
            for (std::size_t i = 0; i < group.size(); ++i) {
                sample_w[i] = class_weight_[static_cast<std::size_t>(batch.labels[i])];
            }
            auto loss = total_loss(fwd, batch, cfg_.loss, sample_w);
            if (!std::isfinite(loss.parts.total)) {
                throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                                   " (non-finite loss); last finite breakdown: " +
                                   breakdown_str(last_finite));
            }
            last_finite = loss.parts;

            model_->params().zero_grad();
            tape.backward(loss.total);
            AdamW::clip_grad_norm(model_->params(), cfg_.train.clip_norm);
            if (!opt_->step(model_->params(), lr)) {
                std::cerr << "[train] epoch " << epoch
                          << ": skipped a step with non-finite gradients\n";
            }

            const std::size_t n = group.size();
            sums.total += loss.parts.total * n;
            sums.task += loss.parts.task * n;
            sums.diversity += loss.parts.diversity * n;
            sums.stability += loss.parts.stability * n;
            sums.locality += loss.parts.locality * n;
            const auto& probs = fwd.probs.data();
            const std::size_t C = cfg_.model.num_classes;
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < C; ++c) {
                    if (probs[i * C + c] > probs[i * C + best]) best = c;
                }
                if (static_cast<std::int32_t>(best) == batch.labels[i]) ++correct;
            }
            seen += n;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss.total = sums.total / seen;
        rec.loss.task = sums.task / seen;
        rec.loss.diversity = sums.diversity / seen;
        rec.loss.stability = sums.stability / seen;
        rec.loss.locality = sums.locality / seen;
        rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
        rec.val_accuracy = epoch_val_accuracy();
        rec.tau = tau;
        rec.lr = cfg_.train.lr;
        rec.skipped_steps = opt_->skipped_steps();
        if ((epoch + 1) % cfg_.train.log_every == 0 || epoch + 1 == cfg_.train.epochs) {
            outcome.history.push_back(rec);
            if (history_out.is_open()) {
                history_out << record_to_json(rec).dump() << "\n";
                history_out.flush();
            }
        }
    }
    save_final_checkpoint();
    return outcome;
}

} // namespace sesm
