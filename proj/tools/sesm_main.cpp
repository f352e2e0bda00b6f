// Command-line entry point: dataset generation, training, evaluation,
// explanation, prototype catalogs, and head-count sweeps.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sesm/checkpoint.hpp"
#include "sesm/config.hpp"
#include "sesm/data.hpp"
#include "sesm/errors.hpp"
#include "sesm/explain.hpp"
#include "sesm/metrics.hpp"
#include "sesm/trainer.hpp"

namespace {

using nlohmann::json;

struct DataArgs {
    std::string data_dir;
    std::string csv_path;
    std::string jsonl_path;

    void attach(CLI::App* cmd, bool required = true) {
        auto* a = cmd->add_option("--data", data_dir, "generated dataset directory");
        auto* b = cmd->add_option("--csv", csv_path, "CSV file: signal columns + integer label");
        auto* c = cmd->add_option("--jsonl", jsonl_path,
                                  "JSONL file: {\"text\", \"label\"} or "
                                  "{\"text_a\", \"text_b\", \"label\"}");
        a->excludes(b)->excludes(c);
        b->excludes(c);
        if (required) {
            cmd->preparse_callback([](std::size_t) {});
        }
    }

    bool any() const { return !data_dir.empty() || !csv_path.empty() || !jsonl_path.empty(); }
};

// Loads a dataset and produces deterministic stratified splits. JSONL text
// needs the split before tokenization (the vocabulary may only see training
// text), so splitting happens here for every source.
struct LoadedData {
    sesm::Dataset ds;
    sesm::SplitIndices splits;
};

LoadedData load_data(const DataArgs& args, std::uint64_t seed, std::size_t max_positions,
                     std::size_t segment_stride) {
    using namespace sesm;
    if (!args.any()) {
        throw UsageError("no input data: pass --data, --csv, or --jsonl");
    }
    LoadedData out;
    if (!args.jsonl_path.empty()) {
        TextCorpus corpus = load_jsonl(args.jsonl_path);
        out.splits = stratified_split(corpus.labels, seed);
        out.ds = tokenize_corpus(corpus, out.splits.train, max_positions);
        return out;
    }
    if (!args.csv_path.empty()) {
        // positions are segments here, so the raw-sample cap scales by stride
        out.ds = load_csv_real(args.csv_path, 1, max_positions * segment_stride);
    } else {
        out.ds = load_dataset(args.data_dir);
    }
    std::vector<std::int32_t> labels;
    labels.reserve(out.ds.items.size());
    for (const auto& item : out.ds.items) labels.push_back(item.label);
    out.splits = stratified_split(labels, seed);
    return out;
}

// Training hyperparameters exposed as flags; only flags the user actually
// passed override the config file.
struct TrainFlags {
    std::size_t heads = 0, dim = 0, head_dim = 0, epochs = 0, batch = 0;
    std::size_t kernel = 0, stride = 0, max_positions = 0, encoder_channels = 0;
    std::size_t log_every = 0;
    double lr = 0, weight_decay = -1, clip_norm = 0, tau = 0, tau_end = 0;
    double lambda_div = -1, lambda_stab = -1, lambda_loc = -1, d_min = 0;
    std::uint64_t seed = 0;
    bool class_weights = false;
    std::string encoder;
    std::string config_path;

    std::map<std::string, CLI::Option*> opts;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "key = value config file");
        opts["model.heads"] = cmd->add_option("--heads", heads, "selection heads");
        opts["model.dim"] = cmd->add_option("--dim", dim, "model width");
        opts["model.head_dim"] = cmd->add_option("--head-dim", head_dim, "attention width");
        opts["model.kernel"] = cmd->add_option("--kernel", kernel, "samples per segment");
        opts["model.stride"] = cmd->add_option("--stride", stride, "segment stride");
        opts["model.max_positions"] =
            cmd->add_option("--max-positions", max_positions, "position capacity");
        opts["model.encoder"] =
            cmd->add_option("--encoder", encoder, "concept encoder: mean|cnn");
        opts["model.encoder_channels"] =
            cmd->add_option("--encoder-channels", encoder_channels, "cnn encoder width");
        opts["train.epochs"] = cmd->add_option("--epochs", epochs, "training epochs");
        opts["train.batch"] = cmd->add_option("--batch", batch, "batch size");
        opts["train.lr"] = cmd->add_option("--lr", lr, "learning rate");
        opts["train.weight_decay"] =
            cmd->add_option("--weight-decay", weight_decay, "decoupled weight decay");
        opts["train.clip_norm"] = cmd->add_option("--clip-norm", clip_norm, "gradient clip");
        opts["train.tau"] = cmd->add_option("--tau", tau, "selection temperature");
        opts["train.tau_end"] =
            cmd->add_option("--tau-end", tau_end, "final temperature (linear anneal)");
        opts["train.seed"] = cmd->add_option("--seed", seed, "master RNG seed");
        opts["train.log_every"] = cmd->add_option("--log-every", log_every, "history cadence");
        opts["train.class_weights"] = cmd->add_flag(
            "--class-weights", class_weights, "inverse-frequency class weighting");
        opts["loss.lambda_div"] =
            cmd->add_option("--lambda-div", lambda_div, "diversity weight");
        opts["loss.lambda_stab"] =
            cmd->add_option("--lambda-stab", lambda_stab, "stability weight");
        opts["loss.lambda_loc"] =
            cmd->add_option("--lambda-loc", lambda_loc, "locality weight");
        opts["loss.d_min"] = cmd->add_option("--d-min", d_min, "diversity margin");
    }

    std::map<std::string, std::string> overrides() const {
        std::map<std::string, std::string> kv;
        auto set = [&](const char* key, auto value) {
            auto it = opts.find(key);
            if (it != opts.end() && it->second->count() > 0) {
                std::ostringstream os;
                os.precision(17);
                os << value;
                kv[key] = os.str();
            }
        };
        set("model.heads", heads);
        set("model.dim", dim);
        set("model.head_dim", head_dim);
        set("model.kernel", kernel);
        set("model.stride", stride);
        set("model.max_positions", max_positions);
        set("model.encoder", encoder);
        set("model.encoder_channels", encoder_channels);
        set("train.epochs", epochs);
        set("train.batch", batch);
        set("train.lr", lr);
        set("train.weight_decay", weight_decay);
        set("train.clip_norm", clip_norm);
        set("train.tau", tau);
        set("train.tau_end", tau_end);
        set("train.seed", seed);
        set("train.log_every", log_every);
        if (opts.at("train.class_weights")->count() > 0) {
            kv["train.class_weights"] = class_weights ? "true" : "false";
        }
        set("loss.lambda_div", lambda_div);
        set("loss.lambda_stab", lambda_stab);
        set("loss.lambda_loc", lambda_loc);
        set("loss.d_min", d_min);
        return kv;
    }
};

// Resolves defaults <- config file <- CLI flags, then adapts the model
// section to the dataset (modality, classes, vocabulary, position capacity).
sesm::FullConfig resolve_config(const TrainFlags& flags, const sesm::Dataset& ds) {
    using namespace sesm;
    FullConfig cfg;
    if (!flags.config_path.empty()) cfg.apply(parse_config_file(flags.config_path));
    cfg.apply(flags.overrides());

    cfg.model.token_input = ds.token_mode;
    cfg.model.pair_mode = ds.pair_mode;
    cfg.model.num_classes = ds.num_classes;
    if (ds.token_mode) cfg.model.vocab_size = ds.vocab_size();

    std::size_t needed = 1;
    for (const auto& item : ds.items) {
        const std::size_t n = ds.token_mode
                                  ? item.tokens.size()
                                  : segment_count(item.signal.size(), cfg.model.segment_stride);
        needed = std::max(needed, n);
        if (ds.pair_mode) {
            needed = std::max(needed, item.tokens_b.size());
        }
    }
    if (cfg.model.max_positions < needed) cfg.model.max_positions = needed;
    cfg.validate();
    return cfg;
}

json metrics_json(const sesm::ClassificationMetrics& m) {
    return json{{"accuracy", m.accuracy},
                {"macro_precision", m.macro_precision},
                {"macro_recall", m.macro_recall},
                {"macro_f1", m.macro_f1},
                {"count", m.count},
                {"confusion", m.confusion}};
}

json split_report(const sesm::SesmModel& model, const sesm::Dataset& ds,
                  const std::vector<std::size_t>& idx, std::size_t batch_size) {
    using namespace sesm;
    std::vector<std::int32_t> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(ds.items[i].label);
    const auto preds = predict(model, ds, idx, batch_size);
    json out = metrics_json(classification_metrics(preds, labels, model.config().num_classes));
    if (model.config().num_heads >= 2) {
        out["aopc"] = compute_aopc(model, ds, idx).mean;
    }
    const auto quality = selection_quality(model, ds, idx, batch_size);
    if (quality.items > 0) {
        out["selection_precision"] = quality.precision;
        out["selection_recall"] = quality.recall;
        out["selection_f1"] = quality.f1;
    }
    out["mean_selection_fraction"] = mean_selection_fraction(model, ds, idx, batch_size);
    out["mean_pairwise_overlap"] = mean_pairwise_overlap(model, ds, idx, batch_size);
    return out;
}

const std::vector<std::size_t>& pick_split(const sesm::SplitIndices& splits,
                                           const std::string& name) {
    if (name == "train") return splits.train;
    if (name == "val") return splits.val;
    if (name == "test") return splits.test;
    throw sesm::UsageError("unknown split \"" + name + "\" (train|val|test)");
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw sesm::DataError("cannot write " + path);
    out << text;
}

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

int run_gen_data(const std::string& out_dir, const std::string& kind,
                 const sesm::DatasetSpec& spec) {
    using namespace sesm;
    Dataset ds;
    if (kind == "motif_real") {
        ds = gen_motif_real(spec);
    } else if (kind == "motif_token") {
        ds = gen_motif_token(spec);
    } else {
        throw UsageError("unknown --kind \"" + kind + "\" (motif_real|motif_token)");
    }
    save_dataset(out_dir, ds);
    std::cout << "wrote " << ds.items.size() << " sequences (" << ds.num_classes
              << " classes" << (ds.pair_mode ? ", pairs" : "") << ") to " << out_dir << "\n";
    return 0;
}

int run_train(const DataArgs& data_args, const TrainFlags& flags, const std::string& out_dir,
              bool resume) {
    using namespace sesm;
    // seed is needed for splitting before the config exists; resolve it first
    FullConfig pre;
    if (!flags.config_path.empty()) pre.apply(parse_config_file(flags.config_path));
    pre.apply(flags.overrides());

    LoadedData data = load_data(data_args, pre.train.seed, pre.model.max_positions, pre.model.segment_stride);
    FullConfig cfg = resolve_config(flags, data.ds);

    std::filesystem::create_directories(out_dir);
    write_text(out_dir + "/config_resolved.cfg", cfg.to_text());

    Trainer trainer(cfg, data.ds, data.splits, out_dir);
    if (resume) {
        trainer.resume(load_checkpoint(out_dir + "/checkpoint"));
    } else {
        trainer.init_fresh();
    }
    auto outcome = trainer.run();
    if (!outcome.history.empty()) {
        const auto& last = outcome.history.back();
        std::cout << "epoch " << last.epoch << ": loss=" << last.loss.total
                  << " train_acc=" << last.train_accuracy << " val_acc=" << last.val_accuracy
                  << "\n";
    }

    json final;
    final["train"] = split_report(trainer.model(), data.ds, data.splits.train,
                                  cfg.train.batch_size);
    if (!data.splits.val.empty()) {
        final["val"] =
            split_report(trainer.model(), data.ds, data.splits.val, cfg.train.batch_size);
    }
    if (!data.splits.test.empty()) {
        final["test"] =
            split_report(trainer.model(), data.ds, data.splits.test, cfg.train.batch_size);
    }
    write_text(out_dir + "/final_metrics.json", final.dump(2) + "\n");
    std::cout << "test accuracy: "
              << (final.contains("test") ? final["test"]["accuracy"].get<double>() : 0.0)
              << "\n";
    return 0;
}

int run_eval(const DataArgs& data_args, const std::string& ckpt_dir, const std::string& split,
             const std::string& out_path, std::size_t batch_size) {
    using namespace sesm;
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    SesmModel model = model_from_checkpoint(ckpt);
    LoadedData data =
        load_data(data_args, ckpt.config.train.seed, ckpt.config.model.max_positions, ckpt.config.model.segment_stride);
    const auto& idx = pick_split(data.splits, split);
    if (idx.empty()) throw DataError("split \"" + split + "\" is empty");
    json report = split_report(model, data.ds, idx, batch_size);
    report["split"] = split;
    std::cout << report.dump(2) << "\n";
    if (!out_path.empty()) write_text(out_path, report.dump(2) + "\n");
    return 0;
}

int run_explain(const DataArgs& data_args, const std::string& ckpt_dir, std::size_t index,
                const std::string& format, const std::string& out_path) {
    using namespace sesm;
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    SesmModel model = model_from_checkpoint(ckpt);
    LoadedData data =
        load_data(data_args, ckpt.config.train.seed, ckpt.config.model.max_positions, ckpt.config.model.segment_stride);
    Explanation expl = explain_input(model, data.ds, index);
    std::string rendered;
    if (format == "text") {
        rendered = render_text(expl, data.ds);
    } else if (format == "json") {
        rendered = render_json(expl).dump(2) + "\n";
    } else if (format == "csv") {
        rendered = render_plot_csv(expl, data.ds);
    } else {
        throw UsageError("unknown --format \"" + format + "\" (text|json|csv)");
    }
    if (out_path.empty()) {
        std::cout << rendered;
    } else {
        write_text(out_path, rendered);
    }
    return 0;
}

int run_prototypes(const DataArgs& data_args, const std::string& ckpt_dir,
                   const std::string& split, std::size_t top_k, const std::string& format,
                   const std::string& out_path, std::size_t batch_size) {
    using namespace sesm;
    Checkpoint ckpt = load_checkpoint(ckpt_dir);
    SesmModel model = model_from_checkpoint(ckpt);
    LoadedData data =
        load_data(data_args, ckpt.config.train.seed, ckpt.config.model.max_positions, ckpt.config.model.segment_stride);
    const auto& idx = pick_split(data.splits, split);
    if (idx.empty()) throw DataError("split \"" + split + "\" is empty");
    PrototypeCatalog catalog = build_prototype_catalog(model, data.ds, idx, top_k, batch_size);
    const std::string rendered =
        format == "json" ? catalog_json(catalog).dump(2) + "\n" : catalog_text(catalog);
    if (out_path.empty()) {
        std::cout << rendered;
    } else {
        write_text(out_path, rendered);
    }
    return 0;
}

int run_sweep(const DataArgs& data_args, const TrainFlags& flags, const std::string& out_dir,
              const std::vector<std::size_t>& head_counts) {
    using namespace sesm;
    if (head_counts.empty()) throw UsageError("sweep-heads: pass --heads-list");
    FullConfig pre;
    if (!flags.config_path.empty()) pre.apply(parse_config_file(flags.config_path));
    pre.apply(flags.overrides());
    LoadedData data = load_data(data_args, pre.train.seed, pre.model.max_positions, pre.model.segment_stride);

    json rows = json::array();
    std::cout << "heads  test_acc  aopc      overlap\n";
    for (std::size_t h : head_counts) {
        FullConfig cfg = resolve_config(flags, data.ds);
        cfg.model.num_heads = h;
        cfg.validate();
        const std::string run_dir = out_dir + "/heads" + std::to_string(h);
        std::filesystem::create_directories(run_dir);
        write_text(run_dir + "/config_resolved.cfg", cfg.to_text());
        Trainer trainer(cfg, data.ds, data.splits, run_dir);
        trainer.init_fresh();
        trainer.run();
        json report = split_report(trainer.model(), data.ds, data.splits.test,
                                   cfg.train.batch_size);
        report["heads"] = h;
        rows.push_back(report);
        std::ostringstream line;
        line.precision(4);
        line << h << "      " << report["accuracy"].get<double>() << "    "
             << (report.contains("aopc") ? report["aopc"].get<double>() : 0.0) << "    "
             << report["mean_pairwise_overlap"].get<double>();
        std::cout << line.str() << "\n";
    }
    write_text(out_dir + "/sweep.json", rows.dump(2) + "\n");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"interpretable sequence classifier built from selected prototype parts"};
    app.require_subcommand(1);

    // gen-data ---------------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic motif dataset");
    std::string gen_out, gen_kind = "motif_real";
    sesm::DatasetSpec spec;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--kind", gen_kind, "motif_real|motif_token");
    gen->add_option("--num", spec.num_sequences, "sequence count");
    gen->add_option("--classes", spec.num_classes, "class count");
    gen->add_option("--min-len", spec.min_len, "minimum raw length");
    gen->add_option("--max-len", spec.max_len, "maximum raw length");
    gen->add_option("--noise", spec.noise_std, "noise standard deviation");
    gen->add_option("--imbalance", spec.class_imbalance,
                    "majority:minority ratio (2-class only; 0 = balanced)");
    gen->add_flag("--pair", spec.pair_mode, "two-sequence relation task (token data)");
    gen->add_option("--seed", spec.seed, "generator seed");

    // train -------------------------------------------------------------------
    auto* train = app.add_subcommand("train", "train a model");
    DataArgs train_data;
    train_data.attach(train);
    TrainFlags train_flags;
    train_flags.attach(train);
    std::string train_out;
    bool train_resume = false;
    train->add_option("--out", train_out, "run directory")->required();
    train->add_flag("--resume", train_resume, "continue from <out>/checkpoint");

    // eval ---------------------------------------------------------------------
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    DataArgs eval_data;
    eval_data.attach(eval);
    std::string eval_ckpt, eval_split = "test", eval_out;
    std::size_t eval_batch = 32;
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
    eval->add_option("--split", eval_split, "train|val|test");
    eval->add_option("--out", eval_out, "write the JSON report here");
    eval->add_option("--batch", eval_batch, "evaluation batch size");

    // explain -------------------------------------------------------------------
    auto* explain = app.add_subcommand("explain", "explain one prediction");
    DataArgs explain_data;
    explain_data.attach(explain);
    std::string explain_ckpt, explain_format = "text", explain_out;
    std::size_t explain_index = 0;
    explain->add_option("--checkpoint", explain_ckpt, "checkpoint directory")->required();
    explain->add_option("--index", explain_index, "dataset item index")->required();
    explain->add_option("--format", explain_format, "text|json|csv");
    explain->add_option("--out", explain_out, "output file (default stdout)");

    // prototypes ------------------------------------------------------------------
    auto* protos = app.add_subcommand("prototypes", "strongest prototypes per head");
    DataArgs protos_data;
    protos_data.attach(protos);
    std::string protos_ckpt, protos_split = "train", protos_format = "text", protos_out;
    std::size_t protos_topk = 5, protos_batch = 32;
    protos->add_option("--checkpoint", protos_ckpt, "checkpoint directory")->required();
    protos->add_option("--split", protos_split, "train|val|test");
    protos->add_option("--top-k", protos_topk, "prototypes per head");
    protos->add_option("--format", protos_format, "text|json");
    protos->add_option("--out", protos_out, "output file (default stdout)");
    protos->add_option("--batch", protos_batch, "batch size");

    // sweep-heads --------------------------------------------------------------
    auto* sweep = app.add_subcommand("sweep-heads", "train across several head counts");
    DataArgs sweep_data;
    sweep_data.attach(sweep);
    TrainFlags sweep_flags;
    sweep_flags.attach(sweep);
    std::string sweep_out;
    std::vector<std::size_t> sweep_heads;
    sweep->add_option("--out", sweep_out, "sweep directory")->required();
    sweep->add_option("--heads-list", sweep_heads, "head counts, e.g. 2 4 8")->required();

    try {
        app.parse(argc, argv);
        if (app.got_subcommand(gen)) return run_gen_data(gen_out, gen_kind, spec);
        if (app.got_subcommand(train)) {
            return run_train(train_data, train_flags, train_out, train_resume);
        }
        if (app.got_subcommand(eval)) {
            return run_eval(eval_data, eval_ckpt, eval_split, eval_out, eval_batch);
        }
        if (app.got_subcommand(explain)) {
            return run_explain(explain_data, explain_ckpt, explain_index, explain_format,
                               explain_out);
        }
        if (app.got_subcommand(protos)) {
            return run_prototypes(protos_data, protos_ckpt, protos_split, protos_topk,
                                  protos_format, protos_out, protos_batch);
        }
        if (app.got_subcommand(sweep)) {
            return run_sweep(sweep_data, sweep_flags, sweep_out, sweep_heads);
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const sesm::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const sesm::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const sesm::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
