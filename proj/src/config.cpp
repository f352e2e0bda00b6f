#include "sesm/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace sesm {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key, std::vector<std::string>& errs) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    errs.push_back(key + ": expected a boolean, got \"" + v + "\"");
    return false;
}

template <typename T>
T parse_num(const std::string& v, const std::string& key, std::vector<std::string>& errs) {
    std::istringstream in(v);
    T out{};
    in >> out;
    if (in.fail() || !(in >> std::ws).eof()) {
        errs.push_back(key + ": expected a number, got \"" + v + "\"");
        return T{};
    }
    return out;
}

std::vector<std::size_t> parse_size_list(const std::string& v, const std::string& key,
                                         std::vector<std::string>& errs) {
    std::vector<std::size_t> out;
    std::stringstream in(v);
    std::string part;
    while (std::getline(in, part, ',')) {
        part = trim(part);
        if (part.empty()) continue;
        out.push_back(parse_num<std::size_t>(part, key, errs));
    }
    if (out.empty()) errs.push_back(key + ": expected a comma-separated list");
    return out;
}

} // namespace

std::map<std::string, std::string> parse_config_text(const std::string& text,
                                                     const std::string& origin) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> errs;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            errs.push_back(origin + ":" + std::to_string(line_no) +
                           ": expected key = value, got \"" + line + "\"");
            continue;
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) {
            errs.push_back(origin + ":" + std::to_string(line_no) + ": empty key");
            continue;
        }
        kv[key] = val;  // later assignments override earlier ones
    }
    if (!errs.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw UsageError(msg);
    }
    return kv;
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

void FullConfig::apply(const std::map<std::string, std::string>& kv) {
    std::vector<std::string> errs;
    for (const auto& [key, val] : kv) {
        if (key == "model.heads") {
            model.num_heads = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.dim") {
            model.model_dim = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.head_dim") {
            model.head_dim = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.classes") {
            model.num_classes = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.max_positions") {
            model.max_positions = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.encoder") {
            if (val == "mean") {
                model.encoder = EncoderKind::Mean;
            } else if (val == "cnn") {
                model.encoder = EncoderKind::Cnn;
            } else {
                errs.push_back(key + ": expected mean|cnn, got \"" + val + "\"");
            }
        } else if (key == "model.encoder_channels") {
            model.encoder_channels = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.token_input") {
            model.token_input = parse_bool(val, key, errs);
        } else if (key == "model.vocab_size") {
            model.vocab_size = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.kernel") {
            model.segment_kernel = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.stride") {
            model.segment_stride = parse_num<std::size_t>(val, key, errs);
        } else if (key == "model.param_channels") {
            model.param_channels = parse_size_list(val, key, errs);
        } else if (key == "model.pair") {
            model.pair_mode = parse_bool(val, key, errs);
        } else if (key == "loss.lambda_div") {
            loss.lambda_div = parse_num<double>(val, key, errs);
        } else if (key == "loss.lambda_stab") {
            loss.lambda_stab = parse_num<double>(val, key, errs);
        } else if (key == "loss.lambda_loc") {
            loss.lambda_loc = parse_num<double>(val, key, errs);
        } else if (key == "loss.d_min") {
            loss.d_min = parse_num<double>(val, key, errs);
        } else if (key == "train.epochs") {
            train.epochs = parse_num<std::size_t>(val, key, errs);
        } else if (key == "train.batch") {
            train.batch_size = parse_num<std::size_t>(val, key, errs);
        } else if (key == "train.lr") {
            train.lr = parse_num<double>(val, key, errs);
        } else if (key == "train.weight_decay") {
            train.weight_decay = parse_num<double>(val, key, errs);
        } else if (key == "train.clip_norm") {
            train.clip_norm = parse_num<double>(val, key, errs);
        } else if (key == "train.tau") {
            train.tau = parse_num<double>(val, key, errs);
        } else if (key == "train.tau_end") {
            train.tau_end = parse_num<double>(val, key, errs);
        } else if (key == "train.seed") {
            train.seed = parse_num<std::uint64_t>(val, key, errs);
        } else if (key == "train.class_weights") {
            train.class_weights = parse_bool(val, key, errs);
        } else if (key == "train.log_every") {
            train.log_every = parse_num<std::size_t>(val, key, errs);
        } else {
            errs.push_back("unknown config key: " + key);
        }
    }
    if (!errs.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw UsageError(msg);
    }
}

void FullConfig::validate() const {
    std::vector<std::string> errs;
    auto require = [&](bool ok, const std::string& msg) {
        if (!ok) errs.push_back(msg);
    };
    require(model.num_heads >= 1, "model.heads must be >= 1");
    require(model.model_dim >= 1, "model.dim must be >= 1");
    require(model.head_dim >= 1, "model.head_dim must be >= 1");
    require(model.num_classes >= 2, "model.classes must be >= 2");
    require(model.max_positions >= 1, "model.max_positions must be >= 1");
    require(model.encoder_channels >= 1, "model.encoder_channels must be >= 1");
    require(model.param_channels.size() == 2, "model.param_channels must list two widths");
    for (std::size_t c : model.param_channels) {
        require(c >= 1, "model.param_channels entries must be >= 1");
    }
    if (model.token_input) {
        require(model.vocab_size >= 2, "model.vocab_size must be >= 2 for token input");
    } else {
        require(model.segment_kernel >= 1, "model.kernel must be >= 1");
        require(model.segment_stride >= 1, "model.stride must be >= 1");
        require(model.segment_stride <= model.segment_kernel,
                "model.stride must not exceed model.kernel (gaps would drop samples)");
    }
    require(!model.pair_mode || model.token_input, "model.pair requires token input");
    require(loss.lambda_div >= 0, "loss.lambda_div must be >= 0");
    require(loss.lambda_stab >= 0, "loss.lambda_stab must be >= 0");
    require(loss.lambda_loc >= 0, "loss.lambda_loc must be >= 0");
    require(loss.d_min > 0, "loss.d_min must be > 0");
    require(train.epochs >= 1, "train.epochs must be >= 1");
    require(train.batch_size >= 1, "train.batch must be >= 1");
    require(!(loss.lambda_stab > 0 && train.batch_size < 2),
            "train.batch must be >= 2 when loss.lambda_stab > 0");
    require(train.lr > 0, "train.lr must be > 0");
    require(train.weight_decay >= 0, "train.weight_decay must be >= 0");
    require(train.clip_norm > 0, "train.clip_norm must be > 0");
    require(train.tau > 0, "train.tau must be > 0");
    require(train.tau_end > 0, "train.tau_end must be > 0");
    require(train.log_every >= 1, "train.log_every must be >= 1");
    if (!errs.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errs) msg += "\n  " + e;
        throw UsageError(msg);
    }
}

std::string FullConfig::to_text() const {
    std::ostringstream out;
    out.precision(17);
    out << "model.heads = " << model.num_heads << "\n";
    out << "model.dim = " << model.model_dim << "\n";
    out << "model.head_dim = " << model.head_dim << "\n";
    out << "model.classes = " << model.num_classes << "\n";
    out << "model.max_positions = " << model.max_positions << "\n";
    out << "model.encoder = " << (model.encoder == EncoderKind::Mean ? "mean" : "cnn") << "\n";
    out << "model.encoder_channels = " << model.encoder_channels << "\n";
    out << "model.token_input = " << (model.token_input ? "true" : "false") << "\n";
    out << "model.vocab_size = " << model.vocab_size << "\n";
    out << "model.kernel = " << model.segment_kernel << "\n";
    out << "model.stride = " << model.segment_stride << "\n";
    out << "model.param_channels = ";
    for (std::size_t i = 0; i < model.param_channels.size(); ++i) {
        if (i) out << ",";
        out << model.param_channels[i];
    }
    out << "\n";
    out << "model.pair = " << (model.pair_mode ? "true" : "false") << "\n";
    out << "loss.lambda_div = " << loss.lambda_div << "\n";
    out << "loss.lambda_stab = " << loss.lambda_stab << "\n";
    out << "loss.lambda_loc = " << loss.lambda_loc << "\n";
    out << "loss.d_min = " << loss.d_min << "\n";
    out << "train.epochs = " << train.epochs << "\n";
    out << "train.batch = " << train.batch_size << "\n";
    out << "train.lr = " << train.lr << "\n";
    out << "train.weight_decay = " << train.weight_decay << "\n";
    out << "train.clip_norm = " << train.clip_norm << "\n";
    out << "train.tau = " << train.tau << "\n";
    out << "train.tau_end = " << train.tau_end << "\n";
    out << "train.seed = " << train.seed << "\n";
    out << "train.class_weights = " << (train.class_weights ? "true" : "false") << "\n";
    out << "train.log_every = " << train.log_every << "\n";
    return out.str();
}

} // namespace sesm
