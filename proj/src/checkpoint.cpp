#include "sesm/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sesm/errors.hpp"

namespace sesm {

namespace {

using nlohmann::json;

// Endian-explicit float32 serialization: 4 bytes, least significant first.
void write_f32(std::ofstream& out, const std::vector<float>& values) {
    for (float f : values) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        const char bytes[4] = {
            static_cast<char>(bits & 0xff),
            static_cast<char>((bits >> 8) & 0xff),
            static_cast<char>((bits >> 16) & 0xff),
            static_cast<char>((bits >> 24) & 0xff),
        };
        out.write(bytes, 4);
    }
}

std::vector<float> read_f32(std::ifstream& in, std::size_t count) {
    std::vector<float> values(count);
    std::vector<char> raw(count * 4);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw DataError("checkpoint blob is truncated");
    }
    for (std::size_t i = 0; i < count; ++i) {
        const auto b0 = static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4]));
        const auto b1 = static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + 1]));
        const auto b2 = static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + 2]));
        const auto b3 = static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + 3]));
        const std::uint32_t bits = b0 | (b1 << 8) | (b2 << 16) | (b3 << 24);
        std::memcpy(&values[i], &bits, 4);
    }
    return values;
}

} // namespace

void save_checkpoint(const std::string& dir, const SesmModel& model, const FullConfig& config,
                     const AdamW* optimizer, const TrainerState* trainer) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    // tensor table: parameters first, then optimizer moments
    std::vector<std::pair<std::string, const std::vector<float>*>> table;
    std::vector<std::pair<std::string, Shape>> shapes;
    for (const auto& [name, t] : model.params().items()) {
        table.emplace_back(name, &t.data());
        shapes.emplace_back(name, t.shape());
    }
    if (optimizer) {
        const auto& m = optimizer->first_moments();
        const auto& v = optimizer->second_moments();
        std::size_t pi = 0;
        for (const auto& [name, t] : model.params().items()) {
            table.emplace_back("opt.m." + name, &m[pi]);
            shapes.emplace_back("opt.m." + name, Shape{m[pi].size()});
            table.emplace_back("opt.v." + name, &v[pi]);
            shapes.emplace_back("opt.v." + name, Shape{v[pi].size()});
            ++pi;
        }
    }

    json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = config.to_text();
    json tensor_list = json::array();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < table.size(); ++i) {
        json entry;
        entry["name"] = table[i].first;
        entry["shape"] = shapes[i].second;
        entry["offset"] = offset;
        entry["count"] = table[i].second->size();
        entry["dtype"] = "f32";
        tensor_list.push_back(entry);
        offset += table[i].second->size() * 4;
    }
    manifest["tensors"] = tensor_list;
    if (trainer && trainer->present) {
        json t;
        t["epoch_next"] = trainer->epoch_next;
        t["opt_step"] = trainer->opt_step;
        t["skipped_steps"] = trainer->skipped_steps;
        t["shuffle_state"] = trainer->shuffle_state;
        t["gumbel_state"] = trainer->gumbel_state;
        manifest["trainer"] = t;
    }

    {
        std::ofstream blob(dir + "/tensors.bin", std::ios::binary);
        if (!blob) throw DataError("cannot write " + dir + "/tensors.bin");
        for (const auto& [name, values] : table) write_f32(blob, *values);
    }
    std::ofstream mout(dir + "/manifest.json");
    if (!mout) throw DataError("cannot write " + dir + "/manifest.json");
    mout << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream min(dir + "/manifest.json");
    if (!min) throw DataError("cannot open " + dir + "/manifest.json");
    json manifest;
    try {
        min >> manifest;
    } catch (const json::exception& e) {
        throw DataError(dir + "/manifest.json: " + e.what());
    }
    if (manifest.value("format_version", 0) != 1) {
        throw DataError(dir + ": unsupported checkpoint format version");
    }
    Checkpoint ckpt;
    ckpt.config.apply(parse_config_text(manifest.at("config").get<std::string>(),
                                        dir + "/manifest.json#config"));

    std::ifstream blob(dir + "/tensors.bin", std::ios::binary);
    if (!blob) throw DataError("cannot open " + dir + "/tensors.bin");
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const auto count = entry.at("count").get<std::size_t>();
        const auto offset = entry.at("offset").get<std::size_t>();
        if (entry.value("dtype", "f32") != "f32") {
            throw DataError(dir + ": tensor " + name + " has unsupported dtype");
        }
        blob.seekg(static_cast<std::streamoff>(offset));
        ckpt.order.push_back(name);
        ckpt.shapes[name] = entry.at("shape").get<Shape>();
        ckpt.tensors[name] = read_f32(blob, count);
    }
    if (manifest.contains("trainer")) {
        const auto& t = manifest["trainer"];
        ckpt.trainer.present = true;
        ckpt.trainer.epoch_next = t.at("epoch_next").get<std::uint64_t>();
        ckpt.trainer.opt_step = t.at("opt_step").get<std::uint64_t>();
        ckpt.trainer.skipped_steps = t.value("skipped_steps", std::uint64_t{0});
        ckpt.trainer.shuffle_state = t.at("shuffle_state").get<std::string>();
        ckpt.trainer.gumbel_state = t.at("gumbel_state").get<std::string>();
    }
    return ckpt;
}

SesmModel model_from_checkpoint(const Checkpoint& ckpt) {
    SesmModel model(ckpt.config.model);
    for (auto& [name, t] : model.params().items()) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            throw DataError("checkpoint is missing parameter " + name);
        }
        if (it->second.size() != t.numel()) {
            throw DataError("checkpoint parameter " + name + " has wrong size");
        }
        t.data() = it->second;
    }
    return model;
}

void optimizer_from_checkpoint(const Checkpoint& ckpt, const SesmModel& model, AdamW& opt) {
    auto& m = opt.first_moments();
    auto& v = opt.second_moments();
    std::size_t pi = 0;
    for (const auto& [name, t] : model.params().items()) {
        const auto mi = ckpt.tensors.find("opt.m." + name);
        const auto vi = ckpt.tensors.find("opt.v." + name);
        if (mi == ckpt.tensors.end() || vi == ckpt.tensors.end()) {
            throw DataError("checkpoint has no optimizer state for " + name);
        }
        if (mi->second.size() != m[pi].size() || vi->second.size() != v[pi].size()) {
            throw DataError("checkpoint optimizer state for " + name + " has wrong size");
        }
        m[pi] = mi->second;
        v[pi] = vi->second;
        ++pi;
    }
    opt.set_step_count(ckpt.trainer.opt_step);
}

} // namespace sesm
