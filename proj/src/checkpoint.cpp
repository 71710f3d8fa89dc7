#include "msmem/checkpoint.hpp"

#include <map>
#include <stdexcept>

namespace msmem {

namespace {

void write_string(torch::serialize::OutputArchive& archive, const std::string& key, const std::string& value) {
    archive.write(key, c10::IValue(value));
}

std::string read_string(torch::serialize::InputArchive& archive, const std::string& key) {
    c10::IValue value;
    if (!archive.try_read(key, value) || !value.isString()) {
        throw std::runtime_error("checkpoint: missing '" + key + "'");
    }
    return value.toStringRef();
}

CheckpointMeta read_meta(torch::serialize::InputArchive& archive) {
    CheckpointMeta meta;
    meta.version = read_string(archive, "meta/version");
    if (meta.version != kCheckpointVersion) {
        throw std::runtime_error("checkpoint: unsupported version '" + meta.version + "'");
    }
    meta.kind = read_string(archive, "meta/kind");
    meta.config_hash = read_string(archive, "meta/config_hash");
    meta.config_json = read_string(archive, "meta/config");
    c10::IValue epoch;
    if (!archive.try_read("meta/epoch", epoch) || !epoch.isInt()) {
        throw std::runtime_error("checkpoint: missing 'meta/epoch'");
    }
    meta.epoch = epoch.toInt();
    return meta;
}

std::map<std::string, std::vector<int64_t>> tensor_shapes(const torch::nn::Module& module) {
    std::map<std::string, std::vector<int64_t>> shapes;
    for (const auto& p : module.named_parameters()) shapes["p:" + p.key()] = p.value().sizes().vec();
    for (const auto& b : module.named_buffers()) shapes["b:" + b.key()] = b.value().sizes().vec();
    return shapes;
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta, const NamedModules& modules,
                     const NamedOptimizers& optimizers) {
    torch::serialize::OutputArchive archive;
    write_string(archive, "meta/version", kCheckpointVersion);
    write_string(archive, "meta/kind", meta.kind);
    write_string(archive, "meta/config_hash", meta.config_hash);
    write_string(archive, "meta/config", meta.config_json);
    archive.write("meta/epoch", c10::IValue(meta.epoch));
    for (const auto& [name, module] : modules) {
        torch::serialize::OutputArchive sub;
        module->save(sub);
        archive.write("module/" + name, sub);
    }
    for (const auto& [name, optimizer] : optimizers) {
        torch::serialize::OutputArchive sub;
        optimizer->save(sub);
        archive.write("optimizer/" + name, sub);
    }
    archive.save_to(path);
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    torch::serialize::InputArchive archive;
    archive.load_from(path);
    return read_meta(archive);
}

CheckpointMeta load_checkpoint(const std::string& path, const NamedModules& modules,
                               const NamedOptimizers& optimizers) {
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(path);
    } catch (const c10::Error& e) {
        throw std::runtime_error("checkpoint: cannot read " + path);
    }
    auto meta = read_meta(archive);
    for (const auto& [name, module] : modules) {
        torch::serialize::InputArchive sub;
        if (!archive.try_read("module/" + name, sub)) {
            throw std::runtime_error("checkpoint: missing module '" + name + "'");
        }
        const auto before = tensor_shapes(*module);
        try {
            module->load(sub);
        } catch (const c10::Error& e) {
            throw std::runtime_error("checkpoint: module '" + name + "' does not match: " + e.what_without_backtrace());
        }
        if (tensor_shapes(*module) != before) {
            throw std::runtime_error("checkpoint: module '" + name + "' has different tensor shapes than the configured model");
        }
    }
    for (const auto& [name, optimizer] : optimizers) {
        torch::serialize::InputArchive sub;
        if (!archive.try_read("optimizer/" + name, sub)) {
            throw std::runtime_error("checkpoint: missing optimizer '" + name + "'");
        }
        optimizer->load(sub);
    }
    return meta;
}

}  // namespace msmem
