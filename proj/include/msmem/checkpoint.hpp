#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace msmem {

/// Checkpoint container: one libtorch archive (zip) holding
///   meta/version, meta/kind, meta/config_hash, meta/config, meta/epoch
/// and one sub-archive per named module or optimizer.
inline constexpr const char* kCheckpointVersion = "msmem-checkpoint-v1";

struct CheckpointMeta {
    std::string version = kCheckpointVersion;
    std::string kind;         ///< "purifier", "classifier", ...
    std::string config_hash;
    std::string config_json;  ///< the model section that built the modules
    int64_t epoch = 0;
};

using NamedModules = std::vector<std::pair<std::string, torch::nn::Module*>>;
using NamedOptimizers = std::vector<std::pair<std::string, torch::optim::Optimizer*>>;

void save_checkpoint(const std::string& path, const CheckpointMeta& meta, const NamedModules& modules,
                     const NamedOptimizers& optimizers = {});

/// Reads only the metadata block.
CheckpointMeta read_checkpoint_meta(const std::string& path);

/// Loads into already-constructed modules. Throws std::runtime_error when the version tag
/// is missing, a named entry is absent, or a stored tensor shape differs from the module's.
CheckpointMeta load_checkpoint(const std::string& path, const NamedModules& modules,
                               const NamedOptimizers& optimizers = {});

}  // namespace msmem
