#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "msmem/attacks.hpp"
#include "msmem/data.hpp"
#include "msmem/networks.hpp"
#include "msmem/objectives.hpp"
#include "msmem/recognition.hpp"
#include "msmem/trainer.hpp"

namespace msmem {

/// Invalid or missing configuration field; `field` is the dotted JSON path.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& message)
        : std::runtime_error(field + ": " + message), field(std::move(field)) {}
    std::string field;
};

struct DataConfig {
    std::string source = "synthetic";  ///< "synthetic" or "directory"
    SynthOptions synthetic;
    DatasetManifest manifest;          ///< used when source == "directory"
    int64_t train_k = 15;
    int64_t test_k = 5;

    int64_t image_size() const { return source == "synthetic" ? synthetic.size : manifest.image_size; }
};

struct ModelConfig {
    PurifierConfig purifier;
    DiscriminatorConfig discriminator;
    FeatureExtractorConfig extractor;
};

struct ClassifierSection {
    std::string id = "cnn";
    ClassifierConfig model;
    ClassifierTrainConfig train;
};

struct RunConfig {
    uint64_t seed = 0;
    std::string output_dir;
    DataConfig data;
    ModelConfig model;
    TrainConfig train;
    ClassifierSection classifier;
    std::vector<AttackSpec> attacks;
    bool cosine_ablation = false;
};

/// Parses and fully validates. Required: output_dir, data.source. Unknown keys are errors.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Every field with defaults resolved.
nlohmann::json to_json(const RunConfig& config);
nlohmann::json purifier_model_json(const RunConfig& config);
nlohmann::json classifier_model_json(const RunConfig& config);

/// 64-bit FNV-1a of the canonical JSON text, as 16 hex digits.
std::string fnv1a_hex(const std::string& text);
/// Hash of the effective config without output_dir.
std::string config_hash(const RunConfig& config);

/// Propagates data/seed choices into model and training sections (image size,
/// class count, seeds). Called by parse_run_config and after CLI overrides.
void resolve(RunConfig& config);

/// Synthetic data or the directory manifest, split per class.
DatasetSplit load_data(const RunConfig& config);

}  // namespace msmem
