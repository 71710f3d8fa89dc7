#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "msmem/checkpoint.hpp"
#include "msmem/data.hpp"
#include "msmem/networks.hpp"
#include "msmem/objectives.hpp"

namespace msmem {

struct TrainConfig {
    double lr_init = 1e-3;
    double lr_final = 1e-4;
    int64_t warmup_epochs = 10;
    double weight_decay = 0.05;
    int64_t batch_size = 32;
    int64_t max_epochs = 300;
    uint64_t seed = 0;
    double alpha = kEntropyWeight;
    double scorer_lr_scale = 1.0;  ///< step-size multiplier for the learned scorers
    int64_t checkpoint_every = 0;  ///< 0 disables intermediate checkpoints
    bool adversarial = true;       ///< train the patch discriminator and use beta * L_G
    int64_t adversarial_start = -1;///< first epoch with the GAN terms; -1 selects warmup_epochs
    double adversarial_weight = 1.0; ///< multiplies the adaptive beta

    void validate() const;
    int64_t gan_start() const { return adversarial_start >= 0 ? adversarial_start : warmup_epochs; }
};

/// Linear warmup to lr_init over warmup_epochs ((e + 1) / warmup), then cosine decay
/// from lr_init at e = warmup_epochs to lr_final at e = max_epochs.
double learning_rate_at(const TrainConfig& config, int64_t epoch);

/// A non-finite loss; `component` names the offending LossReport field.
class TrainingError : public std::runtime_error {
public:
    TrainingError(std::string component, const std::string& message)
        : std::runtime_error(message), component(std::move(component)) {}
    std::string component;
};

struct EpochRecord {
    int64_t epoch = 0;
    double learning_rate = 0.0;
    LossReport losses;
};

/// Header and row of the per-epoch metrics CSV.
std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRecord& record);

struct FitOptions {
    std::string metrics_path;     ///< empty: no metrics file
    std::string checkpoint_dir;   ///< empty: no intermediate checkpoints
    std::string config_hash;
    std::string config_json;
};

struct FitResult {
    std::vector<EpochRecord> history;
    bool stopped_early = false;
    std::string error;
};

// -------------------------------------------------
// Owns the generator (purifier), the patch discriminator, the frozen feature
// extractor and both AdamW optimisers. The trainer is the only writer of their
// parameters.
// -------------------------------------------------
class Trainer {
public:
    Trainer(const PurifierConfig& purifier, const DiscriminatorConfig& discriminator,
            const FeatureExtractorConfig& extractor, const TrainConfig& train);

    /// One discriminator update (hinge) then one generator update on a clean batch.
    LossReport train_step(const torch::Tensor& batch);

    /// All batches of one epoch in a seed-determined order; returns the batch-mean report.
    EpochRecord train_epoch(const Dataset& data);

    /// Runs epochs until max_epochs, appending to the metrics file.
    FitResult fit(const Dataset& data, const FitOptions& options = {});

    void save(const std::string& path, const std::string& config_hash, const std::string& config_json) const;
    /// Restores parameters, optimiser state and the epoch counter.
    CheckpointMeta load(const std::string& path);

    int64_t epoch() const { return epoch_; }
    const TrainConfig& config() const { return train_; }
    TrainConfig& config() { return train_; }
    PurifierModel& purifier() { return purifier_; }
    PatchDiscriminator& discriminator() { return discriminator_; }
    FeatureExtractor& extractor() { return extractor_; }

private:
    void set_learning_rate(double lr);
    bool gan_active() const;

    TrainConfig train_;
    PurifierModel purifier_{nullptr};
    PatchDiscriminator discriminator_{nullptr};
    FeatureExtractor extractor_{nullptr};
    std::unique_ptr<torch::optim::AdamW> gen_optimizer_;
    std::unique_ptr<torch::optim::AdamW> disc_optimizer_;
    int64_t epoch_ = 0;
};

}  // namespace msmem
