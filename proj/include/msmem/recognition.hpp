#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "msmem/attacks.hpp"
#include "msmem/data.hpp"

namespace msmem {

struct ClassifierConfig {
    int64_t in_channels = 1;
    int64_t image_size = 64;
    int64_t width = 32;
    int64_t embedding_dim = 128;
    int64_t num_classes = 50;

    void validate() const;
};

// -------------------------------------------------
// Two conv blocks -> embedding -> class head.
// Matching uses the embedding; attacks use the head's logits.
// -------------------------------------------------
struct RecognitionModelImpl : torch::nn::Module {
    explicit RecognitionModelImpl(const ClassifierConfig& config);

    torch::Tensor embed(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x);

    ClassifierConfig config;
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
    torch::nn::Linear embedding{nullptr}, head{nullptr};
};
TORCH_MODULE(RecognitionModel);

struct ClassifierTrainConfig {
    int64_t epochs = 20;
    int64_t batch_size = 32;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    uint64_t seed = 0;
    /// Training-time augmentation: each image is box-blurred (3x3) with this
    /// probability, then Gaussian noise of std `augment_noise` is added.
    double augment_blur = 0.0;
    double augment_noise = 0.0;
};

/// Cross-entropy training with AdamW; returns the mean loss of each epoch.
std::vector<double> train_classifier(RecognitionModelImpl& model, const Dataset& train,
                                     const ClassifierTrainConfig& config);

/// Registered templates: one embedding per gallery image plus per-class means.
struct Gallery {
    torch::Tensor labels;       ///< [G]
    torch::Tensor embeddings;   ///< [G, E]
    std::vector<int64_t> class_ids;  ///< ascending
    torch::Tensor class_means;  ///< [K, E], row k is class class_ids[k]
};

Gallery enroll_embeddings(const torch::Tensor& embeddings, const torch::Tensor& labels);
/// Throws std::invalid_argument on an empty gallery.
Gallery enroll(RecognitionModelImpl& model, const Dataset& gallery, int64_t batch_size = 128);

/// Label of the class mean with the highest cosine similarity, lowest class on ties.
/// Throws std::invalid_argument("zero-norm embedding") on a zero probe or mean.
torch::Tensor match_embeddings(const Gallery& gallery, const torch::Tensor& probe_embeddings);
torch::Tensor match(RecognitionModelImpl& model, const Gallery& gallery, const torch::Tensor& probes,
                    int64_t batch_size = 128);

/// Eval-mode embeddings in batches, without gradients.
torch::Tensor embed_all(RecognitionModelImpl& model, const torch::Tensor& images, int64_t batch_size = 128);

struct DefenseRow {
    std::string classifier_id;
    std::string attack;   ///< "clean" or the attack descriptor
    double epsilon = 0.0;
    std::string defense;  ///< "none", "msmemorygan", "cosine-ablation", ...
    double accuracy = 0.0;
    int64_t n_eval = 0;
    int64_t correct = 0;
};

struct DefenseReport {
    std::vector<DefenseRow> rows;

    /// Header `classifier_id,attack,epsilon,defense,accuracy,n_eval` then one line per row.
    std::string to_csv() const;
    /// Aligned text table with the same columns.
    std::string render_table() const;
    const DefenseRow* find(const std::string& attack, double epsilon, const std::string& defense) const;
};

using PurifyFn = std::function<torch::Tensor(const torch::Tensor& images)>;

struct Defense {
    std::string name;
    PurifyFn purify;
};

/// Wraps a purifier-like module as a batched, no-grad, eval-mode PurifyFn.
template <class Module>
PurifyFn purify_with(Module model, int64_t batch_size = 64) {
    return [model, batch_size](const torch::Tensor& images) mutable {
        torch::NoGradGuard no_grad;
        model->eval();
        std::vector<torch::Tensor> out;
        for (int64_t i = 0; i < images.size(0); i += batch_size) {
            out.push_back(model->forward(images.narrow(0, i, std::min(batch_size, images.size(0) - i))));
        }
        return torch::cat(out);
    };
}

/// Adversarial examples for `spec` against the classifier (cross-entropy on its logits).
torch::Tensor run_attack(RecognitionModelImpl& model, const AttackSpec& spec, const torch::Tensor& images,
                         const torch::Tensor& labels, int64_t batch_size = 64);

/// For each attack: accuracy on clean probes (one row), attacked probes, and every
/// defense applied to the attacked probes.
DefenseReport evaluate_defense(RecognitionModelImpl& model, const Gallery& gallery,
                               const std::string& classifier_id, const std::vector<Defense>& defenses,
                               const std::vector<AttackSpec>& attacks, const Dataset& test);

}  // namespace msmem
