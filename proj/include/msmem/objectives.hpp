#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace msmem {

// -------------------------------------------------
// Frozen 18-layer residual network exposing five taps: the stem and the four stages.
// Parameters come from a weight archive when given, otherwise from a seeded
// random initialisation of the same topology.
// -------------------------------------------------
struct FeatureExtractorConfig {
    int64_t base_width = 64;    ///< 64 is the standard ResNet-18 width
    int64_t input_channels = 3; ///< single-channel images are replicated to this count
    uint64_t seed = 1234;
    std::string weights_path;   ///< optional torch::save archive of this module
};

struct BasicBlockImpl : torch::nn::Module {
    BasicBlockImpl(int64_t in, int64_t out, int64_t stride);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, shortcut{nullptr};
    torch::nn::BatchNorm2d bn1{nullptr}, bn2{nullptr}, shortcut_bn{nullptr};
};
TORCH_MODULE(BasicBlock);

struct FeatureExtractorImpl : torch::nn::Module {
    static constexpr int kTaps = 5;

    explicit FeatureExtractorImpl(const FeatureExtractorConfig& config);

    /// Returns the five feature maps. Gradients flow to the input, never to the parameters.
    std::vector<torch::Tensor> taps(const torch::Tensor& images);

    /// Re-freezes parameters and restores evaluation mode.
    void freeze();

    FeatureExtractorConfig config;
    torch::nn::Conv2d stem_conv{nullptr};
    torch::nn::BatchNorm2d stem_bn{nullptr};
    torch::nn::Sequential stage1{nullptr}, stage2{nullptr}, stage3{nullptr}, stage4{nullptr};
};
TORCH_MODULE(FeatureExtractor);

/// Mean absolute pixel error. Throws std::invalid_argument on a shape mismatch.
torch::Tensor l1_loss(const torch::Tensor& x, const torch::Tensor& x_bar);

/// (1/T) sum_i mean((v_i - v_bar_i)^2) over precomputed taps.
torch::Tensor perceptual_loss(const std::vector<torch::Tensor>& taps_x,
                              const std::vector<torch::Tensor>& taps_x_bar);
torch::Tensor perceptual_loss(FeatureExtractorImpl& extractor, const torch::Tensor& x,
                              const torch::Tensor& x_bar);

/// mean(max(0, 1 - d_real)) + mean(max(0, 1 + d_fake)).
torch::Tensor hinge_disc_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake);

/// -mean(d_fake).
torch::Tensor wgan_gen_loss(const torch::Tensor& d_fake);

/// Entropy of sparse addressing weights [B, N], averaged over the batch.
/// An undefined tensor (bypassed memory) contributes 0.
torch::Tensor mean_addressing_entropy(const torch::Tensor& weights);

inline constexpr double kBetaSigma = 1e-4;
inline constexpr double kBetaMax = 1e4;
inline constexpr double kEntropyWeight = 0.0002;

/// beta = rec / (adv + sigma), clamped to [0, 1e4]. Throws on a negative norm.
double adaptive_beta(double grad_rec_norm, double grad_adv_norm, double sigma = kBetaSigma);

/// Generator objective L1 + Lp + alpha * Ls + beta * L_G. Works for doubles and tensors.
template <class T>
T total_loss(const T& l1, const T& perceptual, const T& entropy, const T& gen_adv,
             double alpha = kEntropyWeight, double beta = 0.0) {
    return l1 + perceptual + entropy * alpha + gen_adv * beta;
}

struct LossReport {
    double l1 = 0.0;
    double perceptual = 0.0;
    double entropy_top = 0.0;
    double entropy_bottom = 0.0;
    double gen_adv = 0.0;
    double disc = 0.0;
    double beta = 0.0;
    double total = 0.0;

    static std::vector<std::string> field_names();
    std::vector<double> values() const;
    bool finite() const;
    /// Name of the first non-finite field, or empty.
    std::string first_non_finite() const;
};

}  // namespace msmem
