#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "msmem/memory.hpp"

namespace msmem {

struct PurifierConfig {
    int64_t in_channels = 1;
    int64_t image_size = 64;      ///< square inputs; must be divisible by 8
    int64_t top_channels = 64;    ///< C_t
    int64_t bottom_channels = 64; ///< C_b
    int64_t top_reduced = 4;      ///< reduce-conv width of the top memory
    int64_t bottom_reduced = 8;   ///< reduce-conv width of the bottom memory
    int64_t memory_items = 100;   ///< N, shared by both memories
    double gamma = 0.0;           ///< 0 selects 1/N
    double alpha_shrink = 1e-12;
    int64_t scorer_hidden = 0;    ///< 0 selects max(64, d/4) per memory
    Addressing addressing = Addressing::learned;
    bool normalize_query = true;  ///< see MemoryModuleOptions

    /// Throws std::invalid_argument on an unusable configuration.
    void validate() const;
};

// conv3 - ReLU - conv3 with an additive skip.
struct ResidualBlockImpl : torch::nn::Module {
    explicit ResidualBlockImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(ResidualBlock);

// 7 convolutions, the first two with stride 2: x -> z_t at 1/4 resolution.
struct TopEncoderImpl : torch::nn::Module {
    TopEncoderImpl(int64_t in_channels, int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d down1{nullptr}, down2{nullptr}, conv{nullptr};
    ResidualBlock res1{nullptr}, res2{nullptr};
};
TORCH_MODULE(TopEncoder);

// 6 convolutions, the first with stride 2: z_t -> z_b at 1/8 resolution.
struct BottomEncoderImpl : torch::nn::Module {
    BottomEncoderImpl(int64_t in_channels, int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d down{nullptr}, conv{nullptr};
    ResidualBlock res1{nullptr}, res2{nullptr};
};
TORCH_MODULE(BottomEncoder);

// conv + 2 residual blocks + stride-2 deconv: z_bm -> z'_bm at 1/4 resolution.
struct BottomDecoderImpl : torch::nn::Module {
    BottomDecoderImpl(int64_t in_channels, int64_t out_channels);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d conv{nullptr};
    ResidualBlock res1{nullptr}, res2{nullptr};
    torch::nn::ConvTranspose2d up{nullptr};
};
TORCH_MODULE(BottomDecoder);

// Mirror of the top encoder: z_tbf -> logits at full resolution (x4 upsampling).
struct TopDecoderImpl : torch::nn::Module {
    TopDecoderImpl(int64_t in_channels, int64_t channels, int64_t out_channels);
    torch::Tensor forward(const torch::Tensor& x);
    torch::nn::Conv2d conv{nullptr};
    ResidualBlock res1{nullptr}, res2{nullptr};
    torch::nn::ConvTranspose2d up1{nullptr}, up2{nullptr};
};
TORCH_MODULE(TopDecoder);

struct Encoding {
    torch::Tensor z_t;
    torch::Tensor z_b;
};

/// Every intermediate of one purification pass, in dataflow order.
struct PurifyResult {
    torch::Tensor image;     ///< x_bar in [0, 1]
    torch::Tensor w_top;     ///< sparse addressing of the top memory (undefined when bypassed)
    torch::Tensor w_bottom;
    torch::Tensor z_t, z_b;
    torch::Tensor z_bm;      ///< bottom memory output
    torch::Tensor z_bm_dec;  ///< D_b(z_bm)
    torch::Tensor z_tf;      ///< concat[z_t, D_b(z_bm)]
    torch::Tensor z_tm;      ///< top memory output
    torch::Tensor z_tbf;     ///< concat[z_tm, deconv(z_bm)]
};

// -------------------------------------------------
// Two-scale memory autoencoder.
// -------------------------------------------------
struct PurifierModelImpl : torch::nn::Module {
    explicit PurifierModelImpl(const PurifierConfig& config);

    Encoding encode(const torch::Tensor& x);
    PurifyResult purify(const torch::Tensor& x);
    torch::Tensor forward(const torch::Tensor& x) { return purify(x).image; }

    /// Weight of the final layer of the top decoder; the adaptive adversarial weight
    /// is computed from gradient norms taken with respect to it.
    torch::Tensor last_layer_weight() { return top_decoder->up2->weight; }

    /// Switches both memories between their configured scoring and another mode.
    void set_addressing(Addressing mode);
    /// Replaces the running query statistics of both memories by their exact average
    /// over `images` (train-mode batches of `batch_size`). No-op without query normalisation.
    void calibrate_query_norm(const torch::Tensor& images, int64_t batch_size);

    PurifierConfig config;
    TopEncoder top_encoder{nullptr};
    BottomEncoder bottom_encoder{nullptr};
    MemoryModule memory_bottom{nullptr};
    BottomDecoder bottom_decoder{nullptr};
    MemoryModule memory_top{nullptr};
    torch::nn::ConvTranspose2d upsample{nullptr};
    TopDecoder top_decoder{nullptr};
};
TORCH_MODULE(PurifierModel);

struct DiscriminatorConfig {
    int64_t in_channels = 1;
    int64_t base_channels = 64;
};

// -------------------------------------------------
// Patch discriminator: 5 convolutions; LeakyReLU after the first, BN + LeakyReLU
// after the middle three; the last emits one score per receptive-field patch.
// -------------------------------------------------
struct PatchDiscriminatorImpl : torch::nn::Module {
    explicit PatchDiscriminatorImpl(const DiscriminatorConfig& config);

    /// [B, C, H, W] -> score map [B, h, w].
    torch::Tensor forward(const torch::Tensor& x);

    DiscriminatorConfig config;
    torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, conv3{nullptr}, conv4{nullptr}, conv5{nullptr};
    torch::nn::BatchNorm2d bn2{nullptr}, bn3{nullptr}, bn4{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

}  // namespace msmem
