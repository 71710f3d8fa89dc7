#include "msmem/networks.hpp"

#include <stdexcept>
#include <string>

namespace msmem {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv3x3(int64_t in, int64_t out) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1));
}

nn::Conv2d down4x4(int64_t in, int64_t out) {
    return nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1));
}

nn::ConvTranspose2d up4x4(int64_t in, int64_t out) {
    return nn::ConvTranspose2d(nn::ConvTranspose2dOptions(in, out, 4).stride(2).padding(1));
}

}  // namespace

void PurifierConfig::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("purifier config: " + what); };
    if (in_channels < 1) fail("in_channels must be positive");
    if (image_size < 8 || image_size % 8 != 0) {
        fail("image_size must be a positive multiple of 8, got " + std::to_string(image_size));
    }
    if (top_channels < 2 || bottom_channels < 1) fail("channel widths must be positive (C_t >= 2)");
    if (top_reduced < 1 || bottom_reduced < 1) fail("reduced widths must be positive");
    if (memory_items < 2) fail("memory_items must be at least 2");
    if (alpha_shrink <= 0.0) fail("alpha_shrink must be positive");
    if (gamma != 0.0) {
        const double n = static_cast<double>(memory_items);
        if (gamma < (1.0 - 1e-9) / n || gamma > (3.0 + 1e-9) / n) fail("gamma must lie in [1/N, 3/N]");
    }
}

ResidualBlockImpl::ResidualBlockImpl(int64_t channels) {
    conv1 = register_module("conv1", conv3x3(channels, channels));
    conv2 = register_module("conv2", conv3x3(channels, channels));
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
    return x + conv2->forward(torch::relu(conv1->forward(torch::relu(x))));
}

TopEncoderImpl::TopEncoderImpl(int64_t in_channels, int64_t channels) {
    down1 = register_module("down1", down4x4(in_channels, channels / 2));
    down2 = register_module("down2", down4x4(channels / 2, channels));
    conv = register_module("conv", conv3x3(channels, channels));
    res1 = register_module("res1", ResidualBlock(channels));
    res2 = register_module("res2", ResidualBlock(channels));
}

torch::Tensor TopEncoderImpl::forward(const torch::Tensor& x) {
    auto h = torch::relu(down1->forward(x));
    h = torch::relu(down2->forward(h));
    h = conv->forward(h);
    h = res2->forward(res1->forward(h));
    return torch::relu(h);
}

BottomEncoderImpl::BottomEncoderImpl(int64_t in_channels, int64_t channels) {
    down = register_module("down", down4x4(in_channels, channels));
    conv = register_module("conv", conv3x3(channels, channels));
    res1 = register_module("res1", ResidualBlock(channels));
    res2 = register_module("res2", ResidualBlock(channels));
}

torch::Tensor BottomEncoderImpl::forward(const torch::Tensor& x) {
    auto h = torch::relu(down->forward(x));
    h = conv->forward(h);
    h = res2->forward(res1->forward(h));
    return torch::relu(h);
}

BottomDecoderImpl::BottomDecoderImpl(int64_t in_channels, int64_t out_channels) {
    conv = register_module("conv", conv3x3(in_channels, in_channels));
    res1 = register_module("res1", ResidualBlock(in_channels));
    res2 = register_module("res2", ResidualBlock(in_channels));
    up = register_module("up", up4x4(in_channels, out_channels));
}

torch::Tensor BottomDecoderImpl::forward(const torch::Tensor& x) {
    auto h = conv->forward(x);
    h = torch::relu(res2->forward(res1->forward(h)));
    return up->forward(h);
}

TopDecoderImpl::TopDecoderImpl(int64_t in_channels, int64_t channels, int64_t out_channels) {
    conv = register_module("conv", conv3x3(in_channels, channels));
    res1 = register_module("res1", ResidualBlock(channels));
    res2 = register_module("res2", ResidualBlock(channels));
    up1 = register_module("up1", up4x4(channels, channels / 2));
    up2 = register_module("up2", up4x4(channels / 2, out_channels));
}

torch::Tensor TopDecoderImpl::forward(const torch::Tensor& x) {
    auto h = conv->forward(x);
    h = torch::relu(res2->forward(res1->forward(h)));
    h = torch::relu(up1->forward(h));
    return up2->forward(h);
}

// PurifierModel

PurifierModelImpl::PurifierModelImpl(const PurifierConfig& c) : config(c) {
    config.validate();
    const int64_t ct = c.top_channels;
    const int64_t cb = c.bottom_channels;
    const int64_t top_side = c.image_size / 4;
    const int64_t bottom_side = c.image_size / 8;

    top_encoder = register_module("top_encoder", TopEncoder(c.in_channels, ct));
    bottom_encoder = register_module("bottom_encoder", BottomEncoder(ct, cb));

    MemoryModuleOptions bottom;
    bottom.in_channels = cb;
    bottom.reduced_channels = c.bottom_reduced;
    bottom.height = bottom.width = bottom_side;
    bottom.n_items = c.memory_items;
    bottom.gamma = c.gamma;
    bottom.alpha_shrink = c.alpha_shrink;
    bottom.scorer_hidden = c.scorer_hidden;
    bottom.addressing = c.addressing;
    bottom.normalize_query = c.normalize_query;
    memory_bottom = register_module("memory_bottom", MemoryModule(bottom));

    bottom_decoder = register_module("bottom_decoder", BottomDecoder(cb, ct));

    MemoryModuleOptions top = bottom;
    top.in_channels = 2 * ct;
    top.reduced_channels = c.top_reduced;
    top.height = top.width = top_side;
    memory_top = register_module("memory_top", MemoryModule(top));

    upsample = register_module("upsample", up4x4(cb, ct));
    top_decoder = register_module("top_decoder", TopDecoder(3 * ct, ct, c.in_channels));
}

Encoding PurifierModelImpl::encode(const torch::Tensor& x) {
    TORCH_CHECK(x.dim() == 4 && x.size(1) == config.in_channels && x.size(2) == config.image_size &&
                    x.size(3) == config.image_size,
                "purifier expects [B, ", config.in_channels, ", ", config.image_size, ", ",
                config.image_size, "], got ", x.sizes());
    Encoding e;
    e.z_t = top_encoder->forward(x);
    e.z_b = bottom_encoder->forward(e.z_t);
    return e;
}

PurifyResult PurifierModelImpl::purify(const torch::Tensor& x) {
    PurifyResult r;
    auto enc = encode(x);
    r.z_t = enc.z_t;
    r.z_b = enc.z_b;

    auto bottom = memory_bottom->forward(r.z_b);
    r.z_bm = bottom.map;
    r.w_bottom = bottom.weights;
    r.z_bm_dec = bottom_decoder->forward(r.z_bm);
    r.z_tf = torch::cat({r.z_t, r.z_bm_dec}, 1);

    auto top = memory_top->forward(r.z_tf);
    r.z_tm = top.map;
    r.w_top = top.weights;
    r.z_tbf = torch::cat({r.z_tm, upsample->forward(r.z_bm)}, 1);
    r.image = torch::sigmoid(top_decoder->forward(r.z_tbf));
    return r;
}

void PurifierModelImpl::set_addressing(Addressing mode) {
    memory_top->options.addressing = mode;
    memory_bottom->options.addressing = mode;
}

void PurifierModelImpl::calibrate_query_norm(const torch::Tensor& images, int64_t batch_size) {
    std::vector<torch::nn::BatchNorm1d> norms;
    for (auto* m : {memory_top.get(), memory_bottom.get()}) {
        if (m->query_norm) norms.push_back(m->query_norm);
    }
    if (norms.empty() || images.size(0) < 2) return;
    torch::NoGradGuard no_grad;
    const bool was_training = is_training();
    train();
    for (auto& n : norms) {
        n->reset_running_stats();
        n->options.momentum(std::nullopt);  // cumulative average over the pass
    }
    for (int64_t i = 0; i < images.size(0);) {
        int64_t count = std::min(batch_size, images.size(0) - i);
        if (images.size(0) - i - count == 1) ++count;
        purify(images.narrow(0, i, count));
        i += count;
    }
    for (auto& n : norms) n->options.momentum(0.1);
    train(was_training);
}

// PatchDiscriminator

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const DiscriminatorConfig& c) : config(c) {
    TORCH_CHECK(c.in_channels >= 1 && c.base_channels >= 1, "discriminator widths must be positive");
    const int64_t b = c.base_channels;
    conv1 = register_module("conv1", down4x4(c.in_channels, b));
    conv2 = register_module("conv2", down4x4(b, 2 * b));
    conv3 = register_module("conv3", down4x4(2 * b, 4 * b));
    conv4 = register_module("conv4", nn::Conv2d(nn::Conv2dOptions(4 * b, 8 * b, 4).padding(1)));
    conv5 = register_module("conv5", nn::Conv2d(nn::Conv2dOptions(8 * b, 1, 4).padding(1)));
    bn2 = register_module("bn2", nn::BatchNorm2d(2 * b));
    bn3 = register_module("bn3", nn::BatchNorm2d(4 * b));
    bn4 = register_module("bn4", nn::BatchNorm2d(8 * b));
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& x) {
    auto lrelu = [](const torch::Tensor& t) { return torch::leaky_relu(t, 0.2); };
    auto h = lrelu(conv1->forward(x));
    h = lrelu(bn2->forward(conv2->forward(h)));
    h = lrelu(bn3->forward(conv3->forward(h)));
    h = lrelu(bn4->forward(conv4->forward(h)));
    return conv5->forward(h).squeeze(1);
}

}  // namespace msmem
