#include "msmem/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace msmem {

namespace nn = torch::nn;

BasicBlockImpl::BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    conv1 = register_module(
        "conv1", nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
    bn1 = register_module("bn1", nn::BatchNorm2d(out));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1).bias(false)));
    bn2 = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
        shortcut = register_module(
            "shortcut", nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)));
        shortcut_bn = register_module("shortcut_bn", nn::BatchNorm2d(out));
    }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
    auto h = torch::relu(bn1->forward(conv1->forward(x)));
    h = bn2->forward(conv2->forward(h));
    auto skip = shortcut ? shortcut_bn->forward(shortcut->forward(x)) : x;
    return torch::relu(h + skip);
}

FeatureExtractorImpl::FeatureExtractorImpl(const FeatureExtractorConfig& c) : config(c) {
    TORCH_CHECK(c.base_width >= 1 && c.input_channels >= 1, "extractor widths must be positive");
    const int64_t w = c.base_width;
    stem_conv = register_module(
        "stem_conv",
        nn::Conv2d(nn::Conv2dOptions(c.input_channels, w, 7).stride(2).padding(3).bias(false)));
    stem_bn = register_module("stem_bn", nn::BatchNorm2d(w));
    auto stage = [](int64_t in, int64_t out, int64_t stride) {
        return nn::Sequential(BasicBlock(in, out, stride), BasicBlock(out, out, 1));
    };
    stage1 = register_module("stage1", stage(w, w, 1));
    stage2 = register_module("stage2", stage(w, 2 * w, 2));
    stage3 = register_module("stage3", stage(2 * w, 4 * w, 2));
    stage4 = register_module("stage4", stage(4 * w, 8 * w, 2));

    if (c.weights_path.empty()) {
        // Kaiming-normal (fan-in) keeps activations at unit scale through the
        // frozen stack, since the BN layers hold identity running statistics.
        auto gen = at::make_generator<at::CPUGeneratorImpl>(c.seed);
        torch::NoGradGuard no_grad;
        for (auto& m : modules(/*include_self=*/false)) {
            if (auto* conv = m->as<nn::Conv2dImpl>()) {
                auto& weight = conv->weight;
                const double fan_in = static_cast<double>(weight[0].numel());
                weight.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
            }
        }
    } else {
        torch::serialize::InputArchive archive;
        archive.load_from(c.weights_path);
        load(archive);
    }
    freeze();
}

void FeatureExtractorImpl::freeze() {
    for (auto& p : parameters()) p.set_requires_grad(false);
    eval();
}

std::vector<torch::Tensor> FeatureExtractorImpl::taps(const torch::Tensor& images) {
    auto x = images;
    if (x.size(1) != config.input_channels) {
        TORCH_CHECK(x.size(1) == 1, "extractor expects 1 or ", config.input_channels, " channels");
        x = x.expand({x.size(0), config.input_channels, x.size(2), x.size(3)});
    }
    std::vector<torch::Tensor> out;
    out.reserve(kTaps);
    auto h = torch::relu(stem_bn->forward(stem_conv->forward(x)));
    h = torch::max_pool2d(h, 3, 2, 1);
    out.push_back(h);
    h = stage1->forward(h);
    out.push_back(h);
    h = stage2->forward(h);
    out.push_back(h);
    h = stage3->forward(h);
    out.push_back(h);
    h = stage4->forward(h);
    out.push_back(h);
    return out;
}

torch::Tensor l1_loss(const torch::Tensor& x, const torch::Tensor& x_bar) {
    if (x.sizes() != x_bar.sizes()) throw std::invalid_argument("l1_loss: shape mismatch");
    return (x - x_bar).abs().mean();
}

torch::Tensor perceptual_loss(const std::vector<torch::Tensor>& taps_x,
                              const std::vector<torch::Tensor>& taps_x_bar) {
    if (taps_x.empty() || taps_x.size() != taps_x_bar.size()) {
        throw std::invalid_argument("perceptual_loss: tap count mismatch");
    }
    torch::Tensor sum;
    for (size_t i = 0; i < taps_x.size(); ++i) {
        if (taps_x[i].sizes() != taps_x_bar[i].sizes()) {
            throw std::invalid_argument("perceptual_loss: tap shape mismatch");
        }
        auto term = (taps_x[i] - taps_x_bar[i]).pow(2).mean();
        sum = sum.defined() ? sum + term : term;
    }
    return sum / static_cast<double>(taps_x.size());
}

torch::Tensor perceptual_loss(FeatureExtractorImpl& extractor, const torch::Tensor& x,
                              const torch::Tensor& x_bar) {
    if (x.sizes() != x_bar.sizes()) throw std::invalid_argument("perceptual_loss: shape mismatch");
    return perceptual_loss(extractor.taps(x), extractor.taps(x_bar));
}

torch::Tensor hinge_disc_loss(const torch::Tensor& d_real, const torch::Tensor& d_fake) {
    return torch::relu(1.0 - d_real).mean() + torch::relu(1.0 + d_fake).mean();
}

torch::Tensor wgan_gen_loss(const torch::Tensor& d_fake) { return -d_fake.mean(); }

torch::Tensor mean_addressing_entropy(const torch::Tensor& weights) {
    if (!weights.defined()) return torch::zeros({});
    auto positive = weights > 0;
    auto safe = torch::where(positive, weights, torch::ones_like(weights));
    return -(weights * torch::log(safe)).sum(-1).mean();
}

double adaptive_beta(double grad_rec_norm, double grad_adv_norm, double sigma) {
    if (grad_rec_norm < 0.0 || grad_adv_norm < 0.0) {
        throw std::invalid_argument("adaptive_beta: gradient norms must be non-negative");
    }
    const double beta = grad_rec_norm / (grad_adv_norm + sigma);
    return std::clamp(beta, 0.0, kBetaMax);
}

std::vector<std::string> LossReport::field_names() {
    return {"l1", "perceptual", "entropy_top", "entropy_bottom", "gen_adv", "disc", "beta", "total"};
}

std::vector<double> LossReport::values() const {
    return {l1, perceptual, entropy_top, entropy_bottom, gen_adv, disc, beta, total};
}

std::string LossReport::first_non_finite() const {
    const auto names = field_names();
    const auto vals = values();
    for (size_t i = 0; i < vals.size(); ++i) {
        if (!std::isfinite(vals[i])) return names[i];
    }
    return {};
}

bool LossReport::finite() const { return first_non_finite().empty(); }

}  // namespace msmem
