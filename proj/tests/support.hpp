#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include <ATen/CPUGeneratorImpl.h>

namespace msmem::testing {

inline torch::Generator seeded(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

/// Central finite differences of a scalar function with respect to every element of `t`
/// (modified in place and restored).
inline torch::Tensor numeric_gradient(const std::function<double()>& f, torch::Tensor t, double step = 1e-4) {
    torch::NoGradGuard no_grad;
    auto grad = torch::zeros_like(t);
    auto flat = t.view(-1);
    auto gflat = grad.view(-1);
    for (int64_t i = 0; i < flat.numel(); ++i) {
        const double orig = flat[i].item<double>();
        flat[i] = orig + step;
        const double plus = f();
        flat[i] = orig - step;
        const double minus = f();
        flat[i] = orig;
        gflat[i] = (plus - minus) / (2.0 * step);
    }
    return grad;
}

/// ||a - n|| / ||n||, with a floor on the denominator.
inline double relative_error(const torch::Tensor& analytic, const torch::Tensor& numeric) {
    const double denom = std::max(numeric.norm().item<double>(), 1e-10);
    return (analytic - numeric).norm().item<double>() / denom;
}

}  // namespace msmem::testing
