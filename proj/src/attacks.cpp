#include "msmem/attacks.hpp"

#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace msmem {

AttackFamily parse_attack_family(std::string_view name) {
    if (name == "fgsm") return AttackFamily::fgsm;
    if (name == "pgd") return AttackFamily::pgd;
    if (name == "spsa") return AttackFamily::spsa;
    throw std::invalid_argument("unknown attack family '" + std::string(name) + "'");
}

std::string to_string(AttackFamily family) {
    switch (family) {
        case AttackFamily::fgsm: return "fgsm";
        case AttackFamily::pgd: return "pgd";
        case AttackFamily::spsa: return "spsa";
    }
    return "unknown";
}

void AttackSpec::validate() const {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("attack epsilon must be >= 0");
    if (family != AttackFamily::fgsm && steps < 1) throw std::invalid_argument("attack steps must be >= 1");
    if (step_size < 0.0) throw std::invalid_argument("attack step_size must be >= 0");
    if (family == AttackFamily::spsa) {
        if (batch_q < 1) throw std::invalid_argument("spsa batch_q must be >= 1");
        if (!(perturbation_scale > 0.0)) throw std::invalid_argument("spsa perturbation_scale must be > 0");
        if (!(learning_rate >= 0.0)) throw std::invalid_argument("spsa learning_rate must be >= 0");
    }
}

std::string AttackSpec::descriptor() const {
    if (family == AttackFamily::fgsm) return "fgsm";
    return to_string(family) + "-" + std::to_string(steps);
}

torch::Tensor project_linf(const torch::Tensor& candidate, const torch::Tensor& origin, double epsilon) {
    torch::NoGradGuard no_grad;
    // Clamp in double, round once, then undo any rounding that left the budget.
    const auto reference = origin.to(torch::kFloat64);
    auto exact = torch::max(torch::min(candidate.to(torch::kFloat64), torch::clamp_max(reference + epsilon, 1.0)),
                            torch::clamp_min(reference - epsilon, 0.0));
    auto out = exact.to(candidate.scalar_type());
    for (int i = 0; i < 4; ++i) {
        auto over = (out.to(torch::kFloat64) - reference).abs() > epsilon;
        if (!over.any().item<bool>()) break;
        out = torch::where(over, torch::nextafter(out, origin.to(out.scalar_type())), out);
    }
    return out;
}

namespace {

torch::Tensor input_gradient(const LossFn& loss, const torch::Tensor& images, const torch::Tensor& labels) {
    torch::AutoGradMode enable(true);
    auto x = images.detach().clone().requires_grad_(true);
    auto value = loss(x, labels).sum();
    return torch::autograd::grad({value}, {x})[0];
}

torch::Generator seeded(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

torch::Tensor rademacher(at::IntArrayRef shape, torch::Generator& gen, const torch::TensorOptions& opts) {
    return torch::randint(0, 2, shape, gen, opts) * 2.0 - 1.0;
}

}  // namespace

torch::Tensor per_sample_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels) {
    return torch::nn::functional::cross_entropy(
        logits, labels, torch::nn::functional::CrossEntropyFuncOptions().reduction(torch::kNone));
}

torch::Tensor fgsm(const LossFn& loss, const torch::Tensor& images, const torch::Tensor& labels,
                   const AttackSpec& spec) {
    spec.validate();
    if (spec.epsilon == 0.0) return images.detach().clone();
    auto grad = input_gradient(loss, images, labels);
    torch::NoGradGuard no_grad;
    return project_linf(images + spec.epsilon * grad.sign(), images, spec.epsilon);
}

torch::Tensor pgd(const LossFn& loss, const torch::Tensor& images, const torch::Tensor& labels,
                  const AttackSpec& spec) {
    spec.validate();
    const auto origin = images.detach();
    if (spec.epsilon == 0.0) return origin.clone();
    const double step = spec.step_size > 0.0 ? spec.step_size : spec.epsilon / 4.0;

    auto adv = origin.clone();
    if (spec.random_start) {
        auto gen = seeded(spec.seed);
        auto noise = torch::rand(origin.sizes(), gen, origin.options()) * (2.0 * spec.epsilon) - spec.epsilon;
        adv = project_linf(origin + noise, origin, spec.epsilon);
    }
    for (int64_t i = 0; i < spec.steps; ++i) {
        auto grad = input_gradient(loss, adv, labels);
        torch::NoGradGuard no_grad;
        adv = project_linf(adv + step * grad.sign(), origin, spec.epsilon);
    }
    return adv;
}

torch::Tensor spsa_gradient(const BatchObjective& objective, const torch::Tensor& x, double scale,
                            int64_t probes, torch::Generator& generator, int64_t chunk) {
    torch::NoGradGuard no_grad;
    auto estimate = torch::zeros_like(x);
    std::vector<int64_t> shape{0};
    shape.insert(shape.end(), x.sizes().begin(), x.sizes().end());
    for (int64_t done = 0; done < probes; done += chunk) {
        const int64_t n = std::min(chunk, probes - done);
        shape[0] = n;
        auto v = rademacher(shape, generator, x.options());
        auto points = torch::cat({x.unsqueeze(0) + scale * v, x.unsqueeze(0) - scale * v}, 0);
        auto values = objective(points);
        auto diff = (values.narrow(0, 0, n) - values.narrow(0, n, n)) / (2.0 * scale);
        std::vector<int64_t> bshape(x.dim() + 1, 1);
        bshape[0] = n;
        estimate += (diff.reshape(bshape) * v).sum(0);
    }
    return estimate / static_cast<double>(probes);
}

SpsaResult spsa(const LogitFn& logits, const torch::Tensor& images, const torch::Tensor& labels,
                const AttackSpec& spec, int64_t chunk) {
    spec.validate();
    torch::NoGradGuard no_grad;
    const auto origin = images.detach();
    SpsaResult result{origin.clone(), spec.steps * spec.batch_q * 2};
    if (spec.epsilon == 0.0) return result;

    auto gen = seeded(spec.seed);
    const int64_t batch = origin.size(0);
    const int64_t probes_per_chunk = std::max<int64_t>(1, chunk / 2);
    auto adv = origin.clone();
    for (int64_t step = 0; step < spec.steps; ++step) {
        std::vector<torch::Tensor> estimates;
        estimates.reserve(batch);
        for (int64_t b = 0; b < batch; ++b) {
            auto label = labels[b];
            BatchObjective objective = [&](const torch::Tensor& points) {
                auto repeated = label.expand({points.size(0)});
                return per_sample_cross_entropy(logits(points), repeated);
            };
            estimates.push_back(spsa_gradient(objective, adv[b], spec.perturbation_scale, spec.batch_q,
                                              gen, probes_per_chunk));
        }
        auto grad = torch::stack(estimates);
        adv = project_linf(adv + spec.learning_rate * grad.sign(), origin, spec.epsilon);
    }
    result.images = adv;
    return result;
}

}  // namespace msmem
