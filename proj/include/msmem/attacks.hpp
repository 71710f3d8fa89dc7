#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace msmem {

enum class AttackFamily { fgsm, pgd, spsa };

AttackFamily parse_attack_family(std::string_view name);
std::string to_string(AttackFamily family);

struct AttackSpec {
    AttackFamily family = AttackFamily::fgsm;
    double epsilon = 0.05;           ///< L-infinity budget
    int64_t steps = 10;              ///< PGD / SPSA iterations
    double step_size = 0.0;          ///< PGD; 0 selects epsilon / 4
    bool random_start = true;        ///< PGD
    double learning_rate = 0.01;     ///< SPSA signed step
    double perturbation_scale = 0.01;///< SPSA probe radius
    int64_t batch_q = 32;            ///< SPSA probes per step (each probe costs 2 queries)
    uint64_t seed = 0;

    void validate() const;
    /// Short human-readable descriptor such as "fgsm" or "pgd-10".
    std::string descriptor() const;
};

/// Per-sample loss to ascend, [B] for images [B, C, H, W] and labels [B].
using LossFn = std::function<torch::Tensor(const torch::Tensor& images, const torch::Tensor& labels)>;
/// Forward-only logits, [B, K].
using LogitFn = std::function<torch::Tensor(const torch::Tensor& images)>;

/// Clip `candidate` into the L-infinity ball around `origin` and into [0, 1].
/// Guarantees |result - origin| <= epsilon for the exact (double) difference.
torch::Tensor project_linf(const torch::Tensor& candidate, const torch::Tensor& origin, double epsilon);

/// x + epsilon * sign(grad_x loss), projected.
torch::Tensor fgsm(const LossFn& loss, const torch::Tensor& images, const torch::Tensor& labels,
                   const AttackSpec& spec);

/// Iterated signed-gradient ascent with per-step projection and optional uniform random start.
torch::Tensor pgd(const LossFn& loss, const torch::Tensor& images, const torch::Tensor& labels,
                  const AttackSpec& spec);

struct SpsaResult {
    torch::Tensor images;
    int64_t queries = 0;  ///< forward evaluations per input image
};

/// Black-box attack on cross-entropy of the queried logits.
/// Gradient estimate: mean over batch_q Rademacher directions v of
/// (L(x + c v) - L(x - c v)) / (2c) * v; update x <- proj(x + lr * sign(estimate)).
SpsaResult spsa(const LogitFn& logits, const torch::Tensor& images, const torch::Tensor& labels,
                const AttackSpec& spec, int64_t chunk = 512);

/// Scalar-valued function of a batch of points, [P, ...] -> [P].
using BatchObjective = std::function<torch::Tensor(const torch::Tensor& points)>;

/// SPSA gradient estimate of `objective` at a single point x (no batch axis).
torch::Tensor spsa_gradient(const BatchObjective& objective, const torch::Tensor& x, double scale,
                            int64_t probes, torch::Generator& generator, int64_t chunk = 512);

/// Cross-entropy per sample from logits.
torch::Tensor per_sample_cross_entropy(const torch::Tensor& logits, const torch::Tensor& labels);

}  // namespace msmem
