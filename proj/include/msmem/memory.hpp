#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace msmem {

/// How a memory module scores a query against its items.
enum class Addressing {
    learned,  ///< shared MLP scorer over [query ; item]
    cosine,   ///< cosine similarity (ablation)
    bypass,   ///< no memory: the reduced query is passed straight to the restore conv
};

Addressing parse_addressing(std::string_view name);
std::string to_string(Addressing mode);

// -------------------------------------------------
// Scoring network: [2d -> h1 -> h2 -> 1], ReLU, ReLU, Tanh.
// The same parameters are applied to every (query, item) pair.
// -------------------------------------------------
struct ScoringNetImpl : torch::nn::Module {
    ScoringNetImpl(int64_t dim, int64_t hidden1, int64_t hidden2);

    /// queries [B, d], items [N, d] -> scores [B, N] in (-1, 1).
    ///
    /// The first layer acts on the concatenation [q ; m]; it is evaluated as
    /// W_q q + W_m m + b so the [B, N, 2d] pair tensor is never materialised.
    torch::Tensor forward(const torch::Tensor& queries, const torch::Tensor& items);
    /// Default initialisation: the score starts as a decreasing function of a
    /// random-projection L1 distance between query and item.
    void init_distance_like();
    /// Start at the cosine score against these items (orthogonal, norm sqrt(d)).
    /// Needs h1, h2 >= N; returns false and changes nothing otherwise.
    bool init_cosine_like(const torch::Tensor& items);

    int64_t dim;
    torch::nn::Linear fc1{nullptr}, fc2{nullptr}, fc3{nullptr};
};
TORCH_MODULE(ScoringNet);

/// Default scorer width: max(64, d / 4).
int64_t default_scorer_width(int64_t dim);

struct MemoryBankOptions {
    int64_t n_items = 100;
    int64_t dim = 512;
    double gamma = 0.0;          ///< 0 selects 1/N
    double alpha_shrink = 1e-12; ///< denominator guard of the shrinkage
    int64_t hidden1 = 0;         ///< 0 selects default_scorer_width(dim)
    int64_t hidden2 = 0;
};

// -------------------------------------------------
// Memory dictionary M [N, d] with its shrinkage parameters and scorer.
// -------------------------------------------------
struct MemoryBankImpl : torch::nn::Module {
    explicit MemoryBankImpl(const MemoryBankOptions& options);

    /// Per-row scores [B, N] for queries [B, d] (or [d]).
    torch::Tensor scores(const torch::Tensor& queries, Addressing mode);

    /// Sparse addressing weights hard_shrink(softmax(scores)).
    torch::Tensor address(const torch::Tensor& queries, Addressing mode);

    int64_t n_items;
    int64_t dim;
    double gamma;
    double alpha_shrink;
    torch::Tensor items;
    ScoringNet scorer{nullptr};
};
TORCH_MODULE(MemoryBank);

/// Cosine similarity of each query row against each item row.
/// Throws std::invalid_argument("degenerate vector") on a zero-norm row.
torch::Tensor cosine_scores(const torch::Tensor& queries, const torch::Tensor& items);
torch::Tensor cosine_scores(const torch::Tensor& queries, MemoryBankImpl& bank);

/// Scorer outputs for every (query, item) pair. Throws on dimension mismatch.
torch::Tensor learned_scores(const torch::Tensor& queries, MemoryBankImpl& bank);

/// Row-wise softmax over the last axis.
torch::Tensor address_softmax(const torch::Tensor& scores);

/// Hard shrinkage followed by L1 renormalisation:
///   w_i <- max(w_i - gamma, 0) * w_i / (|w_i - gamma| + alpha), then divide by the row sum.
/// A row that shrinks to all zeros becomes one-hot at its largest input weight
/// (lowest index on ties).
torch::Tensor hard_shrink(const torch::Tensor& weights, double gamma, double alpha_shrink);

/// z_hat = w M. weights [B, N] (or [N]) against items [N, d].
torch::Tensor retrieve(const torch::Tensor& weights, const torch::Tensor& items);

/// Natural-log entropy per row, with 0 log 0 = 0. weights [B, N] -> [B]; [N] -> scalar.
torch::Tensor addressing_entropy(const torch::Tensor& weights);

struct MemoryModuleOptions {
    int64_t in_channels = 64;
    int64_t reduced_channels = 4;
    int64_t height = 16;
    int64_t width = 16;
    int64_t n_items = 100;
    double gamma = 0.0;
    double alpha_shrink = 1e-12;
    int64_t scorer_hidden = 0;
    Addressing addressing = Addressing::learned;
    /// Standardise each query feature with batch statistics (running statistics in eval mode)
    /// before addressing. Without it the shared background of the inputs dominates every query.
    bool normalize_query = true;
};

struct MemoryOutput {
    torch::Tensor map;     ///< [B, C_in, H', W']
    torch::Tensor weights; ///< [B, N]; undefined in bypass mode
};

// -------------------------------------------------
// Memory module: reduce conv -> flatten -> address -> retrieve -> reshape -> restore conv.
// One query per sample: d = H' * W' * c.
// -------------------------------------------------
struct MemoryModuleImpl : torch::nn::Module {
    explicit MemoryModuleImpl(const MemoryModuleOptions& options);

    MemoryOutput forward(const torch::Tensor& z);

    /// Forces one-hot addressing of a single item; std::nullopt restores normal addressing.
    void force_item(std::optional<int64_t> index) { forced_item = index; }

    MemoryModuleOptions options;
    std::optional<int64_t> forced_item;
    torch::nn::Conv2d reduce{nullptr};
    torch::nn::BatchNorm1d query_norm{nullptr};
    MemoryBank bank{nullptr};
    torch::nn::Conv2d restore{nullptr};
};
TORCH_MODULE(MemoryModule);

}  // namespace msmem
