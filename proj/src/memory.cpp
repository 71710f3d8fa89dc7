#include "msmem/memory.hpp"

#include <cmath>
#include <stdexcept>

namespace msmem {

namespace F = torch::nn::functional;

Addressing parse_addressing(std::string_view name) {
    if (name == "learned") return Addressing::learned;
    if (name == "cosine") return Addressing::cosine;
    if (name == "bypass") return Addressing::bypass;
    throw std::invalid_argument("unknown addressing mode '" + std::string(name) + "'");
}

std::string to_string(Addressing mode) {
    switch (mode) {
        case Addressing::learned: return "learned";
        case Addressing::cosine: return "cosine";
        case Addressing::bypass: return "bypass";
    }
    return "unknown";
}

int64_t default_scorer_width(int64_t dim) { return std::max<int64_t>(64, dim / 4); }

namespace {

torch::Tensor as_rows(const torch::Tensor& t) { return t.dim() == 1 ? t.unsqueeze(0) : t; }

torch::Tensor like_input(const torch::Tensor& result, const torch::Tensor& input) {
    return input.dim() == 1 ? result.squeeze(0) : result;
}

}  // namespace

// ScoringNet

ScoringNetImpl::ScoringNetImpl(int64_t dim_, int64_t hidden1, int64_t hidden2) : dim(dim_) {
    TORCH_CHECK(dim >= 1 && hidden1 >= 1 && hidden2 >= 1, "scorer widths must be positive");
    fc1 = register_module("fc1", torch::nn::Linear(2 * dim, hidden1));
    fc2 = register_module("fc2", torch::nn::Linear(hidden1, hidden2));
    fc3 = register_module("fc3", torch::nn::Linear(hidden2, 1));
    init_distance_like();
}

// Hidden pairs relu(u.(q - m)) and relu(-u.(q - m)) add up to |u.(q - m)|, so the initial
// score falls with a randomly projected L1 distance between query and item.
void ScoringNetImpl::init_distance_like() {
    torch::NoGradGuard no_grad;
    const int64_t h1 = fc1->weight.size(0), h2 = fc2->weight.size(0);
    const int64_t pairs = h1 / 2;
    if (pairs == 0) return;
    auto u = torch::randn({pairs, dim}) / std::sqrt(static_cast<double>(dim));
    auto w1 = torch::zeros({h1, 2 * dim});
    w1.narrow(0, 0, pairs).copy_(torch::cat({u, -u}, 1));
    w1.narrow(0, pairs, pairs).copy_(torch::cat({-u, u}, 1));
    fc1->weight.copy_(w1);
    fc1->bias.zero_();
    // near-identity routing of the first layer's units, small noise to break symmetry
    auto w2 = 0.01 * torch::randn({h2, h1}) / std::sqrt(static_cast<double>(h1));
    for (int64_t j = 0; j < h2; ++j) w2[j][j % h1] += 1.0;
    fc2->weight.copy_(w2);
    fc2->bias.zero_();
    // E|u.(q - m)| = 2 / sqrt(pi) for unit-variance q and m; centre the tanh there
    const double expected = 2.0 / std::sqrt(M_PI);
    fc3->weight.copy_(-(1.0 + 0.1 * torch::randn({1, h2})) / static_cast<double>(pairs));
    fc3->bias.fill_(expected * static_cast<double>(h2) / (2.0 * static_cast<double>(pairs)));
}

// Unit k sees u_k.q + u_k.m + c - |m_k| with u_k = m_k / |m_k|. For orthogonal items of norm
// sqrt(d) it is active only when m = m_k, where it passes u_k.q + c unchanged
// (c = min(5, sqrt(d) / 2)), so the score starts at cos(q, m_k) for standardised queries
// (|q| ~ sqrt(d)). Units beyond N get tiny random weights. Everything stays trainable.
bool ScoringNetImpl::init_cosine_like(const torch::Tensor& items) {
    const int64_t n = items.size(0);
    const int64_t h1 = fc1->weight.size(0), h2 = fc2->weight.size(0);
    if (h1 < n || h2 < n) return false;
    torch::NoGradGuard no_grad;
    const double root_d = std::sqrt(static_cast<double>(dim));
    const double margin = std::min(5.0, 0.5 * root_d);
    auto norms = items.norm(2, 1);
    auto u = items / norms.unsqueeze(1);
    auto w1 = 1e-3 * torch::randn({h1, 2 * dim}) / root_d;
    w1.narrow(0, 0, n).copy_(torch::cat({u, u}, 1));
    fc1->weight.copy_(w1);
    fc1->bias.zero_();
    fc1->bias.narrow(0, 0, n).copy_(margin - norms);
    auto w2 = 1e-3 * torch::randn({h2, h1}) / std::sqrt(static_cast<double>(h1));
    for (int64_t j = 0; j < n; ++j) w2[j][j] += 1.0;
    fc2->weight.copy_(w2);
    fc2->bias.zero_();
    fc3->weight.fill_(1.0 / root_d);
    fc3->bias.fill_(-margin / root_d);
    return true;
}

torch::Tensor ScoringNetImpl::forward(const torch::Tensor& queries, const torch::Tensor& items) {
    auto q = as_rows(queries);
    if (q.size(-1) != dim || items.size(-1) != dim) {
        throw std::invalid_argument("scorer dimension mismatch: expected " + std::to_string(dim));
    }
    const auto& w = fc1->weight;  // [h1, 2d]
    auto q_part = q.matmul(w.narrow(1, 0, dim).t());        // [B, h1]
    auto m_part = items.matmul(w.narrow(1, dim, dim).t());  // [N, h1]
    auto h = torch::relu(q_part.unsqueeze(1) + m_part.unsqueeze(0) + fc1->bias);  // [B, N, h1]
    h = torch::relu(fc2->forward(h));
    return torch::tanh(fc3->forward(h)).squeeze(-1);  // [B, N]
}

// MemoryBank

MemoryBankImpl::MemoryBankImpl(const MemoryBankOptions& o)
    : n_items(o.n_items),
      dim(o.dim),
      gamma(o.gamma > 0.0 ? o.gamma : 1.0 / static_cast<double>(o.n_items)),
      alpha_shrink(o.alpha_shrink) {
    TORCH_CHECK(n_items >= 2, "memory needs at least 2 items, got ", n_items);
    TORCH_CHECK(dim >= 1, "memory item dimension must be positive");
    const double n = static_cast<double>(n_items);
    // small slack so that 1/N and 3/N written as decimals are accepted
    TORCH_CHECK(gamma >= (1.0 - 1e-9) / n && gamma <= (3.0 + 1e-9) / n,
                "gamma must lie in [1/N, 3/N], got ", gamma);
    TORCH_CHECK(alpha_shrink > 0.0, "alpha_shrink must be positive");

    // orthogonal random directions (when N <= d) at the norm of a standardised query, sqrt(d)
    auto init = torch::randn({n_items, dim});
    if (n_items <= dim) init = std::get<0>(torch::linalg_qr(init.t())).t().contiguous();
    init *= std::sqrt(static_cast<double>(dim)) / init.norm(2, 1, true);
    items = register_parameter("items", init);
    const int64_t h1 = o.hidden1 > 0 ? o.hidden1 : default_scorer_width(dim);
    const int64_t h2 = o.hidden2 > 0 ? o.hidden2 : default_scorer_width(dim);
    scorer = register_module("scorer", ScoringNet(dim, h1, h2));
    scorer->init_cosine_like(items.detach());
}

torch::Tensor MemoryBankImpl::scores(const torch::Tensor& queries, Addressing mode) {
    switch (mode) {
        case Addressing::learned: return learned_scores(queries, *this);
        case Addressing::cosine: return cosine_scores(queries, *this);
        case Addressing::bypass: break;
    }
    throw std::logic_error("bypass addressing has no scores");
}

torch::Tensor MemoryBankImpl::address(const torch::Tensor& queries, Addressing mode) {
    return hard_shrink(address_softmax(scores(queries, mode)), gamma, alpha_shrink);
}

// Free functions

torch::Tensor cosine_scores(const torch::Tensor& queries, const torch::Tensor& items) {
    auto q = as_rows(queries);
    auto qn = q.norm(2, -1, true);
    auto mn = items.norm(2, -1, true);
    if ((qn == 0).any().item<bool>() || (mn == 0).any().item<bool>()) {
        throw std::invalid_argument("degenerate vector");
    }
    auto s = (q / qn).matmul((items / mn).t());
    return like_input(s, queries);
}

torch::Tensor cosine_scores(const torch::Tensor& queries, MemoryBankImpl& bank) {
    if (queries.size(-1) != bank.dim) {
        throw std::invalid_argument("query dimension mismatch");
    }
    return cosine_scores(queries, bank.items);
}

torch::Tensor learned_scores(const torch::Tensor& queries, MemoryBankImpl& bank) {
    if (queries.size(-1) != bank.dim) {
        throw std::invalid_argument("query dimension mismatch: got " +
                                    std::to_string(queries.size(-1)) + ", memory dim " +
                                    std::to_string(bank.dim));
    }
    return like_input(bank.scorer->forward(queries, bank.items), queries);
}

torch::Tensor address_softmax(const torch::Tensor& scores) { return torch::softmax(scores, -1); }

torch::Tensor hard_shrink(const torch::Tensor& weights, double gamma, double alpha_shrink) {
    auto w = as_rows(weights);
    auto shifted = w - gamma;
    auto shrunk = torch::relu(shifted) * w / (shifted.abs() + alpha_shrink);
    auto total = shrunk.sum(-1, true);
    auto dead = total <= 0;

    // argmax returns the first maximal index, which is the lowest-index tie-break
    auto fallback = F::one_hot(w.argmax(-1), w.size(-1)).to(w.dtype());
    auto safe_total = torch::where(dead, torch::ones_like(total), total);
    auto out = torch::where(dead, fallback, shrunk / safe_total);
    return like_input(out, weights);
}

torch::Tensor retrieve(const torch::Tensor& weights, const torch::Tensor& items) {
    return weights.matmul(items);
}

torch::Tensor addressing_entropy(const torch::Tensor& weights) {
    auto positive = weights > 0;
    auto safe = torch::where(positive, weights, torch::ones_like(weights));
    return -(weights * torch::log(safe)).sum(-1);
}

// MemoryModule

MemoryModuleImpl::MemoryModuleImpl(const MemoryModuleOptions& o) : options(o) {
    TORCH_CHECK(o.in_channels >= 1 && o.reduced_channels >= 1, "memory channels must be positive");
    reduce = register_module(
        "reduce",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(o.in_channels, o.reduced_channels, 3).padding(1)));
    MemoryBankOptions bank_options;
    bank_options.n_items = o.n_items;
    bank_options.dim = o.height * o.width * o.reduced_channels;
    bank_options.gamma = o.gamma;
    bank_options.alpha_shrink = o.alpha_shrink;
    bank_options.hidden1 = o.scorer_hidden;
    bank_options.hidden2 = o.scorer_hidden;
    bank = register_module("bank", MemoryBank(bank_options));
    if (o.normalize_query) {
        query_norm = register_module(
            "query_norm", torch::nn::BatchNorm1d(torch::nn::BatchNorm1dOptions(bank_options.dim).affine(false)));
    }
    restore = register_module(
        "restore",
        torch::nn::Conv2d(torch::nn::Conv2dOptions(o.reduced_channels, o.in_channels, 3).padding(1)));
}

MemoryOutput MemoryModuleImpl::forward(const torch::Tensor& z) {
    TORCH_CHECK(z.dim() == 4 && z.size(1) == options.in_channels && z.size(2) == options.height &&
                    z.size(3) == options.width,
                "memory module expects [B, ", options.in_channels, ", ", options.height, ", ",
                options.width, "], got ", z.sizes());
    const int64_t batch = z.size(0);
    auto query = reduce->forward(z).reshape({batch, -1});
    if (query_norm) query = query_norm->forward(query);

    MemoryOutput out;
    torch::Tensor code;
    if (forced_item) {
        out.weights = F::one_hot(torch::full({batch}, *forced_item, torch::kLong), bank->n_items)
                          .to(query.dtype());
        code = retrieve(out.weights, bank->items);
    } else if (options.addressing == Addressing::bypass) {
        code = query;
    } else {
        out.weights = bank->address(query, options.addressing);
        code = retrieve(out.weights, bank->items);
    }
    code = code.reshape({batch, options.reduced_channels, options.height, options.width});
    out.map = restore->forward(code);
    return out;
}

}  // namespace msmem
