#include "msmem/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <ATen/CPUGeneratorImpl.h>

namespace msmem {

void TrainConfig::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (!(lr_init >= 0.0) || !(lr_final >= 0.0)) fail("learning rates must be >= 0");
    if (lr_final > lr_init) fail("lr_final must not exceed lr_init");
    if (warmup_epochs < 0) fail("warmup_epochs must be >= 0");
    if (max_epochs < 0) fail("max_epochs must be >= 0");
    if (max_epochs > 0 && warmup_epochs >= max_epochs) fail("warmup_epochs must be < max_epochs");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (weight_decay < 0.0) fail("weight_decay must be >= 0");
    if (alpha < 0.0) fail("alpha must be >= 0");
    if (!(scorer_lr_scale >= 0.0)) fail("scorer_lr_scale must be >= 0");
    if (!(adversarial_weight >= 0.0)) fail("adversarial_weight must be >= 0");
    if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

double learning_rate_at(const TrainConfig& c, int64_t epoch) {
    if (epoch < c.warmup_epochs) {
        return c.lr_init * static_cast<double>(epoch + 1) / static_cast<double>(c.warmup_epochs);
    }
    const int64_t span = c.max_epochs - c.warmup_epochs;
    if (span <= 0) return c.lr_init;
    const double progress = std::min(1.0, static_cast<double>(epoch - c.warmup_epochs) / static_cast<double>(span));
    return c.lr_final + (c.lr_init - c.lr_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string metrics_csv_header() {
    std::string h = "epoch,lr";
    for (const auto& name : LossReport::field_names()) h += "," + name;
    return h;
}

std::string metrics_csv_row(const EpochRecord& r) {
    std::ostringstream out;
    char buf[40];
    out << r.epoch;
    std::snprintf(buf, sizeof(buf), ",%.9g", r.learning_rate);
    out << buf;
    for (double v : r.losses.values()) {
        std::snprintf(buf, sizeof(buf), ",%.9g", v);
        out << buf;
    }
    return out.str();
}

Trainer::Trainer(const PurifierConfig& purifier, const DiscriminatorConfig& discriminator,
                 const FeatureExtractorConfig& extractor, const TrainConfig& train)
    : train_(train) {
    train_.validate();
    torch::manual_seed(train_.seed);
    purifier_ = PurifierModel(purifier);
    discriminator_ = PatchDiscriminator(discriminator);
    extractor_ = FeatureExtractor(extractor);
    const auto opts = torch::optim::AdamWOptions(train_.lr_init).weight_decay(train_.weight_decay);
    // scorer parameters form a second group so their step size can be scaled separately
    std::vector<torch::Tensor> scorer, rest;
    std::set<torch::TensorImpl*> in_scorer;
    for (auto* m : {purifier_->memory_top.get(), purifier_->memory_bottom.get()}) {
        for (auto& p : m->bank->scorer->parameters()) {
            scorer.push_back(p);
            in_scorer.insert(p.unsafeGetTensorImpl());
        }
    }
    for (auto& p : purifier_->parameters()) {
        if (!in_scorer.count(p.unsafeGetTensorImpl())) rest.push_back(p);
    }
    std::vector<torch::optim::OptimizerParamGroup> groups;
    groups.emplace_back(rest, std::make_unique<torch::optim::AdamWOptions>(opts));
    groups.emplace_back(scorer, std::make_unique<torch::optim::AdamWOptions>(opts));
    gen_optimizer_ = std::make_unique<torch::optim::AdamW>(std::move(groups), opts);
    disc_optimizer_ = std::make_unique<torch::optim::AdamW>(discriminator_->parameters(), opts);
}

void Trainer::set_learning_rate(double lr) {
    auto& gen = gen_optimizer_->param_groups();
    static_cast<torch::optim::AdamWOptions&>(gen[0].options()).lr(lr);
    static_cast<torch::optim::AdamWOptions&>(gen[1].options()).lr(lr * train_.scorer_lr_scale);
    for (auto& group : disc_optimizer_->param_groups()) {
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
    }
}

bool Trainer::gan_active() const { return train_.adversarial && epoch_ >= train_.gan_start(); }

namespace {

void require_finite(const torch::Tensor& value, const char* component) {
    if (!std::isfinite(value.item<double>())) {
        throw TrainingError(component, std::string("non-finite ") + component + " loss");
    }
}

void require_finite_parameters(torch::nn::Module& module, const char* owner) {
    for (const auto& p : module.named_parameters()) {
        if (!torch::isfinite(p.value()).all().item<bool>()) {
            throw TrainingError("parameters", std::string(owner) + " parameter '" + p.key() + "' is not finite");
        }
    }
}

}  // namespace

LossReport Trainer::train_step(const torch::Tensor& batch) {
    const bool gan = gan_active();
    LossReport report;
    purifier_->train();

    auto result = purifier_->purify(batch);
    const auto& x_bar = result.image;

    if (gan) {
        discriminator_->train();
        auto d_loss = hinge_disc_loss(discriminator_->forward(batch), discriminator_->forward(x_bar.detach()));
        require_finite(d_loss, "disc");
        disc_optimizer_->zero_grad();
        d_loss.backward();
        disc_optimizer_->step();
        report.disc = d_loss.item<double>();
    }

    auto l1 = msmem::l1_loss(batch, x_bar);
    std::vector<torch::Tensor> taps_x;
    {
        torch::NoGradGuard no_grad;
        taps_x = extractor_->taps(batch);
    }
    auto lp = perceptual_loss(taps_x, extractor_->taps(x_bar));
    auto ent_top = mean_addressing_entropy(result.w_top);
    auto ent_bottom = mean_addressing_entropy(result.w_bottom);
    auto gen_adv = torch::zeros({});
    if (gan) gen_adv = wgan_gen_loss(discriminator_->forward(x_bar));
    auto entropy = ent_top + ent_bottom;
    require_finite(l1, "l1");
    require_finite(lp, "perceptual");
    require_finite(ent_top, "entropy_top");
    require_finite(ent_bottom, "entropy_bottom");
    require_finite(gen_adv, "gen_adv");

    // Gradients of both objectives with respect to x_bar are taken once; beta only needs
    // them pushed through the last decoder layer, and the full backward reuses them.
    const std::vector<torch::Tensor> image{x_bar};
    auto g_rec = torch::autograd::grad({l1 + lp}, image, {}, /*retain_graph=*/true)[0];
    double beta = 0.0;
    torch::Tensor g_image = g_rec;
    if (gan) {
        auto g_adv = torch::autograd::grad({gen_adv}, image, {}, /*retain_graph=*/true)[0];
        const std::vector<torch::Tensor> last{purifier_->last_layer_weight()};
        auto w_rec = torch::autograd::grad(image, last, {g_rec}, /*retain_graph=*/true)[0];
        auto w_adv = torch::autograd::grad(image, last, {g_adv}, /*retain_graph=*/true)[0];
        beta = train_.adversarial_weight *
               adaptive_beta(w_rec.norm().item<double>(), w_adv.norm().item<double>());
        g_image = g_rec + beta * g_adv;
    }
    auto total = total_loss(l1, lp, entropy, gen_adv, train_.alpha, beta);
    require_finite(total, "total");

    gen_optimizer_->zero_grad();
    std::vector<torch::Tensor> roots{x_bar};
    std::vector<torch::Tensor> seeds{g_image};
    if (entropy.requires_grad() && train_.alpha != 0.0) {
        roots.push_back(entropy);
        seeds.push_back(torch::full_like(entropy, train_.alpha));
    }
    torch::autograd::backward(roots, seeds);
    gen_optimizer_->step();
    // the discriminator must not keep gradients from the generator pass
    disc_optimizer_->zero_grad();

    require_finite_parameters(*purifier_, "purifier");
    require_finite_parameters(*discriminator_, "discriminator");

    report.l1 = l1.item<double>();
    report.perceptual = lp.item<double>();
    report.entropy_top = ent_top.item<double>();
    report.entropy_bottom = ent_bottom.item<double>();
    report.gen_adv = gen_adv.item<double>();
    report.beta = beta;
    report.total = total.item<double>();
    return report;
}

EpochRecord Trainer::train_epoch(const Dataset& data) {
    if (data.size() == 0) throw std::invalid_argument("train_epoch: dataset is empty");
    EpochRecord record;
    record.epoch = epoch_;
    record.learning_rate = learning_rate_at(train_, epoch_);
    set_learning_rate(record.learning_rate);

    auto gen = at::make_generator<at::CPUGeneratorImpl>(train_.seed * 1000003ULL + static_cast<uint64_t>(epoch_));
    auto order = torch::randperm(data.size(), gen, torch::kLong);
    std::vector<double> sums(LossReport::field_names().size(), 0.0);
    int64_t batches = 0;
    for (int64_t i = 0; i < data.size();) {
        int64_t count = std::min(train_.batch_size, data.size() - i);
        // batch statistics need two samples: a lone trailing sample joins the previous batch
        if (data.size() - i - count == 1) ++count;
        auto idx = order.narrow(0, i, count);
        auto report = train_step(data.images.index_select(0, idx));
        const auto values = report.values();
        for (size_t k = 0; k < values.size(); ++k) sums[k] += values[k];
        ++batches;
        i += count;
    }
    purifier_->calibrate_query_norm(data.images, train_.batch_size);
    auto& l = record.losses;
    const double n = static_cast<double>(batches);
    l.l1 = sums[0] / n;
    l.perceptual = sums[1] / n;
    l.entropy_top = sums[2] / n;
    l.entropy_bottom = sums[3] / n;
    l.gen_adv = sums[4] / n;
    l.disc = sums[5] / n;
    l.beta = sums[6] / n;
    l.total = sums[7] / n;
    ++epoch_;
    return record;
}

FitResult Trainer::fit(const Dataset& data, const FitOptions& options) {
    if (data.size() == 0) throw std::invalid_argument("fit: dataset is empty");
    FitResult result;
    std::ofstream metrics;
    if (!options.metrics_path.empty()) {
        const bool fresh = epoch_ == 0 || !std::filesystem::exists(options.metrics_path);
        metrics.open(options.metrics_path, fresh ? std::ios::trunc : std::ios::app);
        if (!metrics) throw std::runtime_error("cannot open metrics file " + options.metrics_path);
        if (fresh) metrics << metrics_csv_header() << '\n';
    }
    while (epoch_ < train_.max_epochs) {
        try {
            auto record = train_epoch(data);
            if (metrics.is_open()) metrics << metrics_csv_row(record) << '\n' << std::flush;
            result.history.push_back(record);
        } catch (const TrainingError& e) {
            result.stopped_early = true;
            result.error = std::string(e.what()) + " (component: " + e.component + ")";
            break;
        }
        if (train_.checkpoint_every > 0 && !options.checkpoint_dir.empty() && epoch_ % train_.checkpoint_every == 0) {
            char name[48];
            std::snprintf(name, sizeof(name), "purifier_epoch%04lld.ckpt", static_cast<long long>(epoch_));
            save((std::filesystem::path(options.checkpoint_dir) / name).string(), options.config_hash,
                 options.config_json);
        }
    }
    return result;
}

void Trainer::save(const std::string& path, const std::string& config_hash, const std::string& config_json) const {
    CheckpointMeta meta;
    meta.kind = "purifier";
    meta.config_hash = config_hash;
    meta.config_json = config_json;
    meta.epoch = epoch_;
    save_checkpoint(path, meta,
                    {{"purifier", purifier_.ptr().get()}, {"discriminator", discriminator_.ptr().get()}},
                    {{"generator", gen_optimizer_.get()}, {"discriminator", disc_optimizer_.get()}});
}

CheckpointMeta Trainer::load(const std::string& path) {
    auto meta = load_checkpoint(path,
                                {{"purifier", purifier_.ptr().get()}, {"discriminator", discriminator_.ptr().get()}},
                                {{"generator", gen_optimizer_.get()}, {"discriminator", disc_optimizer_.get()}});
    if (meta.kind != "purifier") throw std::runtime_error("checkpoint is a " + meta.kind + ", not a purifier");
    epoch_ = meta.epoch;
    return meta;
}

}  // namespace msmem
