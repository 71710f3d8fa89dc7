#include "msmem/recognition.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>

namespace msmem {

namespace nn = torch::nn;

void ClassifierConfig::validate() const {
    if (in_channels < 1 || width < 1 || embedding_dim < 1) {
        throw std::invalid_argument("classifier widths must be positive");
    }
    if (image_size < 4 || image_size % 4 != 0) {
        throw std::invalid_argument("classifier image_size must be a multiple of 4");
    }
    if (num_classes < 2) throw std::invalid_argument("classifier needs at least 2 classes");
}

RecognitionModelImpl::RecognitionModelImpl(const ClassifierConfig& c) : config(c) {
    c.validate();
    conv1 = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(c.in_channels, c.width, 3).padding(1)));
    bn1 = register_module("bn1", nn::BatchNorm2d(c.width));
    conv2 = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(c.width, 2 * c.width, 3).padding(1)));
    bn2 = register_module("bn2", nn::BatchNorm2d(2 * c.width));
    const int64_t side = c.image_size / 4;
    embedding = register_module("embedding", nn::Linear(2 * c.width * side * side, c.embedding_dim));
    head = register_module("head", nn::Linear(c.embedding_dim, c.num_classes));
}

torch::Tensor RecognitionModelImpl::embed(const torch::Tensor& x) {
    auto h = torch::max_pool2d(torch::relu(bn1->forward(conv1->forward(x))), 2);
    h = torch::max_pool2d(torch::relu(bn2->forward(conv2->forward(h))), 2);
    return embedding->forward(h.flatten(1));
}

torch::Tensor RecognitionModelImpl::forward(const torch::Tensor& x) {
    return head->forward(torch::relu(embed(x)));
}

std::vector<double> train_classifier(RecognitionModelImpl& model, const Dataset& train,
                                     const ClassifierTrainConfig& cfg) {
    if (train.size() == 0) throw std::invalid_argument("train_classifier: empty dataset");
    torch::optim::AdamW optimizer(model.parameters(),
                                  torch::optim::AdamWOptions(cfg.learning_rate).weight_decay(cfg.weight_decay));
    auto gen = at::make_generator<at::CPUGeneratorImpl>(cfg.seed);
    std::vector<double> history;
    model.train();
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = torch::randperm(train.size(), gen, torch::kLong);
        double total = 0.0;
        int64_t batches = 0;
        for (int64_t i = 0; i < train.size(); i += cfg.batch_size) {
            auto idx = order.narrow(0, i, std::min(cfg.batch_size, train.size() - i));
            if (idx.size(0) < 2) continue;  // batch norm needs more than one sample
            auto x = train.images.index_select(0, idx);
            if (cfg.augment_blur > 0.0) {
                auto blurred = nn::functional::avg_pool2d(
                    x, nn::functional::AvgPool2dFuncOptions(3).stride(1).padding(1).count_include_pad(false));
                auto pick = torch::rand({x.size(0), 1, 1, 1}, gen) < cfg.augment_blur;
                x = torch::where(pick, blurred, x);
            }
            if (cfg.augment_noise > 0.0) x = x + cfg.augment_noise * torch::randn(x.sizes(), gen);
            auto y = train.labels.index_select(0, idx);
            optimizer.zero_grad();
            auto loss = nn::functional::cross_entropy(model.forward(x), y);
            loss.backward();
            optimizer.step();
            total += loss.item<double>();
            ++batches;
        }
        history.push_back(batches ? total / static_cast<double>(batches) : 0.0);
    }
    model.eval();
    return history;
}

torch::Tensor embed_all(RecognitionModelImpl& model, const torch::Tensor& images, int64_t batch_size) {
    torch::NoGradGuard no_grad;
    model.eval();
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < images.size(0); i += batch_size) {
        out.push_back(model.embed(images.narrow(0, i, std::min(batch_size, images.size(0) - i))));
    }
    return torch::cat(out);
}

Gallery enroll_embeddings(const torch::Tensor& embeddings, const torch::Tensor& labels) {
    if (embeddings.size(0) == 0) throw std::invalid_argument("enroll: empty gallery");
    Gallery g;
    g.embeddings = embeddings.detach();
    g.labels = labels.to(torch::kLong);
    std::map<int64_t, std::vector<int64_t>> members;
    auto lab = g.labels.contiguous();
    for (int64_t i = 0; i < lab.size(0); ++i) members[lab[i].item<int64_t>()].push_back(i);
    std::vector<torch::Tensor> means;
    for (const auto& [cls, idx] : members) {
        g.class_ids.push_back(cls);
        means.push_back(g.embeddings.index_select(0, torch::tensor(idx, torch::kLong)).mean(0));
    }
    g.class_means = torch::stack(means);
    return g;
}

Gallery enroll(RecognitionModelImpl& model, const Dataset& gallery, int64_t batch_size) {
    if (gallery.size() == 0) throw std::invalid_argument("enroll: empty gallery");
    return enroll_embeddings(embed_all(model, gallery.images, batch_size), gallery.labels);
}

torch::Tensor match_embeddings(const Gallery& gallery, const torch::Tensor& probe_embeddings) {
    auto probes = probe_embeddings.dim() == 1 ? probe_embeddings.unsqueeze(0) : probe_embeddings;
    auto pn = probes.norm(2, -1, true);
    auto mn = gallery.class_means.norm(2, -1, true);
    if ((pn == 0).any().item<bool>() || (mn == 0).any().item<bool>()) {
        throw std::invalid_argument("zero-norm embedding");
    }
    auto sim = (probes / pn).matmul((gallery.class_means / mn).t());
    auto best = sim.argmax(-1);  // first maximum: lowest class index on ties
    auto ids = torch::tensor(gallery.class_ids, torch::kLong);
    return ids.index_select(0, best);
}

torch::Tensor match(RecognitionModelImpl& model, const Gallery& gallery, const torch::Tensor& probes,
                    int64_t batch_size) {
    return match_embeddings(gallery, embed_all(model, probes, batch_size));
}

torch::Tensor run_attack(RecognitionModelImpl& model, const AttackSpec& spec, const torch::Tensor& images,
                         const torch::Tensor& labels, int64_t batch_size) {
    model.eval();
    LossFn loss = [&model](const torch::Tensor& x, const torch::Tensor& y) {
        return per_sample_cross_entropy(model.forward(x), y);
    };
    LogitFn logits = [&model](const torch::Tensor& x) { return model.forward(x); };
    std::vector<torch::Tensor> out;
    for (int64_t i = 0; i < images.size(0); i += batch_size) {
        const int64_t n = std::min(batch_size, images.size(0) - i);
        auto x = images.narrow(0, i, n);
        auto y = labels.narrow(0, i, n);
        AttackSpec batch_spec = spec;
        batch_spec.seed = spec.seed + static_cast<uint64_t>(i);
        switch (spec.family) {
            case AttackFamily::fgsm: out.push_back(fgsm(loss, x, y, batch_spec)); break;
            case AttackFamily::pgd: out.push_back(pgd(loss, x, y, batch_spec)); break;
            case AttackFamily::spsa: out.push_back(spsa(logits, x, y, batch_spec).images); break;
        }
    }
    return torch::cat(out);
}

namespace {

DefenseRow score(RecognitionModelImpl& model, const Gallery& gallery, const torch::Tensor& images,
                 const torch::Tensor& labels) {
    DefenseRow row;
    auto predicted = match(model, gallery, images);
    row.n_eval = labels.size(0);
    row.correct = predicted.eq(labels).sum().item<int64_t>();
    row.accuracy = row.n_eval ? static_cast<double>(row.correct) / static_cast<double>(row.n_eval) : 0.0;
    return row;
}

std::string format_epsilon(double eps) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", eps);
    return buf;
}

}  // namespace

DefenseReport evaluate_defense(RecognitionModelImpl& model, const Gallery& gallery,
                               const std::string& classifier_id, const std::vector<Defense>& defenses,
                               const std::vector<AttackSpec>& attacks, const Dataset& test) {
    DefenseReport report;
    auto add = [&](DefenseRow row, const std::string& attack, double eps, const std::string& defense) {
        row.classifier_id = classifier_id;
        row.attack = attack;
        row.epsilon = eps;
        row.defense = defense;
        report.rows.push_back(std::move(row));
    };
    add(score(model, gallery, test.images, test.labels), "clean", 0.0, "none");
    for (const auto& spec : attacks) {
        auto adversarial = run_attack(model, spec, test.images, test.labels);
        add(score(model, gallery, adversarial, test.labels), spec.descriptor(), spec.epsilon, "none");
        for (const auto& defense : defenses) {
            auto cleaned = defense.purify(adversarial);
            add(score(model, gallery, cleaned, test.labels), spec.descriptor(), spec.epsilon, defense.name);
        }
    }
    return report;
}

std::string DefenseReport::to_csv() const {
    std::ostringstream out;
    out << "classifier_id,attack,epsilon,defense,accuracy,n_eval\n";
    for (const auto& r : rows) {
        char acc[32];
        std::snprintf(acc, sizeof(acc), "%.6f", r.accuracy);
        out << r.classifier_id << ',' << r.attack << ',' << format_epsilon(r.epsilon) << ',' << r.defense << ','
            << acc << ',' << r.n_eval << '\n';
    }
    return out.str();
}

std::string DefenseReport::render_table() const {
    const std::vector<std::string> header{"classifier_id", "attack", "epsilon", "defense", "accuracy", "n_eval"};
    std::vector<std::vector<std::string>> cells;
    for (const auto& r : rows) {
        char acc[32];
        std::snprintf(acc, sizeof(acc), "%.4f", r.accuracy);
        cells.push_back({r.classifier_id, r.attack, format_epsilon(r.epsilon), r.defense, acc,
                         std::to_string(r.n_eval)});
    }
    std::vector<size_t> widths(header.size());
    for (size_t c = 0; c < header.size(); ++c) {
        widths[c] = header[c].size();
        for (const auto& row : cells) widths[c] = std::max(widths[c], row[c].size());
    }
    std::ostringstream out;
    auto line = [&](const std::vector<std::string>& row) {
        for (size_t c = 0; c < row.size(); ++c) {
            out << (c ? " | " : "") << std::left << std::setw(static_cast<int>(widths[c])) << row[c];
        }
        out << '\n';
    };
    line(header);
    for (size_t c = 0; c < header.size(); ++c) out << (c ? "-+-" : "") << std::string(widths[c], '-');
    out << '\n';
    for (const auto& row : cells) line(row);
    return out.str();
}

const DefenseRow* DefenseReport::find(const std::string& attack, double epsilon,
                                      const std::string& defense) const {
    for (const auto& r : rows) {
        if (r.attack == attack && r.defense == defense && std::abs(r.epsilon - epsilon) < 1e-12) return &r;
    }
    return nullptr;
}

}  // namespace msmem
