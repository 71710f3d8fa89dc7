// msmem: train, attack, purify and evaluate from one JSON run config.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "msmem/checkpoint.hpp"
#include "msmem/config.hpp"
#include "msmem/recognition.hpp"
#include "msmem/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msmem;

namespace {

// Usage problems that are not config-field errors (missing checkpoint, bad paths).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Overrides {
    std::string config;
    std::string output;
    std::optional<uint64_t> seed;
    std::optional<int64_t> epochs;
    std::string addressing;
};

RunConfig load(const Overrides& o) {
    auto c = load_run_config(o.config);
    if (!o.output.empty()) c.output_dir = o.output;
    if (o.seed) {
        c.seed = *o.seed;
        c.train.seed = *o.seed;
        c.classifier.train.seed = *o.seed;
        for (auto& a : c.attacks) a.seed = *o.seed;
    }
    if (o.epochs) {
        if (*o.epochs < 0) throw ConfigError("--epochs", "must be >= 0");
        c.train.max_epochs = *o.epochs;
        if (c.train.warmup_epochs >= c.train.max_epochs && c.train.max_epochs > 0) {
            throw ConfigError("--epochs", "must exceed train.warmup_epochs");
        }
    }
    if (!o.addressing.empty()) {
        try {
            c.model.purifier.addressing = parse_addressing(o.addressing);
        } catch (const std::exception& e) {
            throw ConfigError("--addressing", e.what());
        }
    }
    resolve(c);
    try {
        c.train.validate();
        c.model.purifier.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError("train", e.what());
    }
    fs::create_directories(c.output_dir);
    std::ofstream(fs::path(c.output_dir) / "effective_config.json") << to_json(c).dump(2) << '\n';
    return c;
}

void require_file(const std::string& path, const char* what) {
    if (path.empty()) throw UsageError(std::string("missing ") + what + " checkpoint");
    if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " checkpoint not found: " + path);
}

PurifierConfig purifier_from_json(const json& j) {
    PurifierConfig p;
    p.image_size = j.at("image_size").get<int64_t>();
    p.in_channels = j.at("in_channels").get<int64_t>();
    p.top_channels = j.at("top_channels").get<int64_t>();
    p.bottom_channels = j.at("bottom_channels").get<int64_t>();
    p.top_reduced = j.at("top_reduced").get<int64_t>();
    p.bottom_reduced = j.at("bottom_reduced").get<int64_t>();
    p.memory_items = j.at("memory_items").get<int64_t>();
    p.gamma = j.at("gamma").get<double>();
    p.alpha_shrink = j.at("alpha_shrink").get<double>();
    p.scorer_hidden = j.at("scorer_hidden").get<int64_t>();
    p.normalize_query = j.at("normalize_query").get<bool>();
    p.addressing = parse_addressing(j.at("addressing").get<std::string>());
    return p;
}

// The architecture is rebuilt from the checkpoint's own model record, so an ablation
// checkpoint loads regardless of the addressing named in the run config.
PurifierModel load_purifier(const std::string& path, const RunConfig& c) {
    require_file(path, "purifier");
    const auto meta = read_checkpoint_meta(path);
    if (meta.kind != "purifier") throw std::runtime_error(path + " holds a " + meta.kind + ", not a purifier");
    auto p = purifier_from_json(json::parse(meta.config_json));
    if (p.image_size != c.model.purifier.image_size) {
        throw std::runtime_error("purifier checkpoint expects " + std::to_string(p.image_size) + " px images, config has " +
                                 std::to_string(c.model.purifier.image_size));
    }
    PurifierModel model(p);
    load_checkpoint(path, {{"purifier", model.ptr().get()}});
    model->eval();
    return model;
}

RecognitionModel load_classifier(const std::string& path, const RunConfig& c) {
    require_file(path, "classifier");
    const auto meta = read_checkpoint_meta(path);
    if (meta.kind != "classifier") throw std::runtime_error(path + " holds a " + meta.kind + ", not a classifier");
    const auto j = json::parse(meta.config_json);
    ClassifierConfig k;
    k.image_size = j.at("image_size").get<int64_t>();
    k.in_channels = j.at("in_channels").get<int64_t>();
    k.width = j.at("width").get<int64_t>();
    k.embedding_dim = j.at("embedding_dim").get<int64_t>();
    k.num_classes = j.at("num_classes").get<int64_t>();
    if (k.image_size != c.classifier.model.image_size) throw std::runtime_error("classifier checkpoint image size differs from config");
    RecognitionModel model(k);
    load_checkpoint(path, {{"classifier", model.ptr().get()}});
    model->eval();
    return model;
}

int cmd_train(const Overrides& o, const std::string& resume) {
    auto c = load(o);
    const auto split = load_data(c);
    Trainer trainer(c.model.purifier, c.model.discriminator, c.model.extractor, c.train);
    const std::string hash = config_hash(c);
    const std::string model_json = purifier_model_json(c).dump();
    if (!resume.empty()) {
        require_file(resume, "resume");
        trainer.load(resume);
    }
    FitOptions fit;
    fit.metrics_path = (fs::path(c.output_dir) / "metrics.csv").string();
    fit.checkpoint_dir = c.output_dir;
    fit.config_hash = hash;
    fit.config_json = model_json;
    auto result = trainer.fit(split.train, fit);
    trainer.save((fs::path(c.output_dir) / "purifier.ckpt").string(), hash, model_json);
    if (result.stopped_early) {
        std::cerr << "training stopped at epoch " << trainer.epoch() << ": " << result.error << '\n';
        return 1;
    }
    if (!result.history.empty()) {
        const auto& last = result.history.back();
        std::printf("epoch %lld  l1 %.6f  perceptual %.6f  total %.6f\n", static_cast<long long>(last.epoch),
                    last.losses.l1, last.losses.perceptual, last.losses.total);
    }
    std::printf("wrote %s\n", (fs::path(c.output_dir) / "purifier.ckpt").c_str());
    return 0;
}

int cmd_train_classifier(const Overrides& o) {
    auto c = load(o);
    const auto split = load_data(c);
    torch::manual_seed(c.classifier.train.seed);
    RecognitionModel model(c.classifier.model);
    auto losses = train_classifier(*model, split.train, c.classifier.train);
    auto gallery = enroll(*model, split.train);
    const auto predicted = match(*model, gallery, split.test.images);
    const double accuracy = split.test.size() == 0 ? 0.0 : predicted.eq(split.test.labels).to(torch::kDouble).mean().item<double>();

    std::ofstream log(fs::path(c.output_dir) / "classifier_metrics.csv");
    log << "epoch,loss\n";
    for (size_t e = 0; e < losses.size(); ++e) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", e, losses[e]);
        log << buf;
    }
    CheckpointMeta meta;
    meta.kind = "classifier";
    meta.config_hash = config_hash(c);
    meta.config_json = classifier_model_json(c).dump();
    meta.epoch = c.classifier.train.epochs;
    const auto path = fs::path(c.output_dir) / "classifier.ckpt";
    save_checkpoint(path.string(), meta, {{"classifier", model.ptr().get()}});
    std::printf("clean matching accuracy %.4f on %lld test images\nwrote %s\n", accuracy,
                static_cast<long long>(split.test.size()), path.c_str());
    return 0;
}

std::string attack_dir_name(const AttackSpec& a) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_eps%g", a.descriptor().c_str(), a.epsilon);
    return buf;
}

int cmd_attack(const Overrides& o, const std::string& classifier_path, const std::string& out_dir) {
    auto c = load(o);
    if (c.attacks.empty()) throw ConfigError("attacks", "no attacks configured");
    auto model = load_classifier(classifier_path, c);
    const auto split = load_data(c);
    const fs::path root = out_dir.empty() ? fs::path(c.output_dir) / "attacks" : fs::path(out_dir);
    json manifest = {{"config_hash", config_hash(c)}, {"source", "test split"}, {"attacks", json::array()}};
    for (const auto& spec : c.attacks) {
        const auto adversarial = run_attack(*model, spec, split.test.images, split.test.labels);
        const double max_delta =
            (adversarial.to(torch::kFloat64) - split.test.images.to(torch::kFloat64)).abs().max().item<double>();
        if (max_delta > spec.epsilon) {
            std::fprintf(stderr, "internal error: %s exceeded its budget (%.9g > %.9g)\n", spec.descriptor().c_str(),
                         max_delta, spec.epsilon);
            std::abort();
        }
        const auto dir = root / attack_dir_name(spec);
        fs::remove_all(dir);
        json files = json::array();
        for (int64_t i = 0; i < split.test.size(); ++i) {
            const auto rel = split.test.files[i] + ".pfm";
            fs::create_directories((dir / rel).parent_path());
            write_image((dir / rel).string(), adversarial[i]);
            files.push_back({{"file", rel}, {"label", split.test.labels[i].item<int64_t>()}});
        }
        manifest["attacks"].push_back({{"directory", attack_dir_name(spec)},
                                       {"family", to_string(spec.family)},
                                       {"descriptor", spec.descriptor()},
                                       {"epsilon", spec.epsilon},
                                       {"steps", spec.steps},
                                       {"step_size", spec.step_size},
                                       {"random_start", spec.random_start},
                                       {"learning_rate", spec.learning_rate},
                                       {"perturbation_scale", spec.perturbation_scale},
                                       {"batch_q", spec.batch_q},
                                       {"seed", spec.seed},
                                       {"max_perturbation", max_delta},
                                       {"files", files}});
        std::printf("%s: %lld images, max |delta| %.6g\n", attack_dir_name(spec).c_str(),
                    static_cast<long long>(split.test.size()), max_delta);
    }
    fs::create_directories(root);
    std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
    return 0;
}

int cmd_purify(const Overrides& o, const std::string& checkpoint, const std::string& input, const std::string& out_dir) {
    auto c = load(o);
    auto model = load_purifier(checkpoint, c);
    if (!fs::is_directory(input)) throw UsageError("input directory not found: " + input);
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(input)) {
        if (entry.is_regular_file() && is_image_file(entry.path().string())) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    const fs::path root = out_dir.empty() ? fs::path(c.output_dir) / "purified" : fs::path(out_dir);
    const int64_t size = model->config.image_size;
    torch::NoGradGuard no_grad;
    for (const auto& file : files) {
        auto image = read_image(file.string());
        if (image.size(0) != model->config.in_channels || image.size(1) != size || image.size(2) != size) {
            throw std::runtime_error("shape mismatch: " + file.string() + " is " + std::to_string(image.size(1)) + "x" +
                                     std::to_string(image.size(2)) + ", purifier expects " + std::to_string(size) +
                                     "x" + std::to_string(size));
        }
        auto cleaned = model->forward(image.unsqueeze(0))[0];
        const auto target = root / fs::relative(file, input);
        fs::create_directories(target.parent_path());
        write_image(target.string(), cleaned);
    }
    std::printf("purified %zu images into %s\n", files.size(), root.c_str());
    return 0;
}

int cmd_evaluate(const Overrides& o, const std::string& purifier_path, const std::string& classifier_path,
                 const std::string& ablation_path) {
    auto c = load(o);
    auto classifier = load_classifier(classifier_path, c);
    auto purifier = load_purifier(purifier_path, c);
    std::optional<PurifierModel> ablation;
    if (c.cosine_ablation || !ablation_path.empty()) ablation = load_purifier(ablation_path, c);
    if (c.attacks.empty()) throw ConfigError("attacks", "no attacks configured");

    const auto split = load_data(c);
    auto gallery = enroll(*classifier, split.train);
    std::vector<Defense> defenses{{"msmemorygan", purify_with(purifier)}};
    if (ablation) defenses.push_back({"cosine-ablation", purify_with(*ablation)});
    const auto report = evaluate_defense(*classifier, gallery, c.classifier.id, defenses, c.attacks, split.test);
    std::ofstream(fs::path(c.output_dir) / "report.csv") << report.to_csv();
    const auto table = report.render_table();
    std::ofstream(fs::path(c.output_dir) / "report.txt") << table;
    std::cout << table;
    return 0;
}

int cmd_synth(const Overrides& o, const std::string& out_dir) {
    auto c = load(o);
    if (c.data.source != "synthetic") throw ConfigError("data.source", "synth-data needs the synthetic source");
    const fs::path root = out_dir.empty() ? fs::path(c.output_dir) / "data" : fs::path(out_dir);
    write_dataset(synth_veins(c.data.synthetic), root.string());
    std::printf("wrote %lld classes x %lld images into %s\n", static_cast<long long>(c.data.synthetic.n_classes),
                static_cast<long long>(c.data.synthetic.per_class), root.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Memory-autoencoder adversarial purification: train, attack, purify, evaluate"};
    app.require_subcommand(1);

    Overrides o;
    auto common = [&o](CLI::App* sub, bool with_epochs) {
        sub->add_option("-c,--config", o.config, "run config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("-o,--output", o.output, "override output_dir");
        sub->add_option("--seed", o.seed, "override every seed in the config");
        if (with_epochs) sub->add_option("--epochs", o.epochs, "override train.max_epochs");
    };

    std::string resume, classifier, purifier, ablation, input, out_dir;

    auto* train = app.add_subcommand("train", "train the purifier on clean training images");
    common(train, true);
    train->add_option("--addressing", o.addressing, "override model.addressing (learned, cosine, bypass)");
    train->add_option("--resume", resume, "continue from a purifier checkpoint");

    auto* train_clf = app.add_subcommand("train-classifier", "train the recognition model");
    common(train_clf, false);

    auto* attack = app.add_subcommand("attack", "write adversarial versions of the test split");
    common(attack, false);
    attack->add_option("--classifier", classifier, "classifier checkpoint")->required();
    attack->add_option("--out", out_dir, "output directory (default <output_dir>/attacks)");

    auto* purify = app.add_subcommand("purify", "reconstruct every image of a directory");
    common(purify, false);
    purify->add_option("--checkpoint", purifier, "purifier checkpoint")->required();
    purify->add_option("--input", input, "input directory")->required();
    purify->add_option("--out", out_dir, "output directory (default <output_dir>/purified)");

    auto* evaluate = app.add_subcommand("evaluate", "recognition accuracy under attack, with and without defenses");
    common(evaluate, false);
    evaluate->add_option("--purifier", purifier, "purifier checkpoint")->required();
    evaluate->add_option("--classifier", classifier, "classifier checkpoint")->required();
    evaluate->add_option("--ablation", ablation, "cosine-addressing purifier checkpoint");

    auto* synth = app.add_subcommand("synth-data", "write the synthetic dataset as PNG files");
    common(synth, false);
    synth->add_option("--out", out_dir, "output directory (default <output_dir>/data)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*train) return cmd_train(o, resume);
        if (*train_clf) return cmd_train_classifier(o);
        if (*attack) return cmd_attack(o, classifier, out_dir);
        if (*purify) return cmd_purify(o, purifier, input, out_dir);
        if (*evaluate) return cmd_evaluate(o, purifier, classifier, ablation);
        if (*synth) return cmd_synth(o, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
