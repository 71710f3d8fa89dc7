#include "msmem/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace msmem {

using nlohmann::json;

namespace {

// Typed access to one JSON object with dotted-path error messages and unknown-key detection.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }

    ~Section() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (const auto& item : j_.items()) {
            if (!seen_.count(item.key())) throw ConfigError(field(item.key()), "unknown field");
        }
    }

    bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

    template <class T>
    T get(const std::string& key, const T& fallback) {
        seen_.insert(key);
        if (!has(key)) return fallback;
        return convert<T>(key);
    }

    template <class T>
    T require(const std::string& key) {
        seen_.insert(key);
        if (!has(key)) throw ConfigError(field(key), "required field is missing");
        return convert<T>(key);
    }

    Section child(const std::string& key) {
        seen_.insert(key);
        static const json empty = json::object();
        return Section(has(key) ? j_.at(key) : empty, field(key));
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    template <class T>
    T convert(const std::string& key) const {
        const auto& v = j_.at(key);
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError(field(key), "expected a boolean");
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
            if constexpr (std::is_unsigned_v<T>) {
                if (v.get<int64_t>() < 0) throw ConfigError(field(key), "expected a non-negative integer");
            }
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) throw ConfigError(field(key), "expected a number");
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) throw ConfigError(field(key), "expected a string");
        }
        return v.get<T>();
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class Fn>
void checked(const std::string& field, Fn&& fn) {
    try {
        fn();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(field, e.what());
    }
}

AttackSpec parse_attack(Section s, uint64_t seed) {
    AttackSpec a;
    const auto family = s.require<std::string>("family");
    checked(s.field("family"), [&] { a.family = parse_attack_family(family); });
    a.epsilon = s.require<double>("epsilon");
    a.steps = s.get<int64_t>("steps", a.steps);
    a.step_size = s.get<double>("step_size", a.step_size);
    a.random_start = s.get<bool>("random_start", a.random_start);
    a.learning_rate = s.get<double>("learning_rate", a.learning_rate);
    a.perturbation_scale = s.get<double>("perturbation_scale", a.perturbation_scale);
    a.batch_q = s.get<int64_t>("batch_q", a.batch_q);
    a.seed = s.get<uint64_t>("seed", seed);
    checked(s.field("epsilon"), [&] { a.validate(); });
    return a;
}

}  // namespace

void resolve(RunConfig& c) {
    const int64_t size = c.data.image_size();
    c.model.purifier.image_size = size;
    c.model.purifier.in_channels = 1;
    c.model.discriminator.in_channels = 1;
    c.classifier.model.image_size = size;
    c.classifier.model.in_channels = 1;
    if (c.data.source == "synthetic") {
        c.classifier.model.num_classes = c.data.synthetic.n_classes;
    } else if (c.data.manifest.class_count > 0) {
        c.classifier.model.num_classes = c.data.manifest.class_count;
    }
    c.data.manifest.train_k = c.data.train_k;
    c.data.manifest.test_k = c.data.test_k;
    if (c.model.purifier.gamma == 0.0) {
        c.model.purifier.gamma = 1.0 / static_cast<double>(c.model.purifier.memory_items);
    }
}

RunConfig parse_run_config(const json& j) {
    RunConfig c;
    Section root(j, "");
    c.seed = root.get<uint64_t>("seed", 0);
    c.output_dir = root.require<std::string>("output_dir");

    {
        auto d = root.child("data");
        if (!root.has("data")) throw ConfigError("data", "required field is missing");
        c.data.source = d.require<std::string>("source");
        if (c.data.source != "synthetic" && c.data.source != "directory") {
            throw ConfigError("data.source", "expected \"synthetic\" or \"directory\"");
        }
        c.data.train_k = d.get<int64_t>("train_k", c.data.train_k);
        c.data.test_k = d.get<int64_t>("test_k", c.data.test_k);
        if (c.data.train_k < 0) throw ConfigError("data.train_k", "must be >= 0");
        if (c.data.test_k < 0) throw ConfigError("data.test_k", "must be >= 0");
        {
            auto s = d.child("synthetic");
            auto& o = c.data.synthetic;
            o.n_classes = s.get<int64_t>("classes", o.n_classes);
            o.per_class = s.get<int64_t>("per_class", o.per_class);
            o.size = s.get<int64_t>("size", o.size);
            o.seed = s.get<uint64_t>("seed", c.seed);
            if (o.n_classes < 2) throw ConfigError("data.synthetic.classes", "must be >= 2");
            if (o.per_class < 1) throw ConfigError("data.synthetic.per_class", "must be >= 1");
            if (o.size < 8 || o.size % 8) throw ConfigError("data.synthetic.size", "must be a positive multiple of 8");
            if (c.data.source == "synthetic" && c.data.train_k + c.data.test_k > o.per_class) {
                throw ConfigError("data.train_k", "train_k + test_k exceeds data.synthetic.per_class");
            }
        }
        {
            auto m = d.child("manifest");
            auto& o = c.data.manifest;
            if (c.data.source == "directory") {
                o.root = m.require<std::string>("root");
            } else {
                o.root = m.get<std::string>("root", "");
            }
            o.class_count = m.get<int64_t>("class_count", o.class_count);
            o.images_per_class = m.get<int64_t>("images_per_class", o.images_per_class);
            o.image_size = m.get<int64_t>("image_size", o.image_size);
            o.channels = m.get<int64_t>("channels", o.channels);
            if (o.image_size < 8 || o.image_size % 8) {
                throw ConfigError("data.manifest.image_size", "must be a positive multiple of 8");
            }
            if (o.channels != 1) throw ConfigError("data.manifest.channels", "only 1 is supported");
            if (o.images_per_class > 0 && c.data.train_k + c.data.test_k > o.images_per_class) {
                throw ConfigError("data.train_k", "train_k + test_k exceeds data.manifest.images_per_class");
            }
        }
    }

    {
        auto m = root.child("model");
        auto& p = c.model.purifier;
        p.top_channels = m.get<int64_t>("top_channels", p.top_channels);
        p.bottom_channels = m.get<int64_t>("bottom_channels", p.bottom_channels);
        p.top_reduced = m.get<int64_t>("top_reduced", p.top_reduced);
        p.bottom_reduced = m.get<int64_t>("bottom_reduced", p.bottom_reduced);
        p.memory_items = m.get<int64_t>("memory_items", p.memory_items);
        p.gamma = m.get<double>("gamma", 0.0);
        p.alpha_shrink = m.get<double>("alpha_shrink", p.alpha_shrink);
        p.scorer_hidden = m.get<int64_t>("scorer_hidden", p.scorer_hidden);
        p.normalize_query = m.get<bool>("normalize_query", p.normalize_query);
        const auto addressing = m.get<std::string>("addressing", to_string(p.addressing));
        checked("model.addressing", [&] { p.addressing = parse_addressing(addressing); });
        c.model.discriminator.base_channels = m.get<int64_t>("discriminator_channels", c.model.discriminator.base_channels);
        if (c.model.discriminator.base_channels < 1) throw ConfigError("model.discriminator_channels", "must be >= 1");
        auto e = m.child("extractor");
        auto& x = c.model.extractor;
        x.base_width = e.get<int64_t>("width", x.base_width);
        x.seed = e.get<uint64_t>("seed", x.seed);
        x.weights_path = e.get<std::string>("weights", x.weights_path);
        if (x.base_width < 1) throw ConfigError("model.extractor.width", "must be >= 1");
        p.image_size = c.data.image_size();
        checked("model", [&] { p.validate(); });
    }

    {
        auto t = root.child("train");
        auto& o = c.train;
        o.lr_init = t.get<double>("lr_init", o.lr_init);
        o.lr_final = t.get<double>("lr_final", o.lr_final);
        o.warmup_epochs = t.get<int64_t>("warmup_epochs", o.warmup_epochs);
        o.weight_decay = t.get<double>("weight_decay", o.weight_decay);
        o.batch_size = t.get<int64_t>("batch_size", o.batch_size);
        o.max_epochs = t.get<int64_t>("max_epochs", o.max_epochs);
        o.seed = t.get<uint64_t>("seed", c.seed);
        o.alpha = t.get<double>("alpha", o.alpha);
        o.scorer_lr_scale = t.get<double>("scorer_lr_scale", o.scorer_lr_scale);
        o.checkpoint_every = t.get<int64_t>("checkpoint_every", o.checkpoint_every);
        o.adversarial = t.get<bool>("adversarial", o.adversarial);
        o.adversarial_start = t.get<int64_t>("adversarial_start", o.adversarial_start);
        o.adversarial_weight = t.get<double>("adversarial_weight", o.adversarial_weight);
        checked("train", [&] { o.validate(); });
    }

    {
        auto s = root.child("classifier");
        auto& k = c.classifier;
        k.id = s.get<std::string>("id", k.id);
        k.model.width = s.get<int64_t>("width", k.model.width);
        k.model.embedding_dim = s.get<int64_t>("embedding_dim", k.model.embedding_dim);
        k.train.epochs = s.get<int64_t>("epochs", k.train.epochs);
        k.train.batch_size = s.get<int64_t>("batch_size", k.train.batch_size);
        k.train.learning_rate = s.get<double>("learning_rate", k.train.learning_rate);
        k.train.weight_decay = s.get<double>("weight_decay", k.train.weight_decay);
        k.train.seed = s.get<uint64_t>("seed", c.seed);
        k.train.augment_blur = s.get<double>("augment_blur", k.train.augment_blur);
        k.train.augment_noise = s.get<double>("augment_noise", k.train.augment_noise);
        if (k.train.augment_blur < 0.0 || k.train.augment_blur > 1.0) {
            throw ConfigError("classifier.augment_blur", "must lie in [0, 1]");
        }
        if (k.train.augment_noise < 0.0) throw ConfigError("classifier.augment_noise", "must be >= 0");
        if (k.model.width < 1) throw ConfigError("classifier.width", "must be >= 1");
        if (k.model.embedding_dim < 1) throw ConfigError("classifier.embedding_dim", "must be >= 1");
        if (k.train.epochs < 0) throw ConfigError("classifier.epochs", "must be >= 0");
        if (k.train.batch_size < 2) throw ConfigError("classifier.batch_size", "must be >= 2");
    }

    if (root.has("attacks")) {
        const auto& list = root.raw("attacks");
        if (!list.is_array()) throw ConfigError("attacks", "expected an array");
        for (size_t i = 0; i < list.size(); ++i) {
            c.attacks.push_back(parse_attack(Section(list[i], "attacks[" + std::to_string(i) + "]"), c.seed));
        }
    } else {
        root.get<int>("attacks", 0);
    }

    {
        auto e = root.child("evaluation");
        c.cosine_ablation = e.get<bool>("cosine_ablation", c.cosine_ablation);
    }

    resolve(c);
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
    }
    return parse_run_config(j);
}

nlohmann::json purifier_model_json(const RunConfig& c) {
    const auto& p = c.model.purifier;
    return {{"image_size", p.image_size},
            {"in_channels", p.in_channels},
            {"top_channels", p.top_channels},
            {"bottom_channels", p.bottom_channels},
            {"top_reduced", p.top_reduced},
            {"bottom_reduced", p.bottom_reduced},
            {"memory_items", p.memory_items},
            {"gamma", p.gamma},
            {"alpha_shrink", p.alpha_shrink},
            {"scorer_hidden", p.scorer_hidden},
            {"normalize_query", p.normalize_query},
            {"addressing", to_string(p.addressing)},
            {"discriminator_channels", c.model.discriminator.base_channels},
            {"extractor", {{"width", c.model.extractor.base_width},
                           {"seed", c.model.extractor.seed},
                           {"weights", c.model.extractor.weights_path}}}};
}

nlohmann::json classifier_model_json(const RunConfig& c) {
    const auto& m = c.classifier.model;
    return {{"id", c.classifier.id},
            {"image_size", m.image_size},
            {"in_channels", m.in_channels},
            {"width", m.width},
            {"embedding_dim", m.embedding_dim},
            {"num_classes", m.num_classes}};
}

nlohmann::json to_json(const RunConfig& c) {
    json attacks = json::array();
    for (const auto& a : c.attacks) {
        attacks.push_back({{"family", to_string(a.family)},
                           {"epsilon", a.epsilon},
                           {"steps", a.steps},
                           {"step_size", a.step_size},
                           {"random_start", a.random_start},
                           {"learning_rate", a.learning_rate},
                           {"perturbation_scale", a.perturbation_scale},
                           {"batch_q", a.batch_q},
                           {"seed", a.seed}});
    }
    auto model = purifier_model_json(c);
    model.erase("image_size");
    model.erase("in_channels");
    const auto& t = c.train;
    const auto& k = c.classifier;
    const auto& m = c.data.manifest;
    return {
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"data",
         {{"source", c.data.source},
          {"train_k", c.data.train_k},
          {"test_k", c.data.test_k},
          {"synthetic",
           {{"classes", c.data.synthetic.n_classes},
            {"per_class", c.data.synthetic.per_class},
            {"size", c.data.synthetic.size},
            {"seed", c.data.synthetic.seed}}},
          {"manifest",
           {{"root", m.root},
            {"class_count", m.class_count},
            {"images_per_class", m.images_per_class},
            {"image_size", m.image_size},
            {"channels", m.channels}}}}},
        {"model", model},
        {"train",
         {{"lr_init", t.lr_init},
          {"lr_final", t.lr_final},
          {"warmup_epochs", t.warmup_epochs},
          {"weight_decay", t.weight_decay},
          {"batch_size", t.batch_size},
          {"max_epochs", t.max_epochs},
          {"seed", t.seed},
          {"alpha", t.alpha},
          {"scorer_lr_scale", t.scorer_lr_scale},
          {"checkpoint_every", t.checkpoint_every},
          {"adversarial", t.adversarial},
          {"adversarial_start", t.adversarial_start},
          {"adversarial_weight", t.adversarial_weight}}},
        {"classifier",
         {{"id", k.id},
          {"width", k.model.width},
          {"embedding_dim", k.model.embedding_dim},
          {"epochs", k.train.epochs},
          {"batch_size", k.train.batch_size},
          {"learning_rate", k.train.learning_rate},
          {"weight_decay", k.train.weight_decay},
          {"seed", k.train.seed},
          {"augment_blur", k.train.augment_blur},
          {"augment_noise", k.train.augment_noise}}},
        {"attacks", attacks},
        {"evaluation", {{"cosine_ablation", c.cosine_ablation}}},
    };
}

std::string fnv1a_hex(const std::string& text) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const RunConfig& c) {
    auto j = to_json(c);
    j.erase("output_dir");
    return fnv1a_hex(j.dump());
}

DatasetSplit load_data(const RunConfig& c) {
    if (c.data.source == "synthetic") {
        return split_per_class(synth_veins(c.data.synthetic), c.data.train_k, c.data.test_k);
    }
    return load_dataset(c.data.manifest);
}

}  // namespace msmem
