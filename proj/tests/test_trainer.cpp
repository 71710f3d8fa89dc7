#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msmem/trainer.hpp"
#include "support.hpp"

using namespace msmem;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct Setup {
    PurifierConfig purifier;
    DiscriminatorConfig discriminator;
    FeatureExtractorConfig extractor;
    TrainConfig train;
    Dataset data;

    Setup() {
        purifier.image_size = 32;
        purifier.top_channels = 8;
        purifier.bottom_channels = 8;
        purifier.memory_items = 10;
        discriminator.base_channels = 4;
        extractor.base_width = 4;
        train.warmup_epochs = 1;
        train.max_epochs = 3;
        train.batch_size = 4;
        train.seed = 42;
        SynthOptions o;
        o.n_classes = 3;
        o.per_class = 3;
        o.size = 32;
        data = synth_veins(o);
    }

    Trainer make() const { return Trainer(purifier, discriminator, extractor, train); }
};

std::vector<torch::Tensor> snapshot(torch::nn::Module& m) {
    std::vector<torch::Tensor> out;
    for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
    return out;
}

bool same(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (!torch::equal(a[i], b[i])) return false;
    }
    return true;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("learning rate schedule", "[trainer]") {
    TrainConfig c;
    c.lr_init = 1e-3;
    c.lr_final = 1e-4;
    c.warmup_epochs = 10;
    c.max_epochs = 110;
    CHECK(learning_rate_at(c, 0) == Approx(1e-4).epsilon(1e-12));
    CHECK(learning_rate_at(c, 4) == Approx(5e-4).epsilon(1e-12));
    CHECK(learning_rate_at(c, 10) == Approx(1e-3).epsilon(1e-12));
    CHECK(learning_rate_at(c, 60) == Approx(5.5e-4).epsilon(1e-12));
    CHECK(learning_rate_at(c, 110) == Approx(1e-4).epsilon(1e-12));
    for (int64_t e = 11; e < 110; ++e) CHECK(learning_rate_at(c, e) < learning_rate_at(c, e - 1));
}

TEST_CASE("train config validation", "[trainer]") {
    TrainConfig c;
    c.lr_final = 1.0;
    CHECK_THROWS(c.validate());
    c = TrainConfig{};
    c.warmup_epochs = 5;
    c.max_epochs = 5;
    CHECK_THROWS(c.validate());
    c.max_epochs = 0;
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("train step", "[trainer]") {
    Setup s;
    SECTION("zero learning rate leaves parameters bitwise unchanged") {
        s.train.lr_init = 0.0;
        s.train.lr_final = 0.0;
        s.train.adversarial_start = 0;
        auto t = s.make();
        auto before_g = snapshot(*t.purifier());
        auto before_d = snapshot(*t.discriminator());
        t.train_epoch(s.data);
        CHECK(same(before_g, snapshot(*t.purifier())));
        CHECK(same(before_d, snapshot(*t.discriminator())));
    }
    SECTION("report is finite and composed as documented") {
        s.train.adversarial_start = 0;
        auto t = s.make();
        auto r = t.train_step(s.data.images.narrow(0, 0, 4));
        CHECK(r.finite());
        CHECK(r.beta >= 0.0);
        CHECK(r.total == Approx(r.l1 + r.perceptual + s.train.alpha * (r.entropy_top + r.entropy_bottom) +
                                r.beta * r.gen_adv)
                             .epsilon(1e-5));
        for (const auto& p : t.purifier()->parameters()) CHECK(torch::isfinite(p).all().item<bool>());
    }
    SECTION("the adversarial terms stay off during warmup") {
        auto t = s.make();
        auto r = t.train_step(s.data.images.narrow(0, 0, 4));
        CHECK(r.beta == 0.0);
        CHECK(r.gen_adv == 0.0);
        CHECK(r.disc == 0.0);
    }
    SECTION("a non-finite loss aborts with the component name") {
        auto t = s.make();
        auto batch = s.data.images.narrow(0, 0, 4).clone();
        batch[0][0][0][0] = std::nanf("");
        auto before = snapshot(*t.purifier());
        try {
            t.train_step(batch);
            FAIL("expected a training error");
        } catch (const TrainingError& e) {
            CHECK(e.component == "l1");
        }
        CHECK(same(before, snapshot(*t.purifier())));
    }
}

TEST_CASE("determinism and resume", "[trainer]") {
    Setup s;
    auto first = s.make().train_epoch(s.data);
    auto second = s.make().train_epoch(s.data);
    CHECK(first.losses.values() == second.losses.values());

    const auto dir = fs::temp_directory_path() / "msmem_resume_test";
    fs::create_directories(dir);
    auto uninterrupted = s.make();
    uninterrupted.train_epoch(s.data);
    uninterrupted.train_epoch(s.data);
    auto expected = uninterrupted.train_epoch(s.data);

    auto before = s.make();
    before.train_epoch(s.data);
    before.train_epoch(s.data);
    before.save((dir / "resume.ckpt").string(), "h", "{}");
    auto s2 = s;
    s2.train.seed = 42;
    auto resumed = s2.make();
    resumed.load((dir / "resume.ckpt").string());
    CHECK(resumed.epoch() == 2);
    auto got = resumed.train_epoch(s.data);
    CHECK(got.epoch == expected.epoch);
    CHECK(got.losses.values() == expected.losses.values());
}

TEST_CASE("fit", "[trainer]") {
    Setup s;
    const auto dir = fs::temp_directory_path() / "msmem_fit_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    SECTION("zero epochs leaves the initial model") {
        s.train.max_epochs = 0;
        s.train.warmup_epochs = 0;
        auto t = s.make();
        auto before = snapshot(*t.purifier());
        auto result = t.fit(s.data);
        CHECK(result.history.empty());
        CHECK(same(before, snapshot(*t.purifier())));
    }
    SECTION("empty dataset") {
        auto t = s.make();
        Dataset empty;
        empty.images = torch::zeros({0, 1, 32, 32});
        empty.labels = torch::zeros({0}, torch::kLong);
        CHECK_THROWS_AS(t.fit(empty), std::invalid_argument);
    }
    SECTION("metrics and periodic checkpoints") {
        s.train.checkpoint_every = 2;
        auto t = s.make();
        FitOptions o;
        o.metrics_path = (dir / "metrics.csv").string();
        o.checkpoint_dir = dir.string();
        auto result = t.fit(s.data, o);
        CHECK_FALSE(result.stopped_early);
        CHECK(result.history.size() == 3);
        auto text = slurp(dir / "metrics.csv");
        CHECK(text.rfind(metrics_csv_header() + "\n", 0) == 0);
        CHECK(std::count(text.begin(), text.end(), '\n') == 4);
        CHECK(metrics_csv_header() == "epoch,lr,l1,perceptual,entropy_top,entropy_bottom,gen_adv,disc,beta,total");
        CHECK(fs::exists(dir / "purifier_epoch0002.ckpt"));
        CHECK_FALSE(fs::exists(dir / "purifier_epoch0001.ckpt"));

        // identical run, identical bytes
        auto again = s.make();
        o.metrics_path = (dir / "metrics2.csv").string();
        o.checkpoint_dir.clear();
        again.fit(s.data, o);
        CHECK(slurp(dir / "metrics2.csv") == text);
    }
    SECTION("non-finite data stops early and reports the component") {
        auto bad = s.data;
        bad.images = bad.images.clone();
        bad.images.fill_(std::nanf(""));
        auto t = s.make();
        auto result = t.fit(bad);
        CHECK(result.stopped_early);
        CHECK_THAT(result.error, Catch::Matchers::ContainsSubstring("l1"));
    }
}
