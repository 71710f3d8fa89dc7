#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "msmem/objectives.hpp"
#include "support.hpp"

using namespace msmem;
using Catch::Approx;

namespace {

double scalar(const torch::Tensor& t) { return t.item<double>(); }

FeatureExtractorConfig tiny_extractor() {
    FeatureExtractorConfig c;
    c.base_width = 4;
    c.seed = 5;
    return c;
}

}  // namespace

TEST_CASE("l1 loss", "[objectives]") {
    auto x = torch::rand({2, 1, 4, 4});
    CHECK(scalar(msmem::l1_loss(x, x)) == 0.0);
    CHECK(scalar(msmem::l1_loss(torch::ones({1, 1, 3, 3}), torch::zeros({1, 1, 3, 3}))) == 1.0);
    CHECK(scalar(msmem::l1_loss(torch::tensor({1.0, 0.0, 0.0, 0.0}).reshape({1, 1, 2, 2}), torch::zeros({1, 1, 2, 2}))) ==
          Approx(0.25));
    CHECK_THROWS_AS(msmem::l1_loss(torch::zeros({1, 1, 2, 2}), torch::zeros({1, 1, 3, 3})), std::invalid_argument);
}

TEST_CASE("perceptual loss", "[objectives]") {
    FeatureExtractor extractor(tiny_extractor());
    auto x = torch::rand({2, 1, 32, 32});
    auto y = torch::rand({2, 1, 32, 32});
    CHECK(scalar(perceptual_loss(*extractor, x, x)) == 0.0);
    const double xy = scalar(perceptual_loss(*extractor, x, y));
    CHECK(xy > 0.0);
    CHECK(xy == Approx(scalar(perceptual_loss(*extractor, y, x))).epsilon(1e-6));

    SECTION("one identity tap reduces to the pixel MSE") {
        CHECK(scalar(perceptual_loss({x}, {y})) == Approx(scalar((x - y).pow(2).mean())).epsilon(1e-6));
    }
    SECTION("five finite taps") {
        auto taps = extractor->taps(x);
        CHECK(taps.size() == 5);
        for (const auto& t : taps) CHECK(torch::isfinite(t).all().item<bool>());
    }
}

TEST_CASE("feature extractor stays frozen", "[objectives]") {
    FeatureExtractor extractor(tiny_extractor());
    for (const auto& p : extractor->parameters()) CHECK_FALSE(p.requires_grad());
    auto x = torch::rand({1, 1, 32, 32}, torch::requires_grad());
    auto loss = perceptual_loss(*extractor, torch::zeros({1, 1, 32, 32}), x);
    loss.backward();
    CHECK(x.grad().defined());
    for (const auto& p : extractor->parameters()) CHECK_FALSE(p.grad().defined());

    SECTION("same seed gives the same weights; a saved archive restores them") {
        FeatureExtractor twin(tiny_extractor());
        auto a = extractor->parameters();
        auto b = twin->parameters();
        for (size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], b[i]));

        const auto path = (std::filesystem::temp_directory_path() / "msmem_extractor.pt").string();
        torch::serialize::OutputArchive archive;
        extractor->save(archive);
        archive.save_to(path);
        auto other = tiny_extractor();
        other.seed = 99;
        other.weights_path = path;
        FeatureExtractor loaded(other);
        auto c = loaded->parameters();
        for (size_t i = 0; i < a.size(); ++i) CHECK(torch::equal(a[i], c[i]));
        for (const auto& p : loaded->parameters()) CHECK_FALSE(p.requires_grad());
    }
}

TEST_CASE("adversarial losses", "[objectives]") {
    auto ones = torch::ones({2, 6, 6});
    CHECK(scalar(hinge_disc_loss(ones, -ones)) == 0.0);
    CHECK(scalar(hinge_disc_loss(0 * ones, 0 * ones)) == 2.0);
    CHECK(scalar(hinge_disc_loss(2 * ones, -2 * ones)) == 0.0);
    CHECK(scalar(wgan_gen_loss(0 * ones)) == 0.0);
    CHECK(scalar(wgan_gen_loss(ones)) == -1.0);
    CHECK(scalar(wgan_gen_loss(torch::tensor({2.0, -4.0}))) == 1.0);
    auto random = torch::randn({4, 6, 6}) * 3;
    CHECK(scalar(hinge_disc_loss(random, random.flip(0))) >= 0.0);
}

TEST_CASE("adaptive beta", "[objectives]") {
    CHECK(adaptive_beta(2e-4, 1e-4, 1e-4) == Approx(1.0).epsilon(1e-12));
    CHECK(adaptive_beta(0.0, 0.3) == 0.0);
    CHECK(adaptive_beta(1.0, 0.0) == kBetaMax);
    CHECK_THROWS_AS(adaptive_beta(-1.0, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(adaptive_beta(1.0, -1.0), std::invalid_argument);
    // approaches the plain norm ratio once sigma is negligible
    double previous = 1e9;
    for (double c : {1e-2, 1.0, 1e2, 1e4}) {
        const double gap = std::abs(adaptive_beta(c * 0.7, c * 0.2) - 3.5);
        CHECK(gap <= previous);
        previous = gap;
    }
    CHECK(previous < 1e-6);
}

TEST_CASE("total loss and report", "[objectives]") {
    CHECK(total_loss(0.0, 0.0, 0.0, 0.0, 0.0002, 1.0) == 0.0);
    CHECK(total_loss(1.0, 1.0, 1.0, 1.0, 0.0002, 1.0) == Approx(3.0002).epsilon(1e-12));
    CHECK(total_loss(0.5, 0.25, 7.0, 2.0, 0.0, 0.5) == Approx(0.5 + 0.25 + 1.0));
    auto t = total_loss(torch::tensor(1.0), torch::tensor(1.0), torch::tensor(1.0), torch::tensor(1.0), 0.0002, 1.0);
    CHECK(t.item<double>() == Approx(3.0002).epsilon(1e-6));

    LossReport r;
    CHECK(r.finite());
    r.gen_adv = std::nan("");
    CHECK_FALSE(r.finite());
    CHECK(r.first_non_finite() == "gen_adv");
    CHECK(LossReport::field_names().size() == r.values().size());
}

TEST_CASE("mean addressing entropy", "[objectives]") {
    CHECK(scalar(mean_addressing_entropy(torch::Tensor())) == 0.0);
    auto w = torch::tensor({1.0, 0.0, 0.5, 0.5}).reshape({2, 2});
    CHECK(scalar(mean_addressing_entropy(w)) == Approx(std::log(2.0) / 2));
}

TEST_CASE("loss gradients match finite differences", "[objectives][gradient]") {
    auto gen = testing::seeded(31);
    SECTION("l1") {
        for (int point = 0; point < 5; ++point) {
            auto x = torch::rand({1, 1, 6, 6}, gen, torch::kFloat64);
            auto offset = torch::rand({1, 1, 6, 6}, gen, torch::kFloat64) * 0.5 + 0.05;
            auto sign = torch::randint(0, 2, {1, 1, 6, 6}, gen, torch::kFloat64) * 2 - 1;
            auto xb = (x + offset * sign).requires_grad_(true);
            auto analytic = torch::autograd::grad({msmem::l1_loss(x, xb)}, {xb})[0];
            auto numeric = testing::numeric_gradient([&] { return scalar(msmem::l1_loss(x, xb)); }, xb);
            CHECK(testing::relative_error(analytic, numeric) < 1e-3);
        }
    }
    SECTION("perceptual") {
        for (int point = 0; point < 5; ++point) {
            FeatureExtractor extractor(tiny_extractor());
            extractor->to(torch::kFloat64);
            auto x = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64);
            auto xb = torch::rand({1, 1, 16, 16}, gen, torch::kFloat64).requires_grad_(true);
            auto analytic = torch::autograd::grad({perceptual_loss(*extractor, x, xb)}, {xb})[0];
            auto numeric = testing::numeric_gradient([&] { return scalar(perceptual_loss(*extractor, x, xb)); }, xb);
            CHECK(testing::relative_error(analytic, numeric) < 1e-3);
        }
    }
    SECTION("hinge") {
        for (int point = 0; point < 5; ++point) {
            // keep every score at least 0.05 away from the hinge points
            auto away = [&](double centre) {
                auto t = torch::rand({2, 3, 3}, gen, torch::kFloat64) * 0.9 + 0.05;
                auto s = torch::randint(0, 2, {2, 3, 3}, gen, torch::kFloat64) * 2 - 1;
                return (centre + t * s).requires_grad_(true);
            };
            auto real = away(1.0), fake = away(-1.0);
            auto analytic = torch::autograd::grad({hinge_disc_loss(real, fake)}, {real, fake});
            auto nr = testing::numeric_gradient([&] { return scalar(hinge_disc_loss(real, fake)); }, real);
            auto nf = testing::numeric_gradient([&] { return scalar(hinge_disc_loss(real, fake)); }, fake);
            CHECK(testing::relative_error(analytic[0], nr) < 1e-3);
            CHECK(testing::relative_error(analytic[1], nf) < 1e-3);
        }
    }
}
