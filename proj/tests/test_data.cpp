#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "msmem/data.hpp"
#include "support.hpp"

using namespace msmem;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    auto dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

SynthOptions small_synth() {
    SynthOptions o;
    o.n_classes = 6;
    o.per_class = 4;
    o.size = 32;
    o.seed = 3;
    return o;
}

}  // namespace

TEST_CASE("synthetic veins", "[data]") {
    auto data = synth_veins(small_synth());
    CHECK(data.images.sizes() == std::vector<int64_t>{24, 1, 32, 32});
    CHECK(data.class_count() == 6);
    CHECK(data.images.min().item<double>() >= 0.0);
    CHECK(data.images.max().item<double>() <= 1.0);

    SECTION("seeded determinism") {
        auto again = synth_veins(small_synth());
        CHECK(torch::equal(data.images, again.images));
        auto other = small_synth();
        other.seed = 4;
        CHECK_FALSE(torch::equal(data.images, synth_veins(other).images));
        // class patterns do not depend on how many classes are generated
        auto more = small_synth();
        more.n_classes = 8;
        CHECK(torch::equal(synth_veins(more).images.narrow(0, 0, 24), data.images));
    }
    SECTION("classes are separable by raw pixel distance") {
        SynthOptions o;
        o.n_classes = 20;
        o.per_class = 4;
        o.seed = 11;
        auto d = synth_veins(o);
        auto gen = testing::seeded(5);
        double intra = 0.0, inter = 0.0;
        for (int pair = 0; pair < 20; ++pair) {
            const int64_t cls = torch::randint(0, 20, {1}, gen).item<int64_t>();
            const int64_t other = (cls + 1 + torch::randint(0, 19, {1}, gen).item<int64_t>()) % 20;
            intra += (d.images[cls * 4] - d.images[cls * 4 + 1 + pair % 3]).abs().mean().item<double>();
            inter += (d.images[cls * 4] - d.images[other * 4 + pair % 4]).abs().mean().item<double>();
        }
        CHECK(intra < inter);
    }
    SECTION("size must be a multiple of 8") {
        auto bad = small_synth();
        bad.size = 30;
        CHECK_THROWS(synth_veins(bad));
    }
}

TEST_CASE("per-class split", "[data]") {
    auto data = synth_veins(small_synth());
    auto split = split_per_class(data, 3, 1);
    CHECK(split.train.size() == 18);
    CHECK(split.test.size() == 6);
    // disjoint and exhaustive
    std::set<std::string> seen(split.train.files.begin(), split.train.files.end());
    for (const auto& f : split.test.files) CHECK(seen.insert(f).second);
    CHECK(seen.size() == 24);

    auto empty_train = split_per_class(data, 0, 4);
    CHECK(empty_train.train.size() == 0);
    CHECK(empty_train.test.size() == 24);
    CHECK_THROWS(split_per_class(data, 3, 2));
}

TEST_CASE("directory datasets", "[data]") {
    auto root = fresh_dir("msmem_data_test");
    auto data = synth_veins(small_synth());
    write_dataset(data, root.string());

    DatasetManifest manifest;
    manifest.root = root.string();
    manifest.train_k = 3;
    manifest.test_k = 1;
    manifest.image_size = 32;

    SECTION("load, split, reload") {
        auto split = load_dataset(manifest);
        CHECK(split.train.size() == 18);
        CHECK(split.test.size() == 6);
        CHECK(split.train.class_count() == 6);
        // 8-bit round trip
        CHECK((split.train.images[0] - data.images[0]).abs().max().item<double>() <= 0.5 / 255 + 1e-6);
        auto again = load_dataset(manifest);
        CHECK(torch::equal(split.train.images, again.train.images));
        CHECK(split.train.files == again.train.files);
    }
    SECTION("resizing to another resolution") {
        manifest.image_size = 64;
        auto split = load_dataset(manifest);
        CHECK(split.train.images.sizes() == std::vector<int64_t>{18, 1, 64, 64});
    }
    SECTION("ragged classes are listed") {
        fs::remove(root / "class002" / "0003.png");
        try {
            load_dataset(manifest);
            FAIL("expected an error");
        } catch (const std::exception& e) {
            CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("class002"));
        }
    }
    SECTION("unreadable files are listed") {
        std::ofstream(root / "class001" / "0001.png") << "not an image";
        try {
            load_dataset(manifest);
            FAIL("expected an error");
        } catch (const std::exception& e) {
            CHECK_THAT(e.what(), Catch::Matchers::ContainsSubstring("0001.png"));
        }
    }
    SECTION("split larger than the class") {
        manifest.train_k = 4;
        CHECK_THROWS(load_dataset(manifest));
    }
}

TEST_CASE("image formats", "[data]") {
    auto dir = fresh_dir("msmem_image_test");
    auto img = torch::rand({1, 16, 16});
    SECTION("pfm is exact") {
        write_image((dir / "a.pfm").string(), img);
        CHECK(torch::equal(read_image((dir / "a.pfm").string()), img));
    }
    SECTION("8-bit formats quantise") {
        for (const char* name : {"a.png", "a.pgm"}) {
            write_image((dir / name).string(), img);
            auto back = read_image((dir / name).string());
            CHECK(back.sizes() == img.sizes());
            CHECK((back - img).abs().max().item<double>() <= 0.5 / 255 + 1e-6);
        }
    }
    CHECK(is_image_file("x/y.PNG"));
    CHECK_FALSE(is_image_file("notes.txt"));
}
