#include "msmem/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace msmem {

namespace fs = std::filesystem;

Dataset Dataset::select(const std::vector<int64_t>& indices) const {
    Dataset out;
    out.class_names = class_names;
    auto index = torch::tensor(indices, torch::kLong);
    if (indices.empty()) {
        auto shape = images.sizes().vec();
        shape[0] = 0;
        out.images = torch::empty(shape, images.options());
        out.labels = torch::empty({0}, torch::kLong);
        return out;
    }
    out.images = images.index_select(0, index);
    out.labels = labels.index_select(0, index);
    for (auto i : indices) out.files.push_back(files.at(i));
    return out;
}

void DatasetManifest::validate() const {
    if (root.empty()) throw std::invalid_argument("manifest: root is empty");
    if (train_k < 0 || test_k < 0) throw std::invalid_argument("manifest: split counts must be >= 0");
    if (images_per_class > 0 && train_k + test_k > images_per_class) {
        throw std::invalid_argument("manifest: train_k + test_k exceeds images_per_class");
    }
    if (image_size < 8 || image_size % 8 != 0) {
        throw std::invalid_argument("manifest: image_size must be a positive multiple of 8");
    }
    if (channels != 1) throw std::invalid_argument("manifest: only single-channel images are supported");
}

torch::Tensor resize_square(const torch::Tensor& image, int64_t size) {
    const bool batched = image.dim() == 4;
    auto x = batched ? image : image.unsqueeze(0);
    if (x.size(2) == size && x.size(3) == size) return image;
    auto y = torch::nn::functional::interpolate(
        x, torch::nn::functional::InterpolateFuncOptions()
               .size(std::vector<int64_t>{size, size})
               .mode(torch::kBilinear)
               .align_corners(false));
    y = y.clamp(0.0, 1.0);
    return batched ? y : y.squeeze(0);
}

DatasetSplit split_per_class(const Dataset& data, int64_t train_k, int64_t test_k) {
    std::map<int64_t, std::vector<int64_t>> by_class;
    auto labels = data.labels.contiguous();
    const auto* lab = labels.data_ptr<int64_t>();
    for (int64_t i = 0; i < data.size(); ++i) by_class[lab[i]].push_back(i);
    std::vector<int64_t> train, test;
    for (const auto& [label, idx] : by_class) {
        if (static_cast<int64_t>(idx.size()) < train_k + test_k) {
            throw std::invalid_argument("split: class " + std::to_string(label) + " has only " +
                                        std::to_string(idx.size()) + " images");
        }
        train.insert(train.end(), idx.begin(), idx.begin() + train_k);
        test.insert(test.end(), idx.begin() + train_k, idx.begin() + train_k + test_k);
    }
    return {data.select(train), data.select(test)};
}

DatasetSplit load_dataset(const DatasetManifest& manifest) {
    manifest.validate();
    const fs::path root(manifest.root);
    if (!fs::is_directory(root)) throw std::runtime_error("dataset root not found: " + manifest.root);

    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw std::runtime_error("dataset root has no class directories: " + manifest.root);
    if (manifest.class_count > 0 && static_cast<int64_t>(class_dirs.size()) != manifest.class_count) {
        throw std::runtime_error("dataset: expected " + std::to_string(manifest.class_count) +
                                 " classes, found " + std::to_string(class_dirs.size()));
    }

    std::vector<std::vector<std::string>> files(class_dirs.size());
    for (size_t c = 0; c < class_dirs.size(); ++c) {
        for (const auto& entry : fs::directory_iterator(class_dirs[c])) {
            if (entry.is_regular_file() && is_image_file(entry.path().string())) {
                files[c].push_back(entry.path().string());
            }
        }
        std::sort(files[c].begin(), files[c].end());
    }

    const int64_t expected = manifest.images_per_class > 0 ? manifest.images_per_class
                                                           : static_cast<int64_t>(files.front().size());
    std::ostringstream ragged;
    for (size_t c = 0; c < files.size(); ++c) {
        if (static_cast<int64_t>(files[c].size()) != expected) {
            ragged << "\n  " << class_dirs[c].filename().string() << ": " << files[c].size() << " images";
        }
    }
    if (!ragged.str().empty()) {
        throw std::runtime_error("dataset: classes must hold " + std::to_string(expected) + " images each;" +
                                 ragged.str());
    }
    if (manifest.train_k + manifest.test_k > expected) {
        throw std::runtime_error("dataset: train_k + test_k exceeds the " + std::to_string(expected) +
                                 " images per class");
    }

    Dataset all;
    std::vector<torch::Tensor> images;
    std::vector<int64_t> labels;
    std::ostringstream unreadable;
    for (size_t c = 0; c < files.size(); ++c) {
        all.class_names.push_back(class_dirs[c].filename().string());
        for (const auto& f : files[c]) {
            try {
                images.push_back(resize_square(read_image(f), manifest.image_size));
                labels.push_back(static_cast<int64_t>(c));
                all.files.push_back(f);
            } catch (const std::exception& e) {
                unreadable << "\n  " << e.what();
            }
        }
    }
    if (!unreadable.str().empty()) throw std::runtime_error("dataset: unreadable files:" + unreadable.str());
    all.images = torch::stack(images);
    all.labels = torch::tensor(labels, torch::kLong);
    return split_per_class(all, manifest.train_k, manifest.test_k);
}

void write_dataset(const Dataset& data, const std::string& root) {
    auto labels = data.labels.contiguous();
    const auto* lab = labels.data_ptr<int64_t>();
    std::map<int64_t, int64_t> counters;
    for (int64_t i = 0; i < data.size(); ++i) {
        const fs::path dir = fs::path(root) / data.class_names.at(lab[i]);
        fs::create_directories(dir);
        char name[32];
        std::snprintf(name, sizeof(name), "%04lld.png", static_cast<long long>(counters[lab[i]]++));
        write_image((dir / name).string(), data.images[i]);
    }
}

// Synthetic vein textures

namespace {

// Portable helpers on raw engine output; the std distributions are not
// specified bit-for-bit across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int64_t integer(int64_t lo, int64_t hi) { return lo + static_cast<int64_t>(uniform() * (hi - lo + 1)); }
    double normal() {
        const double u1 = std::max(uniform(), 1e-300);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

struct Stroke {
    std::vector<std::pair<double, double>> points;
    double width;
    double darkness;
};

struct ClassPattern {
    std::vector<Stroke> strokes;
    double background;
    double tilt_x;
    double tilt_y;
};

ClassPattern make_pattern(uint64_t seed, int64_t cls, int64_t size) {
    Rng rng(mix(seed, static_cast<uint64_t>(cls) + 1));
    const double s = static_cast<double>(size);
    const double scale = s / 64.0;
    ClassPattern p;
    p.background = rng.uniform(0.72, 0.85);
    p.tilt_x = rng.uniform(-0.06, 0.06);
    p.tilt_y = rng.uniform(-0.06, 0.06);
    const int64_t n_strokes = rng.integer(5, 8);
    for (int64_t k = 0; k < n_strokes; ++k) {
        Stroke st;
        st.width = rng.uniform(1.0, 2.2) * scale;
        st.darkness = rng.uniform(0.10, 0.20);
        double x = rng.uniform(0.1, 0.9) * s;
        double y = rng.uniform(0.1, 0.9) * s;
        double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const int64_t steps = rng.integer(40, 80);
        double turn = 0.0;
        for (int64_t i = 0; i < steps; ++i) {
            st.points.emplace_back(x, y);
            // smoothed random walk: the turn rate itself drifts
            turn = 0.85 * turn + 0.08 * rng.normal();
            heading += turn;
            x += scale * std::cos(heading);
            y += scale * std::sin(heading);
        }
        p.strokes.push_back(std::move(st));
    }
    return p;
}

void gaussian_blur(std::vector<double>& img, int64_t size, double sigma) {
    const int64_t radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        total += kernel[i + radius];
    }
    for (auto& k : kernel) k /= total;
    std::vector<double> tmp(img.size());
    auto at = [size](int64_t v) { return std::clamp<int64_t>(v, 0, size - 1); };
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            double acc = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) acc += kernel[i + radius] * img[y * size + at(x + i)];
            tmp[y * size + x] = acc;
        }
    }
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            double acc = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[at(y + i) * size + x];
            img[y * size + x] = acc;
        }
    }
}

torch::Tensor render_variant(const ClassPattern& pattern, uint64_t seed, int64_t cls, int64_t index,
                             int64_t size) {
    Rng rng(mix(mix(seed, static_cast<uint64_t>(cls) + 1), static_cast<uint64_t>(index) + 1000003));
    const double s = static_cast<double>(size);
    const double scale = s / 64.0;
    const double angle = rng.uniform(-6.0, 6.0) * std::numbers::pi / 180.0;
    const double tx = rng.uniform(-2.0, 2.0) * scale;
    const double ty = rng.uniform(-2.0, 2.0) * scale;
    const double contrast = rng.uniform(0.85, 1.15);
    const double brightness = rng.uniform(-0.04, 0.04);
    const double c = s / 2.0;
    const double ca = std::cos(angle), sa = std::sin(angle);

    std::vector<double> dark(size * size, 0.0);
    for (const auto& st : pattern.strokes) {
        const int64_t r = static_cast<int64_t>(std::ceil(2.5 * st.width));
        const double inv = 1.0 / (2.0 * st.width * st.width);
        for (const auto& [px, py] : st.points) {
            const double x = ca * (px - c) - sa * (py - c) + c + tx;
            const double y = sa * (px - c) + ca * (py - c) + c + ty;
            const int64_t ix = static_cast<int64_t>(std::floor(x));
            const int64_t iy = static_cast<int64_t>(std::floor(y));
            for (int64_t yy = iy - r; yy <= iy + r; ++yy) {
                if (yy < 0 || yy >= size) continue;
                for (int64_t xx = ix - r; xx <= ix + r; ++xx) {
                    if (xx < 0 || xx >= size) continue;
                    const double d2 = (xx + 0.5 - x) * (xx + 0.5 - x) + (yy + 0.5 - y) * (yy + 0.5 - y);
                    auto& v = dark[yy * size + xx];
                    v = std::max(v, st.darkness * std::exp(-d2 * inv));
                }
            }
        }
    }
    gaussian_blur(dark, size, 0.8 * scale);

    auto out = torch::empty({1, size, size});
    auto* dst = out.data_ptr<float>();
    for (int64_t y = 0; y < size; ++y) {
        for (int64_t x = 0; x < size; ++x) {
            const double bg = pattern.background + pattern.tilt_x * (x / s - 0.5) + pattern.tilt_y * (y / s - 0.5);
            double v = bg * (1.0 - dark[y * size + x]);
            v = (v - 0.5) * contrast + 0.5 + brightness + 0.01 * rng.normal();
            dst[y * size + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

}  // namespace

Dataset synth_veins(const SynthOptions& o) {
    if (o.size < 8 || o.size % 8 != 0) throw std::invalid_argument("synth: size must be a positive multiple of 8");
    if (o.n_classes < 1 || o.per_class < 1) throw std::invalid_argument("synth: counts must be positive");
    Dataset data;
    std::vector<torch::Tensor> images;
    std::vector<int64_t> labels;
    for (int64_t cls = 0; cls < o.n_classes; ++cls) {
        char name[32];
        std::snprintf(name, sizeof(name), "class%03lld", static_cast<long long>(cls));
        data.class_names.emplace_back(name);
        const auto pattern = make_pattern(o.seed, cls, o.size);
        for (int64_t i = 0; i < o.per_class; ++i) {
            images.push_back(render_variant(pattern, o.seed, cls, i, o.size));
            labels.push_back(cls);
            data.files.push_back(std::string(name) + "/" + std::to_string(i));
        }
    }
    data.images = torch::stack(images);
    data.labels = torch::tensor(labels, torch::kLong);
    return data;
}

}  // namespace msmem
