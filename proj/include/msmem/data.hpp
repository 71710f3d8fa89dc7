#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace msmem {

/// Images [N, C, H, W] in [0, 1] with integer class labels [N].
struct Dataset {
    torch::Tensor images;
    torch::Tensor labels;
    std::vector<std::string> class_names;  ///< indexed by label
    std::vector<std::string> files;        ///< source path (or synthetic name) per image

    int64_t size() const { return images.defined() ? images.size(0) : 0; }
    int64_t class_count() const { return static_cast<int64_t>(class_names.size()); }
    Dataset select(const std::vector<int64_t>& indices) const;
};

struct DatasetSplit {
    Dataset train;
    Dataset test;
};

/// Directory dataset: root/<class_id>/<image files>.
struct DatasetManifest {
    std::string root;
    int64_t class_count = 0;      ///< 0 accepts whatever is found
    int64_t images_per_class = 0; ///< 0 accepts any uniform count
    int64_t train_k = 15;
    int64_t test_k = 5;
    int64_t image_size = 64;
    int64_t channels = 1;

    void validate() const;
};

/// Loads, resizes and splits per class by sorted filename: the first train_k files
/// train, the next test_k test. Throws std::runtime_error listing every offender on
/// ragged classes or unreadable files.
DatasetSplit load_dataset(const DatasetManifest& manifest);

/// Per class, the first train_k images (in dataset order) train and the next test_k test.
DatasetSplit split_per_class(const Dataset& data, int64_t train_k, int64_t test_k);

struct SynthOptions {
    int64_t n_classes = 50;
    int64_t per_class = 20;
    int64_t size = 64;
    uint64_t seed = 7;
};

/// Seeded synthetic vein textures: dark smoothed random-walk strokes on a bright
/// noisy background. Each class owns one stroke pattern; its images are small
/// rotations, translations and contrast changes of it.
Dataset synth_veins(const SynthOptions& options);

/// Writes root/<class_name>/<index>.png (8-bit).
void write_dataset(const Dataset& data, const std::string& root);

// Image files. Grayscale float [1, H, W] in [0, 1]; RGB inputs are converted by luma.
// Readable: .png, .pgm/.ppm (P2, P3, P5, P6), .pfm. Writable: .png, .pgm (8-bit), .pfm (exact float).
torch::Tensor read_image(const std::string& path);
void write_image(const std::string& path, const torch::Tensor& image);
bool is_image_file(const std::string& path);

/// Bilinear resize of [C, H, W] or [B, C, H, W] to size x size.
torch::Tensor resize_square(const torch::Tensor& image, int64_t size);

}  // namespace msmem
