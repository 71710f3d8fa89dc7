#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <png.h>

#include "msmem/data.hpp"

namespace msmem {

namespace fs = std::filesystem;

namespace {

std::string lower_extension(const std::string& path) {
    auto ext = fs::path(path).extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

torch::Tensor luma(const std::vector<float>& rgb, int64_t width, int64_t height) {
    auto out = torch::empty({1, height, width});
    auto* dst = out.data_ptr<float>();
    for (int64_t i = 0; i < width * height; ++i) {
        dst[i] = 0.299f * rgb[3 * i] + 0.587f * rgb[3 * i + 1] + 0.114f * rgb[3 * i + 2];
    }
    return out;
}

torch::Tensor read_png(const std::string& path) {
    png_image image;
    std::memset(&image, 0, sizeof(image));
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw std::runtime_error(path + ": " + image.message);
    }
    image.format = PNG_FORMAT_RGB;
    std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
        std::string message = image.message;
        png_image_free(&image);
        throw std::runtime_error(path + ": " + message);
    }
    std::vector<float> rgb(buffer.size());
    std::transform(buffer.begin(), buffer.end(), rgb.begin(), [](png_byte b) { return b / 255.0f; });
    return luma(rgb, image.width, image.height);
}

// Reads the next whitespace-separated header token, skipping '#' comments.
std::string pnm_token(std::istream& in) {
    std::string token;
    while (in) {
        int c = in.get();
        if (c == '#') {
            std::string skip;
            std::getline(in, skip);
        } else if (std::isspace(c)) {
            if (!token.empty()) break;
        } else if (c != EOF) {
            token.push_back(static_cast<char>(c));
        }
    }
    return token;
}

torch::Tensor read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    const std::string magic = pnm_token(in);
    if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
        throw std::runtime_error(path + ": unsupported PNM type '" + magic + "'");
    }
    const int64_t width = std::stoll(pnm_token(in));
    const int64_t height = std::stoll(pnm_token(in));
    const double maxval = std::stod(pnm_token(in));
    if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
        throw std::runtime_error(path + ": bad PNM header");
    }
    const bool color = magic == "P3" || magic == "P6";
    const int64_t count = width * height * (color ? 3 : 1);
    std::vector<float> values(count);
    if (magic == "P2" || magic == "P3") {
        for (auto& v : values) v = static_cast<float>(std::stod(pnm_token(in)) / maxval);
    } else {
        const bool wide = maxval > 255;
        for (auto& v : values) {
            int hi = in.get();
            int raw = hi;
            if (wide) raw = (hi << 8) | in.get();
            v = static_cast<float>(raw / maxval);
        }
    }
    if (!in && !in.eof()) throw std::runtime_error(path + ": truncated PNM data");
    if (color) return luma(values, width, height);
    return torch::from_blob(values.data(), {1, height, width}, torch::kFloat).clone();
}

torch::Tensor read_pfm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    const std::string magic = pnm_token(in);
    if (magic != "Pf" && magic != "PF") throw std::runtime_error(path + ": not a PFM file");
    const int64_t width = std::stoll(pnm_token(in));
    const int64_t height = std::stoll(pnm_token(in));
    const double scale = std::stod(pnm_token(in));
    const int64_t channels = magic == "PF" ? 3 : 1;
    std::vector<float> values(width * height * channels);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(float)));
    if (!in) throw std::runtime_error(path + ": truncated PFM data");
    const bool little = scale < 0;
    if (little != (std::endian::native == std::endian::little)) {
        for (auto& v : values) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            bits = __builtin_bswap32(bits);
            std::memcpy(&v, &bits, 4);
        }
    }
    // PFM stores rows bottom to top
    std::vector<float> flipped(values.size());
    const int64_t row = width * channels;
    for (int64_t y = 0; y < height; ++y) {
        std::copy_n(values.begin() + (height - 1 - y) * row, row, flipped.begin() + y * row);
    }
    if (channels == 3) return luma(flipped, width, height);
    return torch::from_blob(flipped.data(), {1, height, width}, torch::kFloat).clone();
}

torch::Tensor as_gray_hw(const torch::Tensor& image) {
    auto t = image.detach().to(torch::kFloat).contiguous();
    if (t.dim() == 3) {
        TORCH_CHECK(t.size(0) == 1, "write_image expects a single-channel image");
        t = t[0];
    }
    TORCH_CHECK(t.dim() == 2, "write_image expects [H, W] or [1, H, W]");
    return t.contiguous();
}

std::vector<uint8_t> to_bytes(const torch::Tensor& hw) {
    auto clamped = hw.clamp(0.0, 1.0);
    std::vector<uint8_t> bytes(clamped.numel());
    const float* src = clamped.data_ptr<float>();
    for (size_t i = 0; i < bytes.size(); ++i) {
        bytes[i] = static_cast<uint8_t>(std::lround(src[i] * 255.0f));
    }
    return bytes;
}

}  // namespace

bool is_image_file(const std::string& path) {
    const auto ext = lower_extension(path);
    return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm" || ext == ".pfm";
}

torch::Tensor read_image(const std::string& path) {
    const auto ext = lower_extension(path);
    if (ext == ".png") return read_png(path);
    if (ext == ".pfm") return read_pfm(path);
    if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") return read_pnm(path);
    throw std::runtime_error(path + ": unsupported image format");
}

void write_image(const std::string& path, const torch::Tensor& image) {
    const auto hw = as_gray_hw(image);
    const int64_t height = hw.size(0);
    const int64_t width = hw.size(1);
    const auto ext = lower_extension(path);
    if (ext == ".png") {
        auto bytes = to_bytes(hw);
        png_image png;
        std::memset(&png, 0, sizeof(png));
        png.version = PNG_IMAGE_VERSION;
        png.width = static_cast<png_uint_32>(width);
        png.height = static_cast<png_uint_32>(height);
        png.format = PNG_FORMAT_GRAY;
        if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
            throw std::runtime_error(path + ": " + png.message);
        }
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error(path + ": cannot open for writing");
    if (ext == ".pgm") {
        auto bytes = to_bytes(hw);
        out << "P5\n" << width << " " << height << "\n255\n";
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    } else if (ext == ".pfm") {
        out << "Pf\n" << width << " " << height << "\n"
            << (std::endian::native == std::endian::little ? "-1.0" : "1.0") << "\n";
        const float* src = hw.data_ptr<float>();
        for (int64_t y = height - 1; y >= 0; --y) {
            out.write(reinterpret_cast<const char*>(src + y * width),
                      static_cast<std::streamsize>(width * sizeof(float)));
        }
    } else {
        throw std::runtime_error(path + ": unsupported output format");
    }
    if (!out) throw std::runtime_error(path + ": write failed");
}

}  // namespace msmem
