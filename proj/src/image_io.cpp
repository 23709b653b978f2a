#include "pdae/image_io.hpp"

#include <cstdio>
#include <memory>
#include <vector>

#include <fmt/format.h>
#include <png.h>

#include "pdae/errors.hpp"

namespace pdae {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) {
            std::fclose(f);
        }
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

int color_type_for(int64_t channels) {
    switch (channels) {
        case 1: return PNG_COLOR_TYPE_GRAY;
        case 3: return PNG_COLOR_TYPE_RGB;
        case 4: return PNG_COLOR_TYPE_RGBA;
        default: throw ValidationError(fmt::format("cannot write PNG with {} channels", channels));
    }
}

struct PngImage {
    const uint8_t* data;
    png_uint_32 height, width, channels;
    int color;
};

// Kept free of locals so nothing lives across the setjmp below.
bool write_png_stream(std::FILE* f, const PngImage* img) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        return false;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        return false;
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, img->width, img->height, 8, img->color, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (png_uint_32 y = 0; y < img->height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img->data + y * img->width * img->channels));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return true;
}

}  // namespace

void save_png(const std::string& path, const torch::Tensor& pixels) {
    if (pixels.dim() != 3 || pixels.scalar_type() != torch::kUInt8) {
        throw ValidationError("save_png expects uint8 [H, W, C]");
    }
    const auto px = pixels.contiguous();
    const PngImage img{px.data_ptr<uint8_t>(), static_cast<png_uint_32>(px.size(0)),
                       static_cast<png_uint_32>(px.size(1)), static_cast<png_uint_32>(px.size(2)),
                       color_type_for(px.size(2))};
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) {
        throw FormatError(fmt::format("cannot open {} for writing", path));
    }
    if (!write_png_stream(f.get(), &img)) {
        throw FormatError(fmt::format("failed writing {}", path));
    }
}

torch::Tensor load_png(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) {
        throw ImageReadError(fmt::format("cannot open image {}", path));
    }
    unsigned char sig[8] = {};
    if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
        throw ImageReadError(fmt::format("{} is not a PNG file", path));
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageReadError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw ImageReadError(fmt::format("corrupt PNG {}", path));
    }
    png_init_io(png, f.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_expand(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
    }
    png_read_update_info(png, info);
    const int64_t w = png_get_image_width(png, info);
    const int64_t h = png_get_image_height(png, info);
    const int64_t c = png_get_channels(png, info);
    auto out = torch::empty({h, w, c}, torch::kUInt8);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int64_t y = 0; y < h; ++y) {
        rows[static_cast<std::size_t>(y)] = out.data_ptr<uint8_t>() + y * w * c;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

torch::Tensor to_pixels(const torch::Tensor& images) {
    return ((images.to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5).round().to(torch::kUInt8);
}

torch::Tensor from_pixels(const torch::Tensor& pixels) {
    return pixels.to(torch::kFloat32) / 127.5f - 1.0f;
}

torch::Tensor make_grid(const torch::Tensor& images, int64_t nrow, int64_t pad) {
    if (images.dim() != 4 || images.size(0) < 1 || nrow < 1 || pad < 0) {
        throw ValidationError("make_grid expects [N, C, H, W] with N >= 1 and nrow >= 1");
    }
    const int64_t n = images.size(0), c = images.size(1), h = images.size(2), w = images.size(3);
    const int64_t cols = std::min(nrow, n);
    const int64_t rows = (n + cols - 1) / cols;
    auto grid = torch::zeros({rows * (h + pad) + pad, cols * (w + pad) + pad, c}, torch::kUInt8);
    const auto px = to_pixels(images).permute({0, 2, 3, 1});
    for (int64_t i = 0; i < n; ++i) {
        const int64_t r = i / cols, q = i % cols;
        grid.narrow(0, pad + r * (h + pad), h).narrow(1, pad + q * (w + pad), w).copy_(px[i]);
    }
    return grid;
}

void save_grid(const std::string& path, const torch::Tensor& images, int64_t nrow, int64_t pad) {
    save_png(path, make_grid(images.detach().cpu(), nrow, pad));
}

}  // namespace pdae
