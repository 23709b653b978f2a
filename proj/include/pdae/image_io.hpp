#pragma once

#include <string>

#include <torch/torch.h>

namespace pdae {

/// uint8 [H, W, C] with C in {1, 3, 4}.
void save_png(const std::string& path, const torch::Tensor& pixels);
torch::Tensor load_png(const std::string& path);

/// [-1, 1] floats to uint8, rounding to nearest.
torch::Tensor to_pixels(const torch::Tensor& images);
/// uint8 to [-1, 1]: 0 -> -1, 255 -> 1.
torch::Tensor from_pixels(const torch::Tensor& pixels);

/// Tiles [N, C, H, W] images in [-1, 1] into a uint8 [rows*(H+pad)+pad, ..., C] grid.
torch::Tensor make_grid(const torch::Tensor& images, int64_t nrow, int64_t pad = 2);
void save_grid(const std::string& path, const torch::Tensor& images, int64_t nrow, int64_t pad = 2);

}  // namespace pdae
