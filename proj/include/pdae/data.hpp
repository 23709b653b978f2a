#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

#include "pdae/rng.hpp"

namespace pdae {

/// Images are float32 [N, C, H, W] scaled to [-1, 1]; labels are int64 [N] or undefined.
struct Dataset {
    torch::Tensor images;
    torch::Tensor labels;

    int64_t size() const { return images.size(0); }
    int64_t channels() const { return images.size(1); }
    int64_t image_size() const { return images.size(2); }
    bool has_labels() const { return labels.defined(); }
    int64_t num_classes() const;

    Dataset subset(const torch::Tensor& index) const;
    Dataset head(int64_t n) const;
    /// Items with the given label.
    Dataset with_label(int64_t y) const;
    void validate() const;
};

enum class DatasetKind { Idx, ImageDir, SyntheticMixture, SyntheticDigits };

DatasetKind parse_dataset_kind(const std::string& name);

/// IDX images (ubyte, [N, H, W] or [N, H, W, C]) plus optional IDX labels ([N]). Gzip input is
/// decompressed transparently.
Dataset load_idx(const std::string& images_path, const std::string& labels_path = "");
void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& data);

/// PNG files in `dir`; if it holds subdirectories instead, each one (in sorted order) is a class.
Dataset load_image_dir(const std::string& dir);

struct MixtureSpec {
    int64_t points = 4;
    int64_t classes = 2;
    int64_t channels = 1;
    int64_t image_size = 8;
    // Per-pixel spread of points around their class prototype.
    double spread = 0.25;
};

/// Class prototypes with a few points scattered around each, clamped to [-1, 1]. Point i has
/// label i % classes.
Dataset make_synthetic_mixture(const MixtureSpec& spec, Rng& rng);

/// Stroke-rendered digits 0-9 on a 28x28 canvas with random affine jitter and stroke width.
Dataset make_synthetic_digits(int64_t count, Rng& rng, int64_t image_size = 28);

}  // namespace pdae
