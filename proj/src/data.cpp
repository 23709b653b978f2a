#include "pdae/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include <fmt/format.h>
#include <zlib.h>

#include "pdae/errors.hpp"
#include "pdae/image_io.hpp"

namespace pdae {

namespace fs = std::filesystem;

int64_t Dataset::num_classes() const {
    if (!has_labels() || labels.numel() == 0) {
        return 0;
    }
    return labels.max().item<int64_t>() + 1;
}

Dataset Dataset::subset(const torch::Tensor& index) const {
    Dataset out;
    out.images = images.index_select(0, index);
    if (has_labels()) {
        out.labels = labels.index_select(0, index);
    }
    return out;
}

Dataset Dataset::head(int64_t n) const {
    n = std::min(n, size());
    Dataset out;
    out.images = images.narrow(0, 0, n);
    if (has_labels()) {
        out.labels = labels.narrow(0, 0, n);
    }
    return out;
}

Dataset Dataset::with_label(int64_t y) const {
    if (!has_labels()) {
        throw ValidationError("dataset has no labels");
    }
    return subset(torch::nonzero(labels == y).flatten());
}

void Dataset::validate() const {
    if (!images.defined() || images.dim() != 4) {
        throw ValidationError("dataset images must be [N, C, H, W]");
    }
    if (images.size(0) == 0) {
        throw EmptyDatasetError("dataset is empty");
    }
    if (images.size(2) != images.size(3)) {
        throw ValidationError(fmt::format("images must be square, got {}x{}", images.size(2), images.size(3)));
    }
    if (has_labels() && (labels.dim() != 1 || labels.size(0) != images.size(0))) {
        throw ValidationError("labels must be [N] and match the image count");
    }
    if (has_labels() && labels.min().item<int64_t>() < 0) {
        throw ValidationError("labels must be non-negative");
    }
}

DatasetKind parse_dataset_kind(const std::string& name) {
    if (name == "idx") return DatasetKind::Idx;
    if (name == "image-dir") return DatasetKind::ImageDir;
    if (name == "synthetic-mixture") return DatasetKind::SyntheticMixture;
    if (name == "synthetic-digits") return DatasetKind::SyntheticDigits;
    throw ConfigError(fmt::format("unknown dataset kind '{}'", name));
}

namespace {

std::vector<uint8_t> read_all(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) {
        throw FormatError(fmt::format("cannot open {}", path));
    }
    std::vector<uint8_t> out;
    std::array<uint8_t, 1 << 16> chunk{};
    int n = 0;
    while ((n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()))) > 0) {
        out.insert(out.end(), chunk.begin(), chunk.begin() + n);
    }
    const bool failed = n < 0;
    gzclose(f);
    if (failed) {
        throw FormatError(fmt::format("read error in {}", path));
    }
    return out;
}

struct IdxArray {
    std::vector<int64_t> dims;
    const uint8_t* data = nullptr;
};

IdxArray parse_idx(const std::vector<uint8_t>& bytes, const std::string& path) {
    if (bytes.size() < 4 || bytes[0] != 0 || bytes[1] != 0) {
        throw IdxHeaderError(fmt::format("{}: bad IDX magic", path));
    }
    if (bytes[2] != 0x08) {
        throw IdxHeaderError(fmt::format("{}: unsupported IDX element type 0x{:02x}", path, bytes[2]));
    }
    const std::size_t ndim = bytes[3];
    if (ndim < 1 || bytes.size() < 4 + 4 * ndim) {
        throw IdxHeaderError(fmt::format("{}: truncated IDX header", path));
    }
    IdxArray a;
    std::size_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        const uint8_t* p = bytes.data() + 4 + 4 * i;
        const int64_t d = (int64_t{p[0]} << 24) | (int64_t{p[1]} << 16) | (int64_t{p[2]} << 8) | p[3];
        a.dims.push_back(d);
        count *= static_cast<std::size_t>(d);
    }
    if (bytes.size() != 4 + 4 * ndim + count) {
        throw IdxHeaderError(fmt::format("{}: header promises {} bytes of data, file has {}", path, count,
                                         bytes.size() - 4 - 4 * ndim));
    }
    a.data = bytes.data() + 4 + 4 * ndim;
    return a;
}

void put_be32(std::ofstream& out, uint32_t v) {
    const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                       static_cast<char>(v)};
    out.write(b, 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img_bytes = read_all(images_path);
    const auto img = parse_idx(img_bytes, images_path);
    if (img.dims.size() != 3 && img.dims.size() != 4) {
        throw IdxHeaderError(fmt::format("{}: image IDX must have 3 or 4 dimensions, has {}", images_path,
                                         img.dims.size()));
    }
    const int64_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
    const int64_t c = img.dims.size() == 4 ? img.dims[3] : 1;
    if (n == 0) {
        throw EmptyDatasetError(fmt::format("{} contains no images", images_path));
    }
    auto pixels = torch::from_blob(const_cast<uint8_t*>(img.data), {n, h, w, c}, torch::kUInt8).clone();
    Dataset out;
    out.images = from_pixels(pixels).permute({0, 3, 1, 2}).contiguous();
    if (!labels_path.empty()) {
        const auto lab_bytes = read_all(labels_path);
        const auto lab = parse_idx(lab_bytes, labels_path);
        if (lab.dims.size() != 1) {
            throw IdxHeaderError(fmt::format("{}: label IDX must be one-dimensional", labels_path));
        }
        if (lab.dims[0] != n) {
            throw IdxHeaderError(fmt::format("{} has {} labels for {} images", labels_path, lab.dims[0], n));
        }
        out.labels = torch::from_blob(const_cast<uint8_t*>(lab.data), {n}, torch::kUInt8).to(torch::kLong);
    }
    out.validate();
    return out;
}

void write_idx(const std::string& images_path, const std::string& labels_path, const Dataset& data) {
    data.validate();
    const auto px = to_pixels(data.images).permute({0, 2, 3, 1}).contiguous();
    std::ofstream img(images_path, std::ios::binary);
    if (!img) {
        throw FormatError(fmt::format("cannot write {}", images_path));
    }
    const bool rgb = data.channels() != 1;
    img.write("\0\0\x08", 3);
    img.put(static_cast<char>(rgb ? 4 : 3));
    put_be32(img, static_cast<uint32_t>(px.size(0)));
    put_be32(img, static_cast<uint32_t>(px.size(1)));
    put_be32(img, static_cast<uint32_t>(px.size(2)));
    if (rgb) {
        put_be32(img, static_cast<uint32_t>(px.size(3)));
    }
    img.write(reinterpret_cast<const char*>(px.data_ptr<uint8_t>()), static_cast<std::streamsize>(px.numel()));
    if (!labels_path.empty()) {
        if (!data.has_labels()) {
            throw ValidationError("dataset has no labels to write");
        }
        if (data.labels.max().item<int64_t>() > 255) {
            throw ValidationError("IDX labels must fit in one byte");
        }
        const auto lab = data.labels.to(torch::kUInt8).contiguous();
        std::ofstream out(labels_path, std::ios::binary);
        if (!out) {
            throw FormatError(fmt::format("cannot write {}", labels_path));
        }
        out.write("\0\0\x08\x01", 4);
        put_be32(out, static_cast<uint32_t>(lab.size(0)));
        out.write(reinterpret_cast<const char*>(lab.data_ptr<uint8_t>()), static_cast<std::streamsize>(lab.numel()));
    }
}

Dataset load_image_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) {
        throw ImageReadError(fmt::format("{} is not a directory", dir));
    }
    const auto list_pngs = [](const fs::path& p) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(p)) {
            if (e.is_regular_file() && e.path().extension() == ".png") {
                files.push_back(e.path());
            }
        }
        std::sort(files.begin(), files.end());
        return files;
    };
    std::vector<fs::path> classes;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) {
            classes.push_back(e.path());
        }
    }
    std::sort(classes.begin(), classes.end());
    std::vector<fs::path> files;
    std::vector<int64_t> labels;
    if (classes.empty()) {
        files = list_pngs(dir);
    } else {
        for (std::size_t y = 0; y < classes.size(); ++y) {
            for (auto& f : list_pngs(classes[y])) {
                files.push_back(f);
                labels.push_back(static_cast<int64_t>(y));
            }
        }
    }
    if (files.empty()) {
        throw EmptyDatasetError(fmt::format("no PNG images under {}", dir));
    }
    std::vector<torch::Tensor> images;
    for (const auto& f : files) {
        auto px = load_png(f.string());
        if (!images.empty() && px.sizes() != images.front().sizes()) {
            throw ImageReadError(fmt::format("{} has size [{}x{}x{}], expected the size of the first image",
                                             f.string(), px.size(0), px.size(1), px.size(2)));
        }
        images.push_back(px);
    }
    Dataset out;
    out.images = from_pixels(torch::stack(images)).permute({0, 3, 1, 2}).contiguous();
    if (!labels.empty()) {
        out.labels = torch::tensor(labels, torch::kLong);
    }
    out.validate();
    return out;
}

Dataset make_synthetic_mixture(const MixtureSpec& spec, Rng& rng) {
    if (spec.points < 1 || spec.classes < 1 || spec.classes > spec.points || spec.channels < 1 ||
        spec.image_size < 1 || spec.spread < 0.0) {
        throw ValidationError("synthetic mixture needs 1 <= classes <= points and positive sizes");
    }
    const std::vector<int64_t> shape{spec.channels, spec.image_size, spec.image_size};
    auto prototypes = rng.normal({spec.classes, spec.channels, spec.image_size, spec.image_size}).clamp(-1.5, 1.5) / 1.5;
    auto labels = torch::arange(spec.points, torch::kLong) % spec.classes;
    auto offsets = rng.normal({spec.points, spec.channels, spec.image_size, spec.image_size}) * spec.spread;
    Dataset out;
    out.images = (prototypes.index_select(0, labels) + offsets).clamp(-1.0, 1.0);
    out.labels = labels;
    return out;
}

namespace {

struct Pt {
    double x, y;
};
using Stroke = std::vector<Pt>;

Stroke arc(double cx, double cy, double rx, double ry, double a0, double a1, int n = 20) {
    Stroke s;
    for (int i = 0; i <= n; ++i) {
        const double a = (a0 + (a1 - a0) * i / n) * std::numbers::pi / 180.0;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

// Glyphs on a unit box, y pointing down.
const std::array<std::vector<Stroke>, 10>& glyphs() {
    static const std::array<std::vector<Stroke>, 10> g = {{
        {arc(0.5, 0.5, 0.28, 0.42, 0, 360, 28)},
        {{{0.36, 0.22}, {0.52, 0.08}, {0.52, 0.92}}},
        {[] {
            auto s = arc(0.5, 0.3, 0.26, 0.22, 190, 370);
            s.push_back({0.24, 0.92});
            s.push_back({0.78, 0.92});
            return s;
        }()},
        {arc(0.5, 0.29, 0.24, 0.2, 200, 450), arc(0.5, 0.71, 0.27, 0.22, 270, 520)},
        {{{0.66, 0.92}, {0.66, 0.08}, {0.2, 0.66}, {0.82, 0.66}}},
        {{{0.76, 0.08}, {0.32, 0.08}, {0.29, 0.45}}, arc(0.48, 0.66, 0.28, 0.26, 225, 500)},
        {{{0.7, 0.1}, {0.42, 0.34}, {0.29, 0.66}}, arc(0.5, 0.7, 0.22, 0.2, 0, 360)},
        {{{0.2, 0.08}, {0.8, 0.08}, {0.42, 0.92}}},
        {arc(0.5, 0.28, 0.2, 0.2, 0, 360), arc(0.5, 0.7, 0.25, 0.22, 0, 360)},
        {arc(0.5, 0.3, 0.22, 0.2, 0, 360), {{0.72, 0.3}, {0.62, 0.92}}},
    }};
    return g;
}

double segment_distance(Pt p, Pt a, Pt b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double u = len2 > 0.0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
    u = std::clamp(u, 0.0, 1.0);
    const double dx = p.x - a.x - u * vx, dy = p.y - a.y - u * vy;
    return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Dataset make_synthetic_digits(int64_t count, Rng& rng, int64_t image_size) {
    if (count < 1 || image_size < 8) {
        throw ValidationError("synthetic digits need count >= 1 and image size >= 8");
    }
    const auto labels = rng.randint(0, 10, count);
    const auto params = rng.uniform(count * 6);
    const auto* lab = labels.data_ptr<int64_t>();
    const auto* u = params.data_ptr<double>();
    auto images = torch::empty({count, 1, image_size, image_size}, torch::kFloat32);
    auto* px = images.data_ptr<float>();
    const double size = static_cast<double>(image_size);
    const double center = (size - 1.0) / 2.0;
    for (int64_t i = 0; i < count; ++i) {
        const double* r = u + 6 * i;
        const double scale = size * (20.0 / 28.0) * (0.8 + 0.25 * r[0]);
        const double angle = (r[1] - 0.5) * 24.0 * std::numbers::pi / 180.0;
        const double shear = (r[2] - 0.5) * 0.4;
        const double tx = (r[3] - 0.5) * 3.0 * size / 28.0;
        const double ty = (r[4] - 0.5) * 3.0 * size / 28.0;
        const double thick = (1.6 + 1.2 * r[5]) * size / 28.0;
        const double ca = std::cos(angle), sa = std::sin(angle);
        std::vector<std::pair<Pt, Pt>> segs;
        for (const auto& stroke : glyphs()[static_cast<std::size_t>(lab[i])]) {
            std::vector<Pt> mapped;
            for (const auto& q : stroke) {
                const double x = (q.x - 0.5) + shear * (q.y - 0.5);
                const double y = q.y - 0.5;
                mapped.push_back({center + tx + scale * (ca * x - sa * y), center + ty + scale * (sa * x + ca * y)});
            }
            for (std::size_t k = 1; k < mapped.size(); ++k) {
                segs.emplace_back(mapped[k - 1], mapped[k]);
            }
        }
        float* img = px + i * image_size * image_size;
        for (int64_t yy = 0; yy < image_size; ++yy) {
            for (int64_t xx = 0; xx < image_size; ++xx) {
                const Pt p{static_cast<double>(xx), static_cast<double>(yy)};
                double d = 1e9;
                for (const auto& [a, b] : segs) {
                    d = std::min(d, segment_distance(p, a, b));
                }
                const double ink = std::clamp(0.5 * thick + 0.5 - d, 0.0, 1.0);
                img[yy * image_size + xx] = static_cast<float>(2.0 * ink - 1.0);
            }
        }
    }
    Dataset out;
    out.images = images;
    out.labels = labels;
    return out;
}

}  // namespace pdae
