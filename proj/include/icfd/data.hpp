#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "icfd/tensor.hpp"

namespace icfd::data {

struct GrayscaleImage {
    Tensor<float> pixels; // [1,H,W], values in [0,1]
    int label = 0;
};

struct ClassDifficulty {
    int grain = 2;           // texture cell size in pixels
    double noise = 0.2;      // per-pixel speckle amplitude
    double brightness = 0.5; // mean level
};

struct DatasetSpec {
    int num_classes = 4;
    std::vector<int> counts{150, 150, 150, 150};
    std::vector<ClassDifficulty> difficulty{
        {2, 0.40, 0.38}, {3, 0.30, 0.46}, {4, 0.20, 0.54}, {5, 0.10, 0.66}};
    int image_size = 64;
    std::uint64_t seed = 7;

    void validate() const {
        if (num_classes < 2) throw ConfigError("dataset: need at least 2 classes");
        if (static_cast<int>(counts.size()) != num_classes)
            throw ConfigError("dataset: counts must list one entry per class");
        for (int c : counts)
            if (c < 1) throw ConfigError("dataset: per-class counts must be >= 1");
        if (static_cast<int>(difficulty.size()) != num_classes)
            throw ConfigError("dataset: difficulty must list one entry per class");
        for (const auto& d : difficulty) {
            if (d.grain < 1) throw ConfigError("dataset: grain must be >= 1");
            if (d.noise < 0 || d.brightness < 0 || d.brightness > 1)
                throw ConfigError("dataset: noise >= 0 and brightness in [0,1] required");
        }
        if (image_size < 16) throw ConfigError("dataset: image size must be >= 16");
    }
};

struct Dataset {
    std::vector<GrayscaleImage> items;
    int num_classes = 0;

    int size() const { return static_cast<int>(items.size()); }
    int image_size() const { return items.empty() ? 0 : items.front().pixels.dim(1); }
};

struct SplitDataset {
    Dataset train;
    Dataset test;
};

// One textured sample: class mean level + blocky low-resolution texture +
// per-pixel speckle, clamped to [0,1]. Pixels depend only on
// (spec seed, class, index), so regeneration is bit-identical.
inline GrayscaleImage synth_image(const DatasetSpec& spec, int cls, int index) {
    const ClassDifficulty& d = spec.difficulty[cls];
    const int S = spec.image_size;
    std::mt19937_64 rng(derive_seed(spec.seed, static_cast<std::uint64_t>(cls), static_cast<std::uint64_t>(index)));
    const int g = (S + d.grain - 1) / d.grain;
    std::vector<float> grid(static_cast<std::size_t>(g) * g);
    std::uniform_real_distribution<float> tex(-0.5f, 0.5f);
    for (auto& v : grid) v = tex(rng);
    GrayscaleImage img;
    img.label = cls;
    img.pixels = Tensor<float>({1, S, S});
    std::uniform_real_distribution<float> speckle(-1.0f, 1.0f);
    const float amp = 0.25f;
    for (int h = 0; h < S; ++h) {
        for (int w = 0; w < S; ++w) {
            const float t = grid[static_cast<std::size_t>(h / d.grain) * g + (w / d.grain)];
            float v = static_cast<float>(d.brightness) + amp * t + static_cast<float>(d.noise) * speckle(rng);
            img.pixels.at3(0, h, w) = std::clamp(v, 0.0f, 1.0f);
        }
    }
    return img;
}

// Per-class generation with a stratified 2:1 train/test split (first two
// thirds of each class train, remainder test).
inline SplitDataset generate_synthetic(const DatasetSpec& spec) {
    spec.validate();
    SplitDataset out;
    out.train.num_classes = out.test.num_classes = spec.num_classes;
    for (int c = 0; c < spec.num_classes; ++c) {
        const int n = spec.counts[c];
        const int n_train = (2 * n + 2) / 3;
        for (int i = 0; i < n; ++i) {
            GrayscaleImage img = synth_image(spec, c, i);
            (i < n_train ? out.train : out.test).items.push_back(std::move(img));
        }
    }
    return out;
}

// BT.601 luma: Y = 0.299 R + 0.587 G + 0.114 B.
template <typename T>
Tensor<T> to_luma(const Tensor<T>& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3) throw ShapeError("to_luma expects [3,H,W], got " + rgb.shape_str());
    const int H = rgb.dim(1), W = rgb.dim(2);
    Tensor<T> y({1, H, W});
    for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
            const T v = T(0.299) * rgb.at3(0, h, w) + T(0.587) * rgb.at3(1, h, w) + T(0.114) * rgb.at3(2, h, w);
            y.at3(0, h, w) = std::clamp(v, T(0), T(1));
        }
    return y;
}

// Channel stack (feat1, feat2, y_c); values are copied unmodified.
template <typename T>
Tensor<T> concat_inputs(const Tensor<T>& feat1, const Tensor<T>& feat2, const Tensor<T>& y_c) {
    if (feat1.rank() != 3 || feat2.rank() != 3 || y_c.rank() != 3 || y_c.dim(0) != 1)
        throw ShapeError("concat_inputs expects rank-3 maps and 1-channel luma");
    const int H = feat1.dim(1), W = feat1.dim(2);
    if (feat2.dim(1) != H || feat2.dim(2) != W || y_c.dim(1) != H || y_c.dim(2) != W)
        throw ShapeError("concat_inputs: spatial dims differ: " + feat1.shape_str() + " vs " + feat2.shape_str() +
                         " vs " + y_c.shape_str());
    Tensor<T> out({feat1.dim(0) + feat2.dim(0) + 1, H, W});
    T* dst = out.data();
    for (const Tensor<T>* src : {&feat1, &feat2, &y_c}) {
        std::copy(src->data(), src->data() + src->numel(), dst);
        dst += src->numel();
    }
    return out;
}

// Shuffled minibatch index lists; a pure function of (seed, epoch).
inline std::vector<std::vector<int>> epoch_batches(int n, int batch_size, std::uint64_t seed, int epoch) {
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, 0x9a7c, static_cast<std::uint64_t>(epoch)));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<int>> batches;
    for (int s = 0; s < n; s += batch_size) {
        const int e = std::min(n, s + batch_size);
        batches.emplace_back(idx.begin() + s, idx.begin() + e);
    }
    return batches;
}

template <typename T>
Tensor<T> stack_images(const Dataset& ds, const std::vector<int>& idx) {
    if (idx.empty()) throw ShapeError("stack_images: empty batch");
    const int H = ds.items[idx[0]].pixels.dim(1), W = ds.items[idx[0]].pixels.dim(2);
    Tensor<T> out({static_cast<int>(idx.size()), 1, H, W});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Tensor<float>& p = ds.items[idx[b]].pixels;
        if (p.dim(1) != H || p.dim(2) != W) throw ShapeError("stack_images: mixed image sizes in batch");
        for (std::int64_t j = 0; j < p.numel(); ++j)
            out.data()[static_cast<std::int64_t>(b) * p.numel() + j] = static_cast<T>(p.data()[j]);
    }
    return out;
}

inline std::vector<int> labels_of(const Dataset& ds, const std::vector<int>& idx) {
    std::vector<int> out(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) out[b] = ds.items[idx[b]].label;
    return out;
}

// Folder layout root/<class_name>/*.png|jpg, classes and files in sorted
// order. Color inputs are converted through to_luma. resize_to 0 keeps the
// stored resolution.
Dataset load_folder(const std::filesystem::path& root, int resize_to = 0);

// Writes PNG files in the folder layout above plus a manifest.csv of
// path,label pairs.
void export_dataset(const Dataset& ds, const std::filesystem::path& out_dir);

} // namespace icfd::data
