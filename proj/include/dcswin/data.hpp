#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcswin/tensor.hpp"

namespace dcswin {

inline constexpr int32_t kDefaultIgnoreLabel = 255;

/// An RGB image [3, H, W] in [0, 1] and its aligned label map.
struct Sample {
    std::string id;
    Tensor32 image;
    std::vector<int32_t> label;  // H * W, row-major
    int64_t height() const { return image.dim(1); }
    int64_t width() const { return image.dim(2); }
};

/// Throws Error when the image is not [3, H, W], values leave [0, 1], or the
/// label map is misaligned or holds values outside [0, K) other than ignore.
void validate_sample(const Sample& s, int classes, int32_t ignore_label = kDefaultIgnoreLabel);

// ---- netpbm I/O --------------------------------------------------------------

/// Binary P6 with maxval <= 255 -> [3, H, W] floats in [0, 1].
Tensor32 read_ppm(const std::filesystem::path& path);
/// [3, H, W] floats (clamped to [0, 1]) -> P6.
void write_ppm(const std::filesystem::path& path, const Tensor32& image);
/// Interleaved 8-bit RGB -> P6.
void write_ppm_rgb(const std::filesystem::path& path, int64_t height, int64_t width, const std::vector<uint8_t>& rgb);
/// Binary P5 with maxval <= 255.
std::vector<int32_t> read_pgm(const std::filesystem::path& path, int64_t& height, int64_t& width);
void write_pgm(const std::filesystem::path& path, int64_t height, int64_t width, const std::vector<int32_t>& labels);

// ---- dataset layout ------------------------------------------------------------

/// root/manifest.tsv lists `id<TAB>image<TAB>label` per line (paths relative
/// to root, an optional `id image label` header). Images live under
/// root/images/*.ppm and labels under root/labels/*.pgm by convention.
std::vector<Sample> load_dataset(const std::filesystem::path& root);
void save_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples);

// ---- tiling ----------------------------------------------------------------------

struct TileSpec {
    int64_t tile = 1024;
    int64_t stride = 1024;
    void validate() const;
};

struct TileOrigin {
    int64_t y = 0, x = 0;
    bool operator==(const TileOrigin&) const = default;
};

/// Row-major tile origins; the last row/column of tiles is aligned to the
/// image end so that every pixel is covered. Extents smaller than the tile
/// get a single origin at 0.
std::vector<TileOrigin> tile_origins(int64_t height, int64_t width, const TileSpec& spec);

/// Mirror index into [0, n) (edge not repeated), periodic for any offset.
int64_t reflect_index(int64_t i, int64_t n);

/// Crops a tile; pixels beyond the image are mirror-padded (image) or set to
/// the ignore label (labels).
Sample crop_tile(const Sample& s, const TileOrigin& o, int64_t tile, int32_t ignore_label = kDefaultIgnoreLabel);
Tensor32 crop_image(const Tensor32& image, const TileOrigin& o, int64_t tile);

/// Tiles of one sample in row-major order; ids get a `_y<y>_x<x>` suffix.
std::vector<Sample> tile_sample(const Sample& s, const TileSpec& spec, std::vector<TileOrigin>* origins = nullptr,
                                int32_t ignore_label = kDefaultIgnoreLabel);

/// Reassembles per-tile logits [K, t, t]; overlapping pixels average.
class Stitcher {
public:
    Stitcher(int classes, int64_t height, int64_t width);
    void add(const TileOrigin& o, const Tensor32& tile_logits);
    /// Averaged logits [K, H, W]. Throws Error if some pixel was never covered.
    Tensor32 logits() const;
    std::vector<int32_t> argmax() const;

private:
    int classes_;
    int64_t height_, width_;
    std::vector<double> sum_;
    std::vector<int32_t> hits_;
};

/// Pastes label tiles back; later tiles overwrite overlaps.
std::vector<int32_t> stitch_labels(const std::vector<std::vector<int32_t>>& tiles, const std::vector<TileOrigin>& origins,
                                   int64_t tile, int64_t height, int64_t width);

/// Per-pixel argmax of [K, H, W] logits.
std::vector<int32_t> argmax_labels(const Tensor32& logits);

/// Display colour of class k in predicted label images. Classes 0-5 follow
/// the ISPRS convention (impervious white, building blue, low vegetation
/// cyan, tree green, car yellow, clutter red), 6 is magenta, 7 is orange.
/// Higher classes get grey level 255 - 16 * (k - 8) mod 256.
std::array<uint8_t, 3> label_color(int k);

/// Interleaved RGB bytes for a label map.
std::vector<uint8_t> colorize(const std::vector<int32_t>& labels);

// ---- synthetic scenes ----------------------------------------------------------

inline constexpr double kSynthNoise = 0.05;

/// Mean colour of class k in the synthetic scenes.
std::array<float, 3> synth_class_color(int k);

/// Deterministic scene of rectangles, discs and stripes over a background,
/// each class drawn with its own mean colour plus N(0, 0.05^2) noise.
/// Every class covers between 5% and 60% of the pixels. K in [2, 8].
Sample synth_scene(uint64_t seed, int64_t size, int classes);

/// count scenes with seeds seed, seed + 1, ...
std::vector<Sample> synth_dataset(uint64_t seed, int count, int64_t size, int classes);

// ---- augmentation ----------------------------------------------------------------

/// One of the 8 flips/rotations: rotate 90 degrees counter-clockwise
/// (transform % 4) times, then mirror horizontally if transform >= 4.
Sample dihedral(const Sample& s, int transform);
/// Picks the transform from the seed.
Sample augment(const Sample& s, uint64_t seed);

// ---- normalization -----------------------------------------------------------------

struct NormStats {
    std::array<float, 3> mean{0.f, 0.f, 0.f};
    std::array<float, 3> std{1.f, 1.f, 1.f};
};

/// Per-channel mean and standard deviation over every pixel of every sample.
NormStats compute_norm_stats(const std::vector<Sample>& samples);
Tensor32 normalize(const Tensor32& image, const NormStats& stats);

/// Stacks normalized images [B, 3, H, W] and concatenated labels.
Tensor32 stack_images(const std::vector<const Sample*>& batch, const NormStats& stats);
std::vector<int32_t> stack_labels(const std::vector<const Sample*>& batch);

}  // namespace dcswin
