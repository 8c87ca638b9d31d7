#pragma once

#include <array>
#include <string>

#include "dcswin/attention.hpp"

namespace dcswin {

struct ModelConfig {
    std::string preset = "swin_nano";
    int64_t embed_dim = 32;
    std::array<int, 4> depths{2, 2, 2, 2};
    std::array<int, 4> num_heads{2, 4, 8, 16};
    int window_size = 4;
    int patch_size = 4;
    double mlp_ratio = 4.0;
    int num_classes = 6;
    std::string variant = "dcfam";

    /// swin_t, swin_s, swin_b, swin_l or swin_nano. Throws Error on other names.
    static ModelConfig from_preset(const std::string& name);
    /// Throws Error naming the first violated constraint.
    void validate() const;
    int64_t stage_dim(int stage) const { return embed_dim << stage; }
};

/// Four 4x4 tap features, channels C, 2C, 4C, 8C at strides 4..32.
template <typename T>
struct FeaturePyramid {
    std::array<Tensor<T>, 4> st;
    std::array<Tensor<T>, 4> af;
};

/// Splits [B, 3, H, W] into p x p patches, projects the 3p^2 raw values to
/// C and layer-normalizes. H and W are zero-padded to a multiple of p.
template <typename T>
class PatchEmbed : public Module<T> {
public:
    PatchEmbed(int patch, int64_t dim, Rng& rng);
    /// Returns [B, H/p * W/p, C]; grid receives (H/p, W/p).
    Tensor<T> forward(const Tensor<T>& image, std::array<int64_t, 2>& grid) const;

    int patch;
    std::shared_ptr<Linear<T>> proj;
    std::shared_ptr<LayerNorm<T>> norm;
};

/// Index of every [B, Hp/p * Wp/p, 3 p p] element in [B, 3, H, W]; -1 for padding.
std::vector<int64_t> patch_index(int64_t B, int64_t H, int64_t W, int patch);

template <typename T>
class SwinBlock : public Module<T> {
public:
    SwinBlock(int64_t dim, int heads, int window, double mlp_ratio, bool shifted, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x, int64_t H, int64_t W) const;

    bool shifted;
    std::shared_ptr<LayerNorm<T>> norm1, norm2;
    std::shared_ptr<WindowAttention<T>> attn;
    std::shared_ptr<Linear<T>> fc1, fc2;
};

/// 2x2 neighborhoods -> 4D -> layer norm -> 2D. Odd extents are zero-padded.
template <typename T>
class PatchMerging : public Module<T> {
public:
    PatchMerging(int64_t dim, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x, int64_t H, int64_t W) const;

    std::shared_ptr<LayerNorm<T>> norm;
    std::shared_ptr<Linear<T>> reduction;
};

/// Index of every [B, ceil(H/2) * ceil(W/2), 4D] element in [B, H*W, D],
/// neighborhood order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
std::vector<int64_t> merge_index(int64_t B, int64_t H, int64_t W, int64_t D);

template <typename T>
class SwinEncoder : public Module<T> {
public:
    SwinEncoder(const ModelConfig& cfg, Rng& rng);
    /// image: [B, 3, H, W] with H, W divisible by 32 for an exact ladder.
    /// Fills st[0..3]; af is left empty.
    FeaturePyramid<T> encode(const Tensor<T>& image) const;

    ModelConfig config;
    std::shared_ptr<PatchEmbed<T>> patch_embed;
    std::array<std::vector<std::shared_ptr<SwinBlock<T>>>, 4> blocks;
    std::array<std::shared_ptr<PatchMerging<T>>, 3> merges;
    std::array<std::shared_ptr<Conv2d<T>>, 4> taps;
};

/// [B, H*W, C] <-> [B, C, H, W]
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, int64_t H, int64_t W);
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map);

}  // namespace dcswin
