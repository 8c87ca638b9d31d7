#include "dcswin/swin.hpp"

#include <cmath>

namespace dcswin {

namespace {

template <typename T, typename IndexFn>
Tensor<T> relayout(const Tensor<T>& x, const Shape& shape, IndexFn&& index)
{
    if (x.is_meta() || meta_mode()) {
        MetaGuard meta;
        return Tensor<T>::zeros(shape);
    }
    return gather(x, shape, index());
}

}  // namespace

ModelConfig ModelConfig::from_preset(const std::string& name)
{
    ModelConfig c;
    c.preset = name;
    if (name == "swin_nano") return c;
    c.window_size = 7;
    if (name == "swin_t") {
        c.embed_dim = 96;
        c.depths = {2, 2, 6, 2};
        c.num_heads = {3, 6, 12, 24};
    } else if (name == "swin_s") {
        c.embed_dim = 96;
        c.depths = {2, 2, 18, 2};
        c.num_heads = {3, 6, 12, 24};
    } else if (name == "swin_b") {
        c.embed_dim = 128;
        c.depths = {2, 2, 18, 2};
        c.num_heads = {4, 8, 16, 32};
    } else if (name == "swin_l") {
        c.embed_dim = 192;
        c.depths = {2, 2, 18, 2};
        c.num_heads = {6, 12, 24, 48};
    } else {
        throw Error("unknown model preset '" + name + "' (swin_t, swin_s, swin_b, swin_l, swin_nano)");
    }
    return c;
}

void ModelConfig::validate() const
{
    if (embed_dim < 1) throw Error("model.embed_dim must be positive");
    for (int s = 0; s < 4; ++s) {
        if (depths[s] < 2 || depths[s] % 2 != 0) {
            throw Error("model.depths: stage " + std::to_string(s + 1) + " needs an even block count >= 2");
        }
        if (num_heads[s] < 1 || stage_dim(s) % num_heads[s] != 0) {
            throw Error("model.num_heads: " + std::to_string(num_heads[s]) + " heads do not divide stage " +
                        std::to_string(s + 1) + " width " + std::to_string(stage_dim(s)));
        }
    }
    if (window_size < 1) throw Error("model.window_size must be positive");
    if (patch_size < 1) throw Error("model.patch_size must be positive");
    if (!(mlp_ratio > 0.0)) throw Error("model.mlp_ratio must be positive");
    if (num_classes < 2) throw Error("model.num_classes must be at least 2");
}

// ---- patch embedding -------------------------------------------------------

std::vector<int64_t> patch_index(int64_t B, int64_t H, int64_t W, int patch)
{
    const int64_t gh = (H + patch - 1) / patch, gw = (W + patch - 1) / patch;
    std::vector<int64_t> index(static_cast<std::size_t>(B * gh * gw * 3 * patch * patch));
    std::size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t gy = 0; gy < gh; ++gy)
            for (int64_t gx = 0; gx < gw; ++gx)
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t ky = 0; ky < patch; ++ky)
                        for (int64_t kx = 0; kx < patch; ++kx) {
                            const int64_t y = gy * patch + ky, x = gx * patch + kx;
                            index[o++] = (y < H && x < W) ? ((b * 3 + c) * H + y) * W + x : -1;
                        }
    return index;
}

template <typename T>
PatchEmbed<T>::PatchEmbed(int p, int64_t dim, Rng& rng) : patch(p)
{
    proj = this->register_module("proj", std::make_shared<Linear<T>>(3 * p * p, dim, true, rng));
    norm = this->register_module("norm", std::make_shared<LayerNorm<T>>(dim));
}

template <typename T>
Tensor<T> PatchEmbed<T>::forward(const Tensor<T>& image, std::array<int64_t, 2>& grid) const
{
    if (image.ndim() != 4 || image.dim(1) != 3) {
        throw ShapeError("patch embedding expects an RGB image [B, 3, H, W], got " + to_string(image.shape()));
    }
    const int64_t B = image.dim(0), H = image.dim(2), W = image.dim(3);
    grid = {(H + patch - 1) / patch, (W + patch - 1) / patch};
    auto patches = relayout(image, {B, grid[0] * grid[1], int64_t(3) * patch * patch},
                            [&] { return patch_index(B, H, W, patch); });
    return norm->forward(proj->forward(patches));
}

// ---- blocks ------------------------------------------------------------------

template <typename T>
SwinBlock<T>::SwinBlock(int64_t dim, int heads, int window, double mlp_ratio, bool shift, Rng& rng) : shifted(shift)
{
    const auto hidden = static_cast<int64_t>(std::lround(double(dim) * mlp_ratio));
    norm1 = this->register_module("norm1", std::make_shared<LayerNorm<T>>(dim));
    attn = this->register_module("attn", std::make_shared<WindowAttention<T>>(dim, window, heads, rng));
    norm2 = this->register_module("norm2", std::make_shared<LayerNorm<T>>(dim));
    fc1 = this->register_module("mlp.fc1", std::make_shared<Linear<T>>(dim, hidden, true, rng));
    fc2 = this->register_module("mlp.fc2", std::make_shared<Linear<T>>(hidden, dim, true, rng));
}

template <typename T>
Tensor<T> SwinBlock<T>::forward(const Tensor<T>& x, int64_t H, int64_t W) const
{
    auto y = add(x, attn->forward(norm1->forward(x), H, W, shifted));
    return add(y, fc2->forward(gelu(fc1->forward(norm2->forward(y)))));
}

std::vector<int64_t> merge_index(int64_t B, int64_t H, int64_t W, int64_t D)
{
    const int64_t h = (H + 1) / 2, w = (W + 1) / 2;
    static constexpr int64_t dy[4] = {0, 1, 0, 1}, dx[4] = {0, 0, 1, 1};
    std::vector<int64_t> index(static_cast<std::size_t>(B * h * w * 4 * D));
    std::size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j)
                for (int q = 0; q < 4; ++q) {
                    const int64_t y = 2 * i + dy[q], x = 2 * j + dx[q];
                    const bool pad = y >= H || x >= W;
                    for (int64_t d = 0; d < D; ++d) index[o++] = pad ? -1 : ((b * H + y) * W + x) * D + d;
                }
    return index;
}

template <typename T>
PatchMerging<T>::PatchMerging(int64_t dim, Rng& rng)
{
    norm = this->register_module("norm", std::make_shared<LayerNorm<T>>(4 * dim));
    reduction = this->register_module("reduction", std::make_shared<Linear<T>>(4 * dim, 2 * dim, false, rng));
}

template <typename T>
Tensor<T> PatchMerging<T>::forward(const Tensor<T>& x, int64_t H, int64_t W) const
{
    if (x.ndim() != 3 || x.dim(1) != H * W) {
        throw ShapeError("patch merging: expected " + std::to_string(H * W) + " tokens, got " + to_string(x.shape()));
    }
    const int64_t B = x.dim(0), D = x.dim(2);
    auto merged = relayout(x, {B, ((H + 1) / 2) * ((W + 1) / 2), 4 * D}, [&] { return merge_index(B, H, W, D); });
    return reduction->forward(norm->forward(merged));
}

// ---- encoder -----------------------------------------------------------------

template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, int64_t H, int64_t W)
{
    return reshape(permute(tokens, {0, 2, 1}), {tokens.dim(0), tokens.dim(2), H, W});
}

template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map)
{
    return permute(reshape(map, {map.dim(0), map.dim(1), map.dim(2) * map.dim(3)}), {0, 2, 1});
}

template <typename T>
SwinEncoder<T>::SwinEncoder(const ModelConfig& cfg, Rng& rng) : config(cfg)
{
    config.validate();
    patch_embed =
        this->register_module("patch_embed", std::make_shared<PatchEmbed<T>>(cfg.patch_size, cfg.embed_dim, rng));
    for (int s = 0; s < 4; ++s) {
        const int64_t dim = cfg.stage_dim(s);
        for (int b = 0; b < cfg.depths[s]; ++b) {
            blocks[s].push_back(this->register_module(
                "stages." + std::to_string(s) + ".blocks." + std::to_string(b),
                std::make_shared<SwinBlock<T>>(dim, cfg.num_heads[s], cfg.window_size, cfg.mlp_ratio, b % 2 == 1, rng)));
        }
        if (s < 3) {
            merges[s] = this->register_module("stages." + std::to_string(s) + ".downsample",
                                              std::make_shared<PatchMerging<T>>(dim, rng));
        }
    }
    for (int s = 0; s < 4; ++s) {
        const int64_t dim = cfg.stage_dim(s);
        taps[s] = this->register_module("taps." + std::to_string(s),
                                        std::make_shared<Conv2d<T>>(dim, dim, 1, Conv2dOptions{}, true, rng));
    }
}

template <typename T>
FeaturePyramid<T> SwinEncoder<T>::encode(const Tensor<T>& image) const
{
    FeaturePyramid<T> out;
    std::array<int64_t, 2> grid{};
    auto x = patch_embed->forward(image, grid);
    int64_t H = grid[0], W = grid[1];
    for (int s = 0; s < 4; ++s) {
        for (const auto& blk : blocks[s]) x = blk->forward(x, H, W);
        out.st[s] = taps[s]->forward(tokens_to_map(x, H, W));
        if (s < 3) {
            x = merges[s]->forward(x, H, W);
            H = (H + 1) / 2;
            W = (W + 1) / 2;
        }
    }
    return out;
}

#define DCSWIN_INSTANTIATE(T)                                        \
    template class PatchEmbed<T>;                                    \
    template class SwinBlock<T>;                                     \
    template class PatchMerging<T>;                                  \
    template class SwinEncoder<T>;                                   \
    template Tensor<T> tokens_to_map(const Tensor<T>&, int64_t, int64_t); \
    template Tensor<T> map_to_tokens(const Tensor<T>&);

DCSWIN_INSTANTIATE(float)
DCSWIN_INSTANTIATE(double)
#undef DCSWIN_INSTANTIATE

}  // namespace dcswin
