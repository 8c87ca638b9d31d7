#pragma once

// Linear attention kernels (spatial and channel), their quadratic reference,
// and window multi-head self-attention for the encoder blocks.

#include <memory>

#include "dcswin/nn.hpp"

namespace dcswin {

/// Key width of the spatial attention: max(1, C / 8).
inline int64_t spatial_key_dim(int64_t channels) { return std::max<int64_t>(1, channels / 8); }

/// 1x1 convolution weights producing Q [Dk], K [Dk] and V [C] from a C-channel map.
template <typename T>
struct QKVProjection {
    Tensor<T> wq, bq, wk, bk, wv, bv;
};

/// Added to the kernel 1 + q.k so that a query pointing away from every key
/// (possible when Dk = 1) gets uniform weights instead of 0/0.
inline constexpr double kKernelSmoothing = 1e-5;

/// Token-layout core. q, k: [B, N, Dk], v: [B, N, Dv] -> [B, N, Dv].
/// Rows of q and k are L2-normalized; with e = kKernelSmoothing, row i is
///   ((1 + e) sum_j v_j + q_i . (k^T v)) / ((1 + e) N + q_i . sum_j k_j)
/// with k^T v and sum_j k_j reduced once (no N x N intermediate). Keys and
/// values are centered over the tokens first, which leaves the value unchanged.
template <typename T>
Tensor<T> linear_attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

/// Same weights as linear_attention_core, evaluated through the M x M row
/// similarity instead. Used where the row count M is small and the row width
/// is large (the channel form), so k^T v would be the big product.
template <typename T>
Tensor<T> linear_attention_core_gram(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

/// Spatial core over the H*W positions of x [B, C, H, W]; returns [B, C, H, W].
template <typename T>
Tensor<T> linear_attention_spatial(const Tensor<T>& x, const QKVProjection<T>& proj);

/// Channel core: rows are the C flattened channels of x, used as query, key
/// and value alike.
template <typename T>
Tensor<T> linear_attention_channel(const Tensor<T>& x);

/// Quadratic reference. Inputs are already normalized, [B, N, Dk] / [B, N, Dv].
template <typename T>
struct LinearAttentionReference {
    Tensor<T> weights;  // [B, N, N], rows sum to 1
    Tensor<T> output;   // [B, N, Dv]
};

inline constexpr int64_t kBruteForceLimit = 4096;

/// Materializes w_ij = (1 + e + q_i . k_j) / sum_j (1 + e + q_i . k_j). Refuses
/// N > kBruteForceLimit unless force is set.
template <typename T>
LinearAttentionReference<T> brute_force_linear_attention(const Tensor<T>& q_hat, const Tensor<T>& k_hat,
                                                         const Tensor<T>& v, bool force = false);

/// SSA block: x + proj(spatial_core(x)).
template <typename T>
class SpatialAttention : public Module<T> {
public:
    SpatialAttention(int64_t channels, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;
    QKVProjection<T> projection() const;

    std::shared_ptr<Conv2d<T>> query, key, value, proj;
};

/// SCA block: x + proj(channel_core(x)).
template <typename T>
class ChannelAttention : public Module<T> {
public:
    ChannelAttention(int64_t channels, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    std::shared_ptr<Conv2d<T>> proj;
};

struct WindowSpec {
    int window_size = 7;
    int shift = 0;
    int num_heads = 1;
};

inline constexpr double kWindowMaskValue = -100.0;

/// Multi-head softmax attention inside non-overlapping windows, with a
/// learnable relative position bias and optional cyclic shift.
template <typename T>
class WindowAttention : public Module<T> {
public:
    WindowAttention(int64_t dim, int window_size, int num_heads, Rng& rng);

    /// Window and shift actually used on an H x W map: the window shrinks to
    /// min(H, W) on small maps, and then no shift is applied.
    WindowSpec resolve(int64_t H, int64_t W, bool shifted) const;

    /// x: [B, H*W, C] -> [B, H*W, C]. When `weights` is given it receives the
    /// post-softmax attention, [B, windows, heads, n, n].
    Tensor<T> forward(const Tensor<T>& x, int64_t H, int64_t W, bool shifted, Tensor<T>* weights = nullptr) const;

    int64_t dim;
    int window_size, num_heads;
    std::shared_ptr<Linear<T>> qkv, proj;
    Tensor<T> relative_position_bias_table;  // [(2w-1)^2, heads]
};

/// Token index of every element of the windowed layout [B * windows, n, C]
/// in the source [B, H*W, C] (-1 for padding), after padding H, W up to a
/// multiple of the window and rolling by -shift.
std::vector<int64_t> window_partition_index(int64_t B, int64_t H, int64_t W, int64_t C, int window, int shift);

/// Inverse map: [B, H*W, C] element -> index into the windowed layout.
std::vector<int64_t> window_reverse_index(int64_t B, int64_t H, int64_t W, int64_t C, int window, int shift);

}  // namespace dcswin
