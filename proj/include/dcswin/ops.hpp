#pragma once

// Differentiable primitives. Every op validates its shapes, supports meta
// (shape-only) tensors, and records a backward closure when any input
// requires grad.

#include <optional>
#include <vector>

#include "dcswin/tensor.hpp"

namespace dcswin {

// ---- convolution family (NCHW) -------------------------------------------

struct Conv2dOptions {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
};

/// Output extent of a convolution along one axis.
int64_t conv_output_extent(int64_t in, int64_t kernel, const Conv2dOptions& opt);

/// Cross-correlation. weight: [Cout, Cin, k, k]; bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt = {});

/// weight: [Cin, Cout, k, k] (the layout of the conv it transposes).
template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride = 1,
                           int padding = 0);

// ---- normalization -------------------------------------------------------

inline constexpr double kNormEps = 1e-5;

/// Per-channel running statistics updated in training mode.
template <typename T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;
    double momentum = 0.1;
};

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                       bool training);

/// Normalizes over the last dimension.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

// ---- resampling ----------------------------------------------------------

/// Bilinear, align_corners = false: source coordinate (i + 0.5) / scale - 0.5, clamped.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int scale);

// ---- elementwise / broadcasting ------------------------------------------

/// Binary ops broadcast NumPy-style (size-1 extents stretch, missing leading dims are 1).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T value);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
/// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

inline constexpr double kL2Eps = 1e-12;

/// x / max(||x||_2, eps) along the last dimension; a zero row maps to zero.
template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, double eps = kL2Eps);

// ---- reductions ----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> sum_dim(const Tensor<T>& x, int dim, bool keepdim);

// ---- linear algebra ------------------------------------------------------

/// a: [..., M, K], b: [..., K, N] with equal batch dims, or b: [K, N] shared.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x: [..., in], weight: [out, in], bias: [out] or undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// ---- layout ----------------------------------------------------------------

/// One extent may be -1 (inferred).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, int dim, int64_t start, int64_t length);
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int dim);
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts)
{
    return concat(parts, 1);
}

/// out.flat[i] = x.flat[index[i]], or 0 where index[i] < 0. Backward scatter-adds.
/// Expresses padding, cyclic shifts, window partitioning and table lookups.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, const Shape& out_shape, std::vector<int64_t> index);

}  // namespace dcswin
