#include <algorithm>
#include <cmath>

#include "dcswin/detail/autograd.hpp"
#include "dcswin/ops.hpp"
#include "internal/gemm.hpp"

namespace dcswin {

using detail::finish;
using detail::make_output;
using detail::parent_grad;

int64_t conv_output_extent(int64_t in, int64_t kernel, const Conv2dOptions& opt)
{
    const int64_t span = static_cast<int64_t>(opt.dilation) * (kernel - 1) + 1;
    const int64_t padded = in + 2 * static_cast<int64_t>(opt.padding);
    if (padded < span) return 0;
    return (padded - span) / opt.stride + 1;
}

namespace {

// Geometry of a sliding-window gather: `image` is [C, H, W], columns are
// [C*kh*kw, out_h*out_w].
struct Window {
    int64_t channels, height, width;
    int64_t kh, kw;
    int64_t stride, padding, dilation;
    int64_t out_h, out_w;

    int64_t rows() const { return channels * kh * kw; }
    int64_t cols() const { return out_h * out_w; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

template <typename T>
void im2col(const Window& w, const T* image, T* col)
{
    for (int64_t c = 0; c < w.channels; ++c) {
        for (int64_t ki = 0; ki < w.kh; ++ki) {
            for (int64_t kj = 0; kj < w.kw; ++kj) {
                T* row = col + ((c * w.kh + ki) * w.kw + kj) * w.cols();
                for (int64_t oy = 0; oy < w.out_h; ++oy) {
                    const int64_t iy = oy * w.stride - w.padding + ki * w.dilation;
                    T* dst = row + oy * w.out_w;
                    if (iy < 0 || iy >= w.height) {
                        std::fill_n(dst, w.out_w, T(0));
                        continue;
                    }
                    const T* src = image + (c * w.height + iy) * w.width;
                    for (int64_t ox = 0; ox < w.out_w; ++ox) {
                        const int64_t ix = ox * w.stride - w.padding + kj * w.dilation;
                        dst[ox] = (ix >= 0 && ix < w.width) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into the image.
template <typename T>
void col2im(const Window& w, const T* col, T* image)
{
    for (int64_t c = 0; c < w.channels; ++c) {
        for (int64_t ki = 0; ki < w.kh; ++ki) {
            for (int64_t kj = 0; kj < w.kw; ++kj) {
                const T* row = col + ((c * w.kh + ki) * w.kw + kj) * w.cols();
                for (int64_t oy = 0; oy < w.out_h; ++oy) {
                    const int64_t iy = oy * w.stride - w.padding + ki * w.dilation;
                    if (iy < 0 || iy >= w.height) continue;
                    T* dst = image + (c * w.height + iy) * w.width;
                    const T* src = row + oy * w.out_w;
                    for (int64_t ox = 0; ox < w.out_w; ++ox) {
                        const int64_t ix = ox * w.stride - w.padding + kj * w.dilation;
                        if (ix >= 0 && ix < w.width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

void check_conv_inputs(const char* op, const Shape& x, const Shape& w, int64_t weight_in_axis, int64_t bias_extent,
                       const Shape* bias)
{
    if (x.size() != 4) throw ShapeError(std::string(op) + ": input must be [B,C,H,W], got " + to_string(x));
    if (w.size() != 4) throw ShapeError(std::string(op) + ": weight must be rank 4, got " + to_string(w));
    if (w[weight_in_axis] != x[1]) {
        throw ShapeError(std::string(op) + ": input has " + std::to_string(x[1]) + " channels but weight expects " +
                         std::to_string(w[weight_in_axis]));
    }
    if (bias && (bias->size() != 1 || (*bias)[0] != bias_extent)) {
        throw ShapeError(std::string(op) + ": bias must be [" + std::to_string(bias_extent) + "]");
    }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dOptions opt)
{
    if (opt.stride < 1 || opt.dilation < 1 || opt.padding < 0) throw ShapeError("conv2d: invalid stride/padding/dilation");
    const bool has_bias = bias.defined();
    check_conv_inputs("conv2d", x.shape(), weight.shape(), 1, weight.dim(0), has_bias ? &bias.shape() : nullptr);
    const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    const int64_t Ho = conv_output_extent(H, kh, opt), Wo = conv_output_extent(W, kw, opt);
    if (Ho < 1 || Wo < 1) {
        throw ShapeError("conv2d: empty output for input " + to_string(x.shape()) + " with kernel " +
                         std::to_string(kh) + "x" + std::to_string(kw) + ", dilation " + std::to_string(opt.dilation) +
                         ", padding " + std::to_string(opt.padding));
    }
    Tensor<T> out = has_bias ? make_output<T>("conv2d", {B, Cout, Ho, Wo}, {&x, &weight, &bias})
                             : make_output<T>("conv2d", {B, Cout, Ho, Wo}, {&x, &weight});
    if (out.is_meta()) return out;

    const Window win{Cin, H, W, kh, kw, opt.stride, opt.padding, opt.dilation, Ho, Wo};
    const int64_t P = win.cols(), R = win.rows();
    const T* xs = x.data().data();
    const T* ws = weight.data().data();
    T* os = out.mutable_data().data();
    {
        std::unique_ptr<internal::Scratch<T>> col;
        if (!win.is_pointwise()) col = std::make_unique<internal::Scratch<T>>(static_cast<std::size_t>(R * P));
        for (int64_t b = 0; b < B; ++b) {
            const T* xb = xs + b * Cin * H * W;
            const T* cols = xb;
            if (col) {
                im2col(win, xb, col->data());
                cols = col->data();
            }
            T* ob = os + b * Cout * P;
            internal::gemm_nn(Cout, P, R, ws, cols, ob, false);
            if (has_bias) {
                const T* bs = bias.data().data();
                for (int64_t c = 0; c < Cout; ++c) {
                    for (int64_t p = 0; p < P; ++p) ob[c * P + p] += bs[c];
                }
            }
        }
    }

    finish<T>(out, [win, B, Cout, has_bias](TensorNode<T>& node) {
        const int64_t P = win.cols(), R = win.rows();
        const int64_t in_size = win.channels * win.height * win.width;
        const T* g = node.grad.data();
        const T* xs = node.parents[0]->data.data();
        const T* ws = node.parents[1]->data.data();
        std::vector<T>* gx = parent_grad(node, 0);
        std::vector<T>* gw = parent_grad(node, 1);
        std::vector<T>* gb = has_bias ? parent_grad(node, 2) : nullptr;
        std::unique_ptr<internal::Scratch<T>> col;
        if (!win.is_pointwise()) col = std::make_unique<internal::Scratch<T>>(static_cast<std::size_t>(R * P));
        for (int64_t b = 0; b < B; ++b) {
            const T* gb_out = g + b * Cout * P;
            if (gw) {
                const T* cols = xs + b * in_size;
                if (col) {
                    im2col(win, cols, col->data());
                    cols = col->data();
                }
                internal::gemm(false, true, Cout, R, P, gb_out, cols, gw->data(), true);
            }
            if (gx) {
                if (col) {
                    internal::gemm(true, false, R, P, Cout, ws, gb_out, col->data(), false);
                    col2im(win, col->data(), gx->data() + b * in_size);
                } else {
                    internal::gemm(true, false, R, P, Cout, ws, gb_out, gx->data() + b * in_size, true);
                }
            }
            if (gb) {
                for (int64_t c = 0; c < Cout; ++c) {
                    T acc = 0;
                    for (int64_t p = 0; p < P; ++p) acc += gb_out[c * P + p];
                    (*gb)[c] += acc;
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding)
{
    if (stride < 1 || padding < 0) throw ShapeError("transpose_conv2d: invalid stride/padding");
    const bool has_bias = bias.defined();
    check_conv_inputs("transpose_conv2d", x.shape(), weight.shape(), 0, weight.dim(1),
                      has_bias ? &bias.shape() : nullptr);
    const int64_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    const int64_t Ho = (H - 1) * stride - 2 * padding + kh;
    const int64_t Wo = (W - 1) * stride - 2 * padding + kw;
    if (Ho < 1 || Wo < 1) throw ShapeError("transpose_conv2d: empty output for input " + to_string(x.shape()));
    Tensor<T> out = has_bias ? make_output<T>("transpose_conv2d", {B, Cout, Ho, Wo}, {&x, &weight, &bias})
                             : make_output<T>("transpose_conv2d", {B, Cout, Ho, Wo}, {&x, &weight});
    if (out.is_meta()) return out;

    // The output plays the role of the image of a forward conv whose output is x.
    const Window win{Cout, Ho, Wo, kh, kw, stride, padding, 1, H, W};
    const int64_t P = win.cols(), R = win.rows();
    const T* xs = x.data().data();
    const T* ws = weight.data().data();
    T* os = out.mutable_data().data();
    {
        internal::Scratch<T> col(static_cast<std::size_t>(R * P));
        for (int64_t b = 0; b < B; ++b) {
            internal::gemm(true, false, R, P, Cin, ws, xs + b * Cin * P, col.data(), false);
            T* ob = os + b * Cout * Ho * Wo;
            col2im(win, col.data(), ob);
            if (has_bias) {
                const T* bs = bias.data().data();
                for (int64_t c = 0; c < Cout; ++c) {
                    for (int64_t p = 0; p < Ho * Wo; ++p) ob[c * Ho * Wo + p] += bs[c];
                }
            }
        }
    }

    finish<T>(out, [win, B, Cin, has_bias](TensorNode<T>& node) {
        const int64_t P = win.cols(), R = win.rows();
        const int64_t out_size = win.channels * win.height * win.width;
        const T* g = node.grad.data();
        const T* xs = node.parents[0]->data.data();
        const T* ws = node.parents[1]->data.data();
        std::vector<T>* gx = parent_grad(node, 0);
        std::vector<T>* gw = parent_grad(node, 1);
        std::vector<T>* gb = has_bias ? parent_grad(node, 2) : nullptr;
        internal::Scratch<T> col(static_cast<std::size_t>(R * P));
        for (int64_t b = 0; b < B; ++b) {
            const T* gout = g + b * out_size;
            if (gx || gw) im2col(win, gout, col.data());
            if (gx) internal::gemm_nn(Cin, P, R, ws, col.data(), gx->data() + b * Cin * P, true);
            if (gw) internal::gemm(false, true, Cin, R, P, xs + b * Cin * P, col.data(), gw->data(), true);
            if (gb) {
                const int64_t plane = win.height * win.width;
                for (int64_t c = 0; c < win.channels; ++c) {
                    T acc = 0;
                    for (int64_t p = 0; p < plane; ++p) acc += gout[c * plane + p];
                    (*gb)[c] += acc;
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                       bool training)
{
    if (x.ndim() != 4) throw ShapeError("batch_norm2d: input must be [B,C,H,W], got " + to_string(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &stats.mean, &stats.var}) {
        if (p->ndim() != 1 || p->dim(0) != C) {
            throw ShapeError("batch_norm2d: per-channel parameter length " + to_string(p->shape()) + " != C=" +
                             std::to_string(C));
        }
    }
    Tensor<T> out = make_output<T>("batch_norm2d", x.shape(), {&x, &gamma, &beta});
    if (out.is_meta()) return out;

    const T eps = static_cast<T>(kNormEps);
    const int64_t count = B * plane;
    auto xhat = std::make_shared<std::vector<T>>(x.data().size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C));
    const T* xs = x.data().data();
    const T* gs = gamma.data().data();
    const T* bs = beta.data().data();
    T* os = out.mutable_data().data();
    for (int64_t c = 0; c < C; ++c) {
        T mu, var;
        if (training) {
            T s = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = xs + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) s += p[i];
            }
            mu = s / static_cast<T>(count);
            T ss = 0;
            for (int64_t b = 0; b < B; ++b) {
                const T* p = xs + (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
            }
            var = ss / static_cast<T>(count);
            const T m = static_cast<T>(stats.momentum);
            const T unbiased = count > 1 ? ss / static_cast<T>(count - 1) : var;
            auto rm = stats.mean.mutable_data();
            auto rv = stats.var.mutable_data();
            rm[c] = (T(1) - m) * rm[c] + m * mu;
            rv[c] = (T(1) - m) * rv[c] + m * unbiased;
        } else {
            mu = stats.mean.data()[c];
            var = stats.var.data()[c];
        }
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[c] = is;
        for (int64_t b = 0; b < B; ++b) {
            const int64_t off = (b * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const T h = (xs[off + i] - mu) * is;
                (*xhat)[off + i] = h;
                os[off + i] = gs[c] * h + bs[c];
            }
        }
    }

    finish<T>(out, [B, C, plane, count, training, xhat, inv_std](TensorNode<T>& node) {
        const T* g = node.grad.data();
        const T* gs = node.parents[1]->data.data();
        std::vector<T>* gx = parent_grad(node, 0);
        std::vector<T>* ggamma = parent_grad(node, 1);
        std::vector<T>* gbeta = parent_grad(node, 2);
        for (int64_t c = 0; c < C; ++c) {
            T sum_g = 0, sum_gh = 0;
            for (int64_t b = 0; b < B; ++b) {
                const int64_t off = (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    sum_g += g[off + i];
                    sum_gh += g[off + i] * (*xhat)[off + i];
                }
            }
            if (ggamma) (*ggamma)[c] += sum_gh;
            if (gbeta) (*gbeta)[c] += sum_g;
            if (!gx) continue;
            const T scale = gs[c] * (*inv_std)[c];
            const T mean_g = sum_g / static_cast<T>(count);
            const T mean_gh = sum_gh / static_cast<T>(count);
            for (int64_t b = 0; b < B; ++b) {
                const int64_t off = (b * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    if (training) {
                        (*gx)[off + i] += scale * (g[off + i] - mean_g - (*xhat)[off + i] * mean_gh);
                    } else {
                        (*gx)[off + i] += scale * g[off + i];
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta)
{
    const int64_t D = x.dim(-1);
    for (const Tensor<T>* p : {&gamma, &beta}) {
        if (p->ndim() != 1 || p->dim(0) != D) {
            throw ShapeError("layer_norm: parameter length " + to_string(p->shape()) + " != D=" + std::to_string(D));
        }
    }
    Tensor<T> out = make_output<T>("layer_norm", x.shape(), {&x, &gamma, &beta});
    if (out.is_meta()) return out;
    const int64_t rows = x.numel() / D;
    const T eps = static_cast<T>(kNormEps);
    auto xhat = std::make_shared<std::vector<T>>(x.data().size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* xs = x.data().data();
    const T* gs = gamma.data().data();
    const T* bs = beta.data().data();
    T* os = out.mutable_data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = xs + r * D;
        T mu = 0;
        for (int64_t j = 0; j < D; ++j) mu += in[j];
        mu /= static_cast<T>(D);
        T var = 0;
        for (int64_t j = 0; j < D; ++j) var += (in[j] - mu) * (in[j] - mu);
        var /= static_cast<T>(D);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int64_t j = 0; j < D; ++j) {
            const T h = (in[j] - mu) * is;
            (*xhat)[r * D + j] = h;
            os[r * D + j] = gs[j] * h + bs[j];
        }
    }
    finish<T>(out, [rows, D, xhat, inv_std](TensorNode<T>& node) {
        const T* g = node.grad.data();
        const T* gs = node.parents[1]->data.data();
        std::vector<T>* gx = parent_grad(node, 0);
        std::vector<T>* ggamma = parent_grad(node, 1);
        std::vector<T>* gbeta = parent_grad(node, 2);
        for (int64_t r = 0; r < rows; ++r) {
            const T* gr = g + r * D;
            const T* hr = xhat->data() + r * D;
            T mean_dh = 0, mean_dh_h = 0;
            for (int64_t j = 0; j < D; ++j) {
                if (ggamma) (*ggamma)[j] += gr[j] * hr[j];
                if (gbeta) (*gbeta)[j] += gr[j];
                const T dh = gr[j] * gs[j];
                mean_dh += dh;
                mean_dh_h += dh * hr[j];
            }
            if (!gx) continue;
            mean_dh /= static_cast<T>(D);
            mean_dh_h /= static_cast<T>(D);
            const T is = (*inv_std)[r];
            for (int64_t j = 0; j < D; ++j) (*gx)[r * D + j] += is * (gr[j] * gs[j] - mean_dh - hr[j] * mean_dh_h);
        }
    });
    return out;
}

namespace {

// Per-output-index source taps for align_corners=false linear resampling.
struct Taps {
    std::vector<int64_t> i0, i1;
    std::vector<double> w0, w1;
};

Taps linear_taps(int64_t in, int64_t out, int scale)
{
    Taps t;
    for (int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / scale - 0.5;
        src = std::max(src, 0.0);
        int64_t lo = std::min<int64_t>(static_cast<int64_t>(std::floor(src)), in - 1);
        int64_t hi = std::min<int64_t>(lo + 1, in - 1);
        const double frac = src - static_cast<double>(lo);
        t.i0.push_back(lo);
        t.i1.push_back(hi);
        t.w0.push_back(1.0 - frac);
        t.w1.push_back(frac);
    }
    return t;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int scale)
{
    if (scale < 1) throw ShapeError("bilinear_upsample: scale must be >= 1");
    if (x.ndim() != 4) throw ShapeError("bilinear_upsample: input must be [B,C,H,W], got " + to_string(x.shape()));
    const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Ho = H * scale, Wo = W * scale;
    Tensor<T> out = make_output<T>("bilinear_upsample", {B, C, Ho, Wo}, {&x});
    if (out.is_meta()) return out;
    auto ty = std::make_shared<Taps>(linear_taps(H, Ho, scale));
    auto tx = std::make_shared<Taps>(linear_taps(W, Wo, scale));
    const T* xs = x.data().data();
    T* os = out.mutable_data().data();
    for (int64_t p = 0; p < B * C; ++p) {
        const T* in = xs + p * H * W;
        T* o = os + p * Ho * Wo;
        for (int64_t y = 0; y < Ho; ++y) {
            const T* r0 = in + ty->i0[y] * W;
            const T* r1 = in + ty->i1[y] * W;
            const T wy0 = static_cast<T>(ty->w0[y]), wy1 = static_cast<T>(ty->w1[y]);
            for (int64_t xo = 0; xo < Wo; ++xo) {
                const int64_t a = tx->i0[xo], b = tx->i1[xo];
                const T wx0 = static_cast<T>(tx->w0[xo]), wx1 = static_cast<T>(tx->w1[xo]);
                o[y * Wo + xo] = wy0 * (wx0 * r0[a] + wx1 * r0[b]) + wy1 * (wx0 * r1[a] + wx1 * r1[b]);
            }
        }
    }
    finish<T>(out, [B, C, H, W, Ho, Wo, ty, tx](TensorNode<T>& node) {
        auto* g = parent_grad(node, 0);
        if (!g) return;
        const T* go = node.grad.data();
        for (int64_t p = 0; p < B * C; ++p) {
            T* gi = g->data() + p * H * W;
            const T* gp = go + p * Ho * Wo;
            for (int64_t y = 0; y < Ho; ++y) {
                T* r0 = gi + ty->i0[y] * W;
                T* r1 = gi + ty->i1[y] * W;
                const T wy0 = static_cast<T>(ty->w0[y]), wy1 = static_cast<T>(ty->w1[y]);
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    const T v = gp[y * Wo + xo];
                    const int64_t a = tx->i0[xo], b = tx->i1[xo];
                    const T wx0 = static_cast<T>(tx->w0[xo]), wx1 = static_cast<T>(tx->w1[xo]);
                    r0[a] += v * wy0 * wx0;
                    r0[b] += v * wy0 * wx1;
                    r1[a] += v * wy1 * wx0;
                    r1[b] += v * wy1 * wx1;
                }
            }
        }
    });
    return out;
}

#define DCSWIN_INSTANTIATE(T)                                                                                  \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dOptions);            \
    template Tensor<T> transpose_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);       \
    template Tensor<T> batch_norm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, RunningStats<T>&,   \
                                    bool);                                                                     \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                      \
    template Tensor<T> bilinear_upsample(const Tensor<T>&, int);

DCSWIN_INSTANTIATE(float)
DCSWIN_INSTANTIATE(double)
#undef DCSWIN_INSTANTIATE

}  // namespace dcswin
