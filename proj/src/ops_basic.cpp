#include <algorithm>
#include <cmath>
#include <numeric>

#include "dcswin/detail/autograd.hpp"
#include "dcswin/ops.hpp"
#include "internal/gemm.hpp"

namespace dcswin {

using detail::finish;
using detail::make_output;
using detail::parent_grad;

namespace {

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op)
{
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Walks an output index space and tracks the matching flat offsets of two
// broadcast operands.
class BroadcastWalk {
public:
    BroadcastWalk(const Shape& out, const Shape& a, const Shape& b)
        : out_(out), idx_(out.size(), 0), sa_(out.size(), 0), sb_(out.size(), 0)
    {
        fill_strides(a, sa_);
        fill_strides(b, sb_);
    }

    template <typename F>
    void run(F&& f)
    {
        const int64_t total = numel(out_);
        int64_t ia = 0, ib = 0;
        const std::size_t rank = out_.size();
        for (int64_t o = 0; o < total; ++o) {
            f(o, ia, ib);
            for (std::size_t d = rank; d-- > 0;) {
                ++idx_[d];
                ia += sa_[d];
                ib += sb_[d];
                if (idx_[d] < out_[d]) break;
                ia -= sa_[d] * out_[d];
                ib -= sb_[d] * out_[d];
                idx_[d] = 0;
            }
        }
    }

private:
    void fill_strides(const Shape& s, std::vector<int64_t>& strides) const
    {
        const std::size_t off = out_.size() - s.size();
        int64_t stride = 1;
        for (std::size_t i = s.size(); i-- > 0;) {
            strides[i + off] = s[i] == 1 ? 0 : stride;
            stride *= s[i];
        }
    }

    Shape out_;
    std::vector<int64_t> idx_;
    std::vector<int64_t> sa_, sb_;
};

enum class BinaryKind { kAdd, kSub, kMul, kDiv };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* name)
{
    const Shape out_shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(a.shape(), b.shape(), name);
    Tensor<T> out = make_output<T>(name, out_shape, {&a, &b});
    if (out.is_meta()) return out;

    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.mutable_data().data();
    auto apply = [kind](T x, T y) {
        switch (kind) {
            case BinaryKind::kAdd: return x + y;
            case BinaryKind::kSub: return x - y;
            case BinaryKind::kMul: return x * y;
            case BinaryKind::kDiv: return x / y;
        }
        return T(0);
    };
    const bool same = a.shape() == b.shape();
    if (same) {
        const int64_t n = out.numel();
        for (int64_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
    } else {
        BroadcastWalk(out_shape, a.shape(), b.shape()).run([&](int64_t o, int64_t ia, int64_t ib) {
            po[o] = apply(pa[ia], pb[ib]);
        });
    }

    finish<T>(out, [kind, same, a_shape = a.shape(), b_shape = b.shape()](TensorNode<T>& node) {
        const T* g = node.grad.data();
        const T* xa = node.parents[0]->data.data();
        const T* xb = node.parents[1]->data.data();
        std::vector<T>* ga = parent_grad(node, 0);
        std::vector<T>* gb = parent_grad(node, 1);
        auto step = [&](int64_t o, int64_t ia, int64_t ib) {
            const T go = g[o];
            switch (kind) {
                case BinaryKind::kAdd:
                    if (ga) (*ga)[ia] += go;
                    if (gb) (*gb)[ib] += go;
                    break;
                case BinaryKind::kSub:
                    if (ga) (*ga)[ia] += go;
                    if (gb) (*gb)[ib] -= go;
                    break;
                case BinaryKind::kMul:
                    if (ga) (*ga)[ia] += go * xb[ib];
                    if (gb) (*gb)[ib] += go * xa[ia];
                    break;
                case BinaryKind::kDiv:
                    if (ga) (*ga)[ia] += go / xb[ib];
                    if (gb) (*gb)[ib] -= go * xa[ia] / (xb[ib] * xb[ib]);
                    break;
            }
        };
        if (same) {
            const int64_t n = static_cast<int64_t>(node.grad.size());
            for (int64_t i = 0; i < n; ++i) step(i, i, i);
        } else {
            BroadcastWalk(node.shape, a_shape, b_shape).run(step);
        }
    });
    return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    return binary(a, b, BinaryKind::kMul, "mul");
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b)
{
    return binary(a, b, BinaryKind::kDiv, "div");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value)
{
    Tensor<T> out = make_output<T>("add_scalar", x.shape(), {&x});
    if (out.is_meta()) return out;
    auto xs = x.data();
    auto os = out.mutable_data();
    for (std::size_t i = 0; i < xs.size(); ++i) os[i] = xs[i] + value;
    finish<T>(out, [](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T value)
{
    Tensor<T> out = make_output<T>("mul_scalar", x.shape(), {&x});
    if (out.is_meta()) return out;
    auto xs = x.data();
    auto os = out.mutable_data();
    for (std::size_t i = 0; i < xs.size(); ++i) os[i] = xs[i] * value;
    finish<T>(out, [value](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i] * value;
        }
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x)
{
    Tensor<T> out = make_output<T>("relu", x.shape(), {&x});
    if (out.is_meta()) return out;
    auto xs = x.data();
    auto os = out.mutable_data();
    for (std::size_t i = 0; i < xs.size(); ++i) os[i] = xs[i] > T(0) ? xs[i] : T(0);
    finish<T>(out, [](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            const auto& xd = node.parents[0]->data;
            for (std::size_t i = 0; i < g->size(); ++i) {
                if (xd[i] > T(0)) (*g)[i] += node.grad[i];
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x)
{
    Tensor<T> out = make_output<T>("gelu", x.shape(), {&x});
    if (out.is_meta()) return out;
    constexpr T kInvSqrt2 = T(0.70710678118654752440);
    auto xs = x.data();
    auto os = out.mutable_data();
    for (std::size_t i = 0; i < xs.size(); ++i) os[i] = T(0.5) * xs[i] * (T(1) + std::erf(xs[i] * kInvSqrt2));
    finish<T>(out, [](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            constexpr T kInvSqrt2 = T(0.70710678118654752440);
            constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
            const auto& xd = node.parents[0]->data;
            for (std::size_t i = 0; i < g->size(); ++i) {
                const T v = xd[i];
                const T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
                const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
                (*g)[i] += node.grad[i] * (cdf + v * pdf);
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x)
{
    Tensor<T> out = make_output<T>("softmax_lastdim", x.shape(), {&x});
    if (out.is_meta()) return out;
    const int64_t d = x.dim(-1);
    const int64_t rows = x.numel() / d;
    const T* xs = x.data().data();
    T* os = out.mutable_data().data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* in = xs + r * d;
        T* o = os + r * d;
        const T mx = *std::max_element(in, in + d);
        T total = 0;
        for (int64_t j = 0; j < d; ++j) {
            o[j] = std::exp(in[j] - mx);
            total += o[j];
        }
        for (int64_t j = 0; j < d; ++j) o[j] /= total;
    }
    finish<T>(out, [d, rows](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            const T* y = node.data.data();
            const T* go = node.grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                T dot = 0;
                for (int64_t j = 0; j < d; ++j) dot += go[r * d + j] * y[r * d + j];
                for (int64_t j = 0; j < d; ++j) (*g)[r * d + j] += y[r * d + j] * (go[r * d + j] - dot);
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, double eps)
{
    Tensor<T> out = make_output<T>("l2_normalize_lastdim", x.shape(), {&x});
    if (out.is_meta()) return out;
    const int64_t d = x.dim(-1);
    const int64_t rows = x.numel() / d;
    auto norms = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
    const T* xs = x.data().data();
    T* os = out.mutable_data().data();
    for (int64_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (int64_t j = 0; j < d; ++j) ss += xs[r * d + j] * xs[r * d + j];
        const T n = std::sqrt(ss);
        (*norms)[r] = n;
        const T denom = std::max(n, static_cast<T>(eps));
        for (int64_t j = 0; j < d; ++j) os[r * d + j] = xs[r * d + j] / denom;
    }
    finish<T>(out, [d, rows, eps, norms](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            const T* y = node.data.data();
            const T* go = node.grad.data();
            for (int64_t r = 0; r < rows; ++r) {
                const T n = (*norms)[r];
                if (n > static_cast<T>(eps)) {
                    T dot = 0;
                    for (int64_t j = 0; j < d; ++j) dot += y[r * d + j] * go[r * d + j];
                    for (int64_t j = 0; j < d; ++j) (*g)[r * d + j] += (go[r * d + j] - y[r * d + j] * dot) / n;
                } else {
                    for (int64_t j = 0; j < d; ++j) (*g)[r * d + j] += go[r * d + j] / static_cast<T>(eps);
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x)
{
    Tensor<T> out = make_output<T>("sum", {1}, {&x});
    if (out.is_meta()) return out;
    double total = 0;
    for (T v : x.data()) total += v;
    out.mutable_data()[0] = static_cast<T>(total);
    finish<T>(out, [](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            for (auto& v : *g) v += node.grad[0];
        }
    });
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x)
{
    return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_dim(const Tensor<T>& x, int dim, bool keepdim)
{
    const int rank = x.ndim();
    const int d = dim < 0 ? rank + dim : dim;
    if (d < 0 || d >= rank) throw ShapeError("sum_dim: dim out of range for " + to_string(x.shape()));
    Shape out_shape = x.shape();
    const int64_t extent = out_shape[d];
    if (keepdim) {
        out_shape[d] = 1;
    } else {
        out_shape.erase(out_shape.begin() + d);
        if (out_shape.empty()) out_shape = {1};
    }
    Tensor<T> out = make_output<T>("sum_dim", out_shape, {&x});
    if (out.is_meta()) return out;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < d; ++i) outer *= x.shape()[i];
    for (int i = d + 1; i < rank; ++i) inner *= x.shape()[i];
    const T* xs = x.data().data();
    T* os = out.mutable_data().data();
    std::vector<double> acc(static_cast<std::size_t>(inner));
    for (int64_t o = 0; o < outer; ++o) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (int64_t e = 0; e < extent; ++e) {
            const T* src = xs + (o * extent + e) * inner;
            for (int64_t i = 0; i < inner; ++i) acc[i] += src[i];
        }
        for (int64_t i = 0; i < inner; ++i) os[o * inner + i] = static_cast<T>(acc[i]);
    }
    finish<T>(out, [outer, extent, inner](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t e = 0; e < extent; ++e) {
                    for (int64_t i = 0; i < inner; ++i) (*g)[(o * extent + e) * inner + i] += node.grad[o * inner + i];
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b)
{
    if (a.ndim() < 2 || b.ndim() < 2) throw ShapeError("matmul: operands need rank >= 2");
    const int64_t M = a.dim(-2), K = a.dim(-1), N = b.dim(-1);
    if (b.dim(-2) != K) {
        throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const bool shared_b = b.ndim() == 2;
    Shape batch(a.shape().begin(), a.shape().end() - 2);
    if (!shared_b) {
        Shape bb(b.shape().begin(), b.shape().end() - 2);
        if (bb != batch) throw ShapeError("matmul: batch dims differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Shape out_shape = batch;
    out_shape.push_back(M);
    out_shape.push_back(N);
    Tensor<T> out = make_output<T>("matmul", out_shape, {&a, &b});
    if (out.is_meta()) return out;
    const int64_t batches = numel(batch);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.mutable_data().data();
    for (int64_t i = 0; i < batches; ++i) {
        internal::gemm_nn(M, N, K, pa + i * M * K, shared_b ? pb : pb + i * K * N, po + i * M * N, false);
    }
    finish<T>(out, [M, N, K, batches, shared_b](TensorNode<T>& node) {
        const T* g = node.grad.data();
        const T* xa = node.parents[0]->data.data();
        const T* xb = node.parents[1]->data.data();
        std::vector<T>* ga = parent_grad(node, 0);
        std::vector<T>* gb = parent_grad(node, 1);
        for (int64_t i = 0; i < batches; ++i) {
            const T* gi = g + i * M * N;
            const T* bi = shared_b ? xb : xb + i * K * N;
            if (ga) internal::gemm(false, true, M, K, N, gi, bi, ga->data() + i * M * K, true);
            if (gb) {
                T* gbi = shared_b ? gb->data() : gb->data() + i * K * N;
                internal::gemm(true, false, K, N, M, xa + i * M * K, gi, gbi, true);
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias)
{
    if (weight.ndim() != 2) throw ShapeError("linear: weight must be [out, in]");
    const int64_t in = weight.dim(1), out_f = weight.dim(0);
    if (x.dim(-1) != in) {
        throw ShapeError("linear: input features " + std::to_string(x.dim(-1)) + " != weight in " + std::to_string(in));
    }
    const bool has_bias = bias.defined();
    if (has_bias && (bias.ndim() != 1 || bias.dim(0) != out_f)) throw ShapeError("linear: bias must be [out]");
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    Tensor<T> out = has_bias ? make_output<T>("linear", out_shape, {&x, &weight, &bias})
                             : make_output<T>("linear", out_shape, {&x, &weight});
    if (out.is_meta()) return out;
    const int64_t rows = x.numel() / in;
    T* po = out.mutable_data().data();
    internal::gemm(false, true, rows, out_f, in, x.data().data(), weight.data().data(), po, false);
    if (has_bias) {
        const T* pb = bias.data().data();
        for (int64_t r = 0; r < rows; ++r) {
            for (int64_t j = 0; j < out_f; ++j) po[r * out_f + j] += pb[j];
        }
    }
    finish<T>(out, [rows, in, out_f, has_bias](TensorNode<T>& node) {
        const T* g = node.grad.data();
        const T* xd = node.parents[0]->data.data();
        const T* wd = node.parents[1]->data.data();
        if (auto* gx = parent_grad(node, 0)) internal::gemm_nn(rows, in, out_f, g, wd, gx->data(), true);
        if (auto* gw = parent_grad(node, 1)) internal::gemm(true, false, out_f, in, rows, g, xd, gw->data(), true);
        if (has_bias) {
            if (auto* gb = parent_grad(node, 2)) {
                for (int64_t r = 0; r < rows; ++r) {
                    for (int64_t j = 0; j < out_f; ++j) (*gb)[j] += g[r * out_f + j];
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape)
{
    int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one -1 extent");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0 && known > 0 && x.numel() % known == 0) shape[infer] = x.numel() / known;
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    }
    Tensor<T> out = make_output<T>("reshape", shape, {&x});
    if (out.is_meta()) return out;
    auto xs = x.data();
    std::copy(xs.begin(), xs.end(), out.mutable_data().begin());
    finish<T>(out, [](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += node.grad[i];
        }
    });
    return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& order)
{
    const int rank = x.ndim();
    if (static_cast<int>(order.size()) != rank) throw ShapeError("permute: order rank mismatch");
    std::vector<bool> used(rank, false);
    for (int o : order) {
        if (o < 0 || o >= rank || used[o]) throw ShapeError("permute: invalid order");
        used[o] = true;
    }
    const Shape& in_shape = x.shape();
    Shape out_shape(rank);
    for (int i = 0; i < rank; ++i) out_shape[i] = in_shape[order[i]];
    Tensor<T> out = make_output<T>("permute", out_shape, {&x});
    if (out.is_meta()) return out;

    std::vector<int64_t> in_strides(rank, 1);
    for (int i = rank - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    // src_strides[i]: input stride walked when output dim i advances.
    auto src_strides = std::make_shared<std::vector<int64_t>>(rank);
    for (int i = 0; i < rank; ++i) (*src_strides)[i] = in_strides[order[i]];

    auto walk = [out_shape, src_strides, rank](auto&& f) {
        const int64_t total = numel(out_shape);
        std::vector<int64_t> idx(rank, 0);
        int64_t src = 0;
        for (int64_t o = 0; o < total; ++o) {
            f(o, src);
            for (int d = rank - 1; d >= 0; --d) {
                ++idx[d];
                src += (*src_strides)[d];
                if (idx[d] < out_shape[d]) break;
                src -= (*src_strides)[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    };
    const T* xs = x.data().data();
    T* os = out.mutable_data().data();
    walk([&](int64_t o, int64_t s) { os[o] = xs[s]; });
    finish<T>(out, [walk](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            const T* go = node.grad.data();
            T* gi = g->data();
            walk([&](int64_t o, int64_t s) { gi[s] += go[o]; });
        }
    });
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int dim, int64_t start, int64_t length)
{
    const int rank = x.ndim();
    const int d = dim < 0 ? rank + dim : dim;
    if (d < 0 || d >= rank) throw ShapeError("slice: dim out of range");
    const int64_t extent = x.shape()[d];
    if (start < 0 || length <= 0 || start + length > extent) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside extent " + std::to_string(extent));
    }
    Shape out_shape = x.shape();
    out_shape[d] = length;
    Tensor<T> out = make_output<T>("slice", out_shape, {&x});
    if (out.is_meta()) return out;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < d; ++i) outer *= x.shape()[i];
    for (int i = d + 1; i < rank; ++i) inner *= x.shape()[i];
    const T* xs = x.data().data();
    T* os = out.mutable_data().data();
    for (int64_t o = 0; o < outer; ++o) {
        std::copy_n(xs + (o * extent + start) * inner, length * inner, os + o * length * inner);
    }
    finish<T>(out, [outer, inner, extent, start, length](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            for (int64_t o = 0; o < outer; ++o) {
                T* dst = g->data() + (o * extent + start) * inner;
                const T* src = node.grad.data() + o * length * inner;
                for (int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int dim)
{
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int rank = parts[0].ndim();
    const int d = dim < 0 ? rank + dim : dim;
    if (d < 0 || d >= rank) throw ShapeError("concat: dim out of range");
    Shape out_shape = parts[0].shape();
    out_shape[d] = 0;
    for (const auto& p : parts) {
        Shape s = p.shape();
        if (static_cast<int>(s.size()) != rank) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < rank; ++i) {
            if (i != d && s[i] != out_shape[i]) {
                throw ShapeError("concat: extents differ off the concat axis: " + to_string(parts[0].shape()) + " vs " +
                                 to_string(s));
            }
        }
        out_shape[d] += s[d];
    }
    Tensor<T> out = make_output<T>("concat", out_shape, parts);
    if (out.is_meta()) return out;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < d; ++i) outer *= out_shape[i];
    for (int i = d + 1; i < rank; ++i) inner *= out_shape[i];
    auto extents = std::make_shared<std::vector<int64_t>>();
    for (const auto& p : parts) extents->push_back(p.shape()[d]);
    const int64_t total = out_shape[d];
    T* os = out.mutable_data().data();
    int64_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const int64_t e = (*extents)[k];
        const T* ps = parts[k].data().data();
        for (int64_t o = 0; o < outer; ++o) std::copy_n(ps + o * e * inner, e * inner, os + (o * total + offset) * inner);
        offset += e;
    }
    finish<T>(out, [outer, inner, total, extents](TensorNode<T>& node) {
        int64_t offset = 0;
        for (std::size_t k = 0; k < extents->size(); ++k) {
            const int64_t e = (*extents)[k];
            if (auto* g = parent_grad(node, k)) {
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = node.grad.data() + (o * total + offset) * inner;
                    T* dst = g->data() + o * e * inner;
                    for (int64_t i = 0; i < e * inner; ++i) dst[i] += src[i];
                }
            }
            offset += e;
        }
    });
    return out;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, const Shape& out_shape, std::vector<int64_t> index)
{
    if (static_cast<int64_t>(index.size()) != numel(out_shape)) {
        throw ShapeError("gather: index count does not match output shape " + to_string(out_shape));
    }
    Tensor<T> out = make_output<T>("gather", out_shape, {&x});
    if (out.is_meta()) return out;
    const int64_t n_in = x.numel();
    for (int64_t i : index) {
        if (i >= n_in) throw ShapeError("gather: index out of range for " + to_string(x.shape()));
    }
    const T* xs = x.data().data();
    T* os = out.mutable_data().data();
    for (std::size_t i = 0; i < index.size(); ++i) os[i] = index[i] >= 0 ? xs[index[i]] : T(0);
    auto idx = std::make_shared<const std::vector<int64_t>>(std::move(index));
    finish<T>(out, [idx](TensorNode<T>& node) {
        if (auto* g = parent_grad(node, 0)) {
            for (std::size_t i = 0; i < idx->size(); ++i) {
                if ((*idx)[i] >= 0) (*g)[(*idx)[i]] += node.grad[i];
            }
        }
    });
    return out;
}

#define DCSWIN_INSTANTIATE(T)                                                                 \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                                       \
    template Tensor<T> mul_scalar(const Tensor<T>&, T);                                       \
    template Tensor<T> relu(const Tensor<T>&);                                                \
    template Tensor<T> gelu(const Tensor<T>&);                                                \
    template Tensor<T> softmax_lastdim(const Tensor<T>&);                                     \
    template Tensor<T> l2_normalize_lastdim(const Tensor<T>&, double);                        \
    template Tensor<T> sum(const Tensor<T>&);                                                 \
    template Tensor<T> mean(const Tensor<T>&);                                                \
    template Tensor<T> sum_dim(const Tensor<T>&, int, bool);                                  \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);          \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                      \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                    \
    template Tensor<T> slice(const Tensor<T>&, int, int64_t, int64_t);                        \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                            \
    template Tensor<T> gather(const Tensor<T>&, const Shape&, std::vector<int64_t>);

DCSWIN_INSTANTIATE(float)
DCSWIN_INSTANTIATE(double)
#undef DCSWIN_INSTANTIATE

}  // namespace dcswin
