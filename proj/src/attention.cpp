#include "dcswin/attention.hpp"

#include <cmath>

namespace dcswin {

namespace {

template <typename T>
void require_tokens(const Tensor<T>& t, const char* what)
{
    if (t.ndim() != 3) throw ShapeError(std::string(what) + " must be [B, N, D], got " + to_string(t.shape()));
}

// gather() with the index built lazily, skipped entirely for meta tensors.
template <typename T, typename IndexFn>
Tensor<T> relayout(const Tensor<T>& x, const Shape& shape, IndexFn&& index)
{
    if (x.is_meta() || meta_mode()) {
        MetaGuard meta;
        return Tensor<T>::zeros(shape);
    }
    return gather(x, shape, index());
}

int64_t round_up(int64_t v, int64_t m) { return (v + m - 1) / m * m; }

}  // namespace

template <typename T>
Tensor<T> linear_attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v)
{
    require_tokens(q, "query");
    require_tokens(k, "key");
    require_tokens(v, "value");
    if (q.shape() != k.shape() || v.dim(0) != q.dim(0) || v.dim(1) != q.dim(1)) {
        throw ShapeError("linear attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                         to_string(v.shape()));
    }
    const auto n = static_cast<T>(q.dim(1));
    auto qn = l2_normalize_lastdim(q);
    auto kn = l2_normalize_lastdim(k);
    const auto inv_n = static_cast<T>(1.0 / q.dim(1));
    // centered keys and values: mean(v) plus q . (k - mean k)^T (v - mean v) / denom
    auto ksum = sum_dim(kn, 1, true);                     // [B, 1, Dk]
    auto vmean = mul_scalar(sum_dim(v, 1, true), inv_n);  // [B, 1, Dv]
    auto kv = matmul(permute(sub(kn, mul_scalar(ksum, inv_n)), {0, 2, 1}), sub(v, vmean));  // [B, Dk, Dv]
    auto denom = add_scalar(add_scalar(sum_dim(mul(qn, ksum), 2, true), n),
                            static_cast<T>(double(n) * kKernelSmoothing));  // [B, N, 1]
    return add(vmean, div(matmul(qn, kv), denom));
}

template <typename T>
Tensor<T> linear_attention_core_gram(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v)
{
    require_tokens(q, "query");
    require_tokens(k, "key");
    require_tokens(v, "value");
    if (q.shape() != k.shape() || v.dim(0) != q.dim(0) || v.dim(1) != q.dim(1)) {
        throw ShapeError("linear attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                         to_string(v.shape()));
    }
    const auto m = static_cast<T>(q.dim(1));
    const auto inv_m = static_cast<T>(1.0 / q.dim(1));
    auto qn = l2_normalize_lastdim(q);
    auto kn = l2_normalize_lastdim(k);
    auto ksum = sum_dim(kn, 1, true);
    auto vmean = mul_scalar(sum_dim(v, 1, true), inv_m);
    auto sim = matmul(qn, permute(sub(kn, mul_scalar(ksum, inv_m)), {0, 2, 1}));  // [B, M, M]
    auto denom = add_scalar(add_scalar(sum_dim(mul(qn, ksum), 2, true), m), static_cast<T>(double(m) * kKernelSmoothing));
    return add(vmean, div(matmul(sim, sub(v, vmean)), denom));
}

template <typename T>
Tensor<T> linear_attention_spatial(const Tensor<T>& x, const QKVProjection<T>& p)
{
    if (x.ndim() != 4) throw ShapeError("spatial attention expects [B, C, H, W], got " + to_string(x.shape()));
    const int64_t B = x.dim(0), N = x.dim(2) * x.dim(3);
    auto tokens = [&](const Tensor<T>& w, const Tensor<T>& b) {
        auto y = conv2d(x, w, b);
        return permute(reshape(y, {B, y.dim(1), N}), {0, 2, 1});
    };
    auto out = linear_attention_core(tokens(p.wq, p.bq), tokens(p.wk, p.bk), tokens(p.wv, p.bv));
    return reshape(permute(out, {0, 2, 1}), {B, out.dim(2), x.dim(2), x.dim(3)});
}

template <typename T>
Tensor<T> linear_attention_channel(const Tensor<T>& x)
{
    if (x.ndim() != 4) throw ShapeError("channel attention expects [B, C, H, W], got " + to_string(x.shape()));
    auto r = reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)});
    return reshape(linear_attention_core_gram(r, r, r), x.shape());
}

template <typename T>
LinearAttentionReference<T> brute_force_linear_attention(const Tensor<T>& q_hat, const Tensor<T>& k_hat,
                                                         const Tensor<T>& v, bool force)
{
    require_tokens(q_hat, "query");
    require_tokens(k_hat, "key");
    require_tokens(v, "value");
    const int64_t B = q_hat.dim(0), N = q_hat.dim(1), D = q_hat.dim(2), Dv = v.dim(2);
    if (N > kBruteForceLimit && !force) {
        throw Error("brute-force attention refuses N = " + std::to_string(N) + " > " +
                    std::to_string(kBruteForceLimit) + " (force to override)");
    }
    LinearAttentionReference<T> ref{Tensor<T>::zeros({B, N, N}), Tensor<T>::zeros({B, N, Dv})};
    const T* q = q_hat.data().data();
    const T* k = k_hat.data().data();
    const T* vs = v.data().data();
    T* w = ref.weights.mutable_data().data();
    T* o = ref.output.mutable_data().data();
    std::vector<double> row(static_cast<std::size_t>(N)), acc(static_cast<std::size_t>(Dv));
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t i = 0; i < N; ++i) {
            double total = 0.0;
            for (int64_t j = 0; j < N; ++j) {
                double dot = 0.0;
                for (int64_t d = 0; d < D; ++d) dot += double(q[(b * N + i) * D + d]) * double(k[(b * N + j) * D + d]);
                row[j] = (1.0 + dot) + kKernelSmoothing;
                total += row[j];
            }
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int64_t j = 0; j < N; ++j) {
                const double wij = row[j] / total;
                w[(b * N + i) * N + j] = static_cast<T>(wij);
                const T* vr = vs + (b * N + j) * Dv;
                for (int64_t d = 0; d < Dv; ++d) acc[d] += wij * double(vr[d]);
            }
            for (int64_t d = 0; d < Dv; ++d) o[(b * N + i) * Dv + d] = static_cast<T>(acc[d]);
        }
    }
    return ref;
}

// ---- SSA / SCA modules -----------------------------------------------------

template <typename T>
SpatialAttention<T>::SpatialAttention(int64_t channels, Rng& rng)
{
    const int64_t dk = spatial_key_dim(channels);
    query = this->register_module("query", std::make_shared<Conv2d<T>>(channels, dk, 1, Conv2dOptions{}, true, rng));
    key = this->register_module("key", std::make_shared<Conv2d<T>>(channels, dk, 1, Conv2dOptions{}, true, rng));
    value = this->register_module("value", std::make_shared<Conv2d<T>>(channels, channels, 1, Conv2dOptions{}, true, rng));
    proj = this->register_module("proj", std::make_shared<Conv2d<T>>(channels, channels, 1, Conv2dOptions{}, true, rng));
}

template <typename T>
QKVProjection<T> SpatialAttention<T>::projection() const
{
    return {query->weight, query->bias, key->weight, key->bias, value->weight, value->bias};
}

template <typename T>
Tensor<T> SpatialAttention<T>::forward(const Tensor<T>& x) const
{
    return add(x, proj->forward(linear_attention_spatial(x, projection())));
}

template <typename T>
ChannelAttention<T>::ChannelAttention(int64_t channels, Rng& rng)
{
    proj = this->register_module("proj", std::make_shared<Conv2d<T>>(channels, channels, 1, Conv2dOptions{}, true, rng));
}

template <typename T>
Tensor<T> ChannelAttention<T>::forward(const Tensor<T>& x) const
{
    return add(x, proj->forward(linear_attention_channel(x)));
}

// ---- window attention --------------------------------------------------------

std::vector<int64_t> window_partition_index(int64_t B, int64_t H, int64_t W, int64_t C, int window, int shift)
{
    const int64_t Hp = round_up(H, window), Wp = round_up(W, window);
    std::vector<int64_t> index(static_cast<std::size_t>(B * Hp * Wp * C));
    std::size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t wy = 0; wy < Hp / window; ++wy)
            for (int64_t wx = 0; wx < Wp / window; ++wx)
                for (int64_t ty = 0; ty < window; ++ty)
                    for (int64_t tx = 0; tx < window; ++tx) {
                        const int64_t sy = (wy * window + ty + shift) % Hp;
                        const int64_t sx = (wx * window + tx + shift) % Wp;
                        const bool pad = sy >= H || sx >= W;
                        const int64_t base = ((b * H + sy) * W + sx) * C;
                        for (int64_t c = 0; c < C; ++c) index[o++] = pad ? -1 : base + c;
                    }
    return index;
}

std::vector<int64_t> window_reverse_index(int64_t B, int64_t H, int64_t W, int64_t C, int window, int shift)
{
    const int64_t Hp = round_up(H, window), Wp = round_up(W, window);
    const int64_t nww = Wp / window;
    std::vector<int64_t> index(static_cast<std::size_t>(B * H * W * C));
    std::size_t o = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                const int64_t i = (y - shift + Hp) % Hp, j = (x - shift + Wp) % Wp;
                const int64_t win = (b * (Hp / window) + i / window) * nww + j / window;
                const int64_t base = ((win * window + i % window) * window + j % window) * C;
                for (int64_t c = 0; c < C; ++c) index[o++] = base + c;
            }
    return index;
}

template <typename T>
WindowAttention<T>::WindowAttention(int64_t d, int w, int heads, Rng& rng) : dim(d), window_size(w), num_heads(heads)
{
    if (heads <= 0 || d % heads != 0) {
        throw ShapeError("window attention: " + std::to_string(heads) + " heads do not divide dim " + std::to_string(d));
    }
    if (w < 1) throw ShapeError("window attention: window size must be positive");
    qkv = this->register_module("qkv", std::make_shared<Linear<T>>(d, 3 * d, true, rng));
    proj = this->register_module("proj", std::make_shared<Linear<T>>(d, d, true, rng));
    const int64_t span = 2 * w - 1;
    relative_position_bias_table =
        this->register_parameter("relative_position_bias_table", Tensor<T>::zeros({span * span, heads}));
    trunc_normal_(relative_position_bias_table, 0.02, rng);
}

template <typename T>
WindowSpec WindowAttention<T>::resolve(int64_t H, int64_t W, bool shifted) const
{
    WindowSpec s;
    s.num_heads = num_heads;
    const int64_t smallest = std::min(H, W);
    if (smallest <= window_size) {
        s.window_size = static_cast<int>(smallest);
        s.shift = 0;
    } else {
        s.window_size = window_size;
        s.shift = shifted ? window_size / 2 : 0;
    }
    return s;
}

template <typename T>
Tensor<T> WindowAttention<T>::forward(const Tensor<T>& x, int64_t H, int64_t W, bool shifted, Tensor<T>* weights) const
{
    if (x.ndim() != 3 || x.dim(1) != H * W || x.dim(2) != dim) {
        throw ShapeError("window attention expects [B, " + std::to_string(H * W) + ", " + std::to_string(dim) +
                         "], got " + to_string(x.shape()));
    }
    const WindowSpec s = resolve(H, W, shifted);
    const int w = s.window_size;
    const int64_t B = x.dim(0), C = dim, heads = num_heads, hd = C / heads;
    const int64_t Hp = round_up(H, w), Wp = round_up(W, w);
    const int64_t nw = (Hp / w) * (Wp / w), n = int64_t(w) * w, bw = B * nw;
    const bool padded = Hp != H || Wp != W;

    auto xw = relayout(x, {bw, n, C}, [&] { return window_partition_index(B, H, W, C, w, s.shift); });
    auto r = reshape(qkv->forward(xw), {bw, n, 3, heads, hd});
    r = reshape(permute(r, {2, 0, 3, 1, 4}), {3, bw * heads, n, hd});
    auto q = mul_scalar(reshape(slice(r, 0, 0, 1), {bw * heads, n, hd}), static_cast<T>(1.0 / std::sqrt(double(hd))));
    auto k = reshape(slice(r, 0, 1, 1), {bw * heads, n, hd});
    auto v = reshape(slice(r, 0, 2, 1), {bw * heads, n, hd});

    auto attn = reshape(matmul(q, permute(k, {0, 2, 1})), {B, nw, heads, n, n});
    const int64_t span = 2 * window_size - 1;
    auto bias = relayout(relative_position_bias_table, {heads, n, n}, [&] {
        std::vector<int64_t> index(static_cast<std::size_t>(heads * n * n));
        std::size_t o = 0;
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    const int64_t dy = i / w - j / w + window_size - 1;
                    const int64_t dx = i % w - j % w + window_size - 1;
                    index[o++] = (dy * span + dx) * heads + h;
                }
        return index;
    });
    attn = add(attn, bias);

    if (s.shift > 0 || padded) {
        Tensor<T> mask;
        if (x.is_meta() || meta_mode()) {
            MetaGuard meta;
            mask = Tensor<T>::zeros({nw, 1, n, n});
        } else {
            // Region label of every rolled position; pairs across regions and
            // keys in the padding are suppressed.
            auto band = [&](int64_t p, int64_t extent) {
                if (s.shift == 0) return 0;
                return p < extent - w ? 0 : (p < extent - s.shift ? 1 : 2);
            };
            std::vector<T> m(static_cast<std::size_t>(nw * n * n), T(0));
            std::vector<int> region(static_cast<std::size_t>(n));
            std::vector<bool> pad(static_cast<std::size_t>(n));
            int64_t win = 0;
            for (int64_t wy = 0; wy < Hp / w; ++wy)
                for (int64_t wx = 0; wx < Wp / w; ++wx, ++win) {
                    for (int64_t t = 0; t < n; ++t) {
                        const int64_t py = wy * w + t / w, px = wx * w + t % w;
                        region[t] = band(py, Hp) * 3 + band(px, Wp);
                        pad[t] = (py + s.shift) % Hp >= H || (px + s.shift) % Wp >= W;
                    }
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < n; ++j) {
                            if (region[i] != region[j] || pad[j]) m[(win * n + i) * n + j] = T(kWindowMaskValue);
                        }
                }
            mask = Tensor<T>::from({nw, 1, n, n}, std::move(m));
        }
        attn = add(attn, mask);
    }
    attn = softmax_lastdim(attn);
    if (weights) *weights = attn;

    auto out = matmul(reshape(attn, {bw * heads, n, n}), v);
    out = reshape(permute(reshape(out, {bw, heads, n, hd}), {0, 2, 1, 3}), {bw, n, C});
    out = proj->forward(out);
    return relayout(out, {B, H * W, C}, [&] { return window_reverse_index(B, H, W, C, w, s.shift); });
}

#define DCSWIN_INSTANTIATE(T)                                                                                   \
    template Tensor<T> linear_attention_core(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
    template Tensor<T> linear_attention_core_gram(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
    template Tensor<T> linear_attention_spatial(const Tensor<T>&, const QKVProjection<T>&);                    \
    template Tensor<T> linear_attention_channel(const Tensor<T>&);                                             \
    template LinearAttentionReference<T> brute_force_linear_attention(const Tensor<T>&, const Tensor<T>&,      \
                                                                      const Tensor<T>&, bool);                 \
    template class SpatialAttention<T>;                                                                        \
    template class ChannelAttention<T>;                                                                        \
    template class WindowAttention<T>;

DCSWIN_INSTANTIATE(float)
DCSWIN_INSTANTIATE(double)
#undef DCSWIN_INSTANTIATE

}  // namespace dcswin
