#include "dcswin/dcfam.hpp"

namespace dcswin {

Variant parse_variant(const std::string& name)
{
    if (name == "baseline") return Variant::baseline;
    if (name == "dc") return Variant::dc;
    if (name == "dcfam_ns") return Variant::dcfam_ns;
    if (name == "dcfam") return Variant::dcfam;
    throw Error("unknown model variant '" + name + "' (baseline, dc, dcfam_ns, dcfam)");
}

std::string variant_name(Variant v)
{
    switch (v) {
    case Variant::baseline: return "baseline";
    case Variant::dc: return "dc";
    case Variant::dcfam_ns: return "dcfam_ns";
    case Variant::dcfam: return "dcfam";
    }
    return "?";
}

namespace {

template <typename T>
std::shared_ptr<Conv2d<T>> conv(int64_t in, int64_t out, int k, Conv2dOptions opt, bool bias, Rng& rng)
{
    return std::make_shared<Conv2d<T>>(in, out, k, opt, bias, rng);
}

std::string describe(const Shape& s)
{
    if (s.size() != 4) return to_string(s);
    return std::to_string(s[1]) + "@" + std::to_string(s[2]) + "x" + std::to_string(s[3]);
}

template <typename T>
Tensor<T> join(const Tensor<T>& a, const Tensor<T>& b, const std::string& edge)
{
    if (a.shape() != b.shape()) {
        throw ShapeError("aggregation edge " + edge + ": " + describe(a.shape()) + " vs " + describe(b.shape()));
    }
    return add(a, b);
}

}  // namespace

// ---- connections -------------------------------------------------------------

template <typename T>
DownsampleConnection<T>::DownsampleConnection(int64_t in, int64_t out, Rng& rng)
{
    conv_delta = this->register_module("conv_delta", conv<T>(in, out, 3, {2, 1, 1}, false, rng));
    bn_delta = this->register_module("bn_delta", std::make_shared<BatchNorm2d<T>>(out));
    conv_theta = this->register_module("conv_theta", conv<T>(in, in, 3, {1, 1, 1}, false, rng));
    bn_theta = this->register_module("bn_theta", std::make_shared<BatchNorm2d<T>>(in));
    conv_mu = this->register_module("conv_mu", conv<T>(in, out, 3, {2, 1, 1}, false, rng));
    bn_mu = this->register_module("bn_mu", std::make_shared<BatchNorm2d<T>>(out));
}

template <typename T>
Tensor<T> DownsampleConnection<T>::forward(const Tensor<T>& x) const
{
    auto direct = bn_delta->forward(conv_delta->forward(x));
    auto deep = bn_mu->forward(conv_mu->forward(bn_theta->forward(conv_theta->forward(x))));
    return relu(add(direct, deep));
}

template <typename T>
DilatedUpsample<T>::DilatedUpsample(int64_t in, int64_t out, int rate, Rng& rng)
{
    pointwise = this->register_module("pointwise", conv<T>(in, out, 1, {}, true, rng));
    dilated = this->register_module("dilated", conv<T>(out, out, 3, {1, rate, rate}, true, rng));
    up = this->register_module("up", std::make_shared<ConvTranspose2d<T>>(out, out, 2, 2, 0, true, rng));
}

template <typename T>
Tensor<T> DilatedUpsample<T>::forward(const Tensor<T>& x) const
{
    return up->forward(dilated->forward(pointwise->forward(x)));
}

template <typename T>
LargeFieldUpsample<T>::LargeFieldUpsample(int64_t in, int64_t out, Rng& rng)
{
    f6 = this->register_module("f6", std::make_shared<DilatedUpsample<T>>(in, out, 6, rng));
    f12 = this->register_module("f12", std::make_shared<DilatedUpsample<T>>(out, out, 12, rng));
}

template <typename T>
Tensor<T> LargeFieldUpsample<T>::forward(const Tensor<T>& x) const
{
    return f12->forward(relu(f6->forward(x)));
}

// ---- aggregation -------------------------------------------------------------

template <typename T>
Aggregator<T>::Aggregator(int64_t C, Variant v, Rng& rng) : variant(v)
{
    if (v == Variant::baseline) {
        for (int k = 0; k < 3; ++k) {
            baseline_align[k] = this->register_module("align" + std::to_string(k + 2),
                                                      conv<T>(C << (k + 1), C, 1, {}, true, rng));
        }
        return;
    }
    down5_a = this->register_module("down5_a", std::make_shared<DownsampleConnection<T>>(2 * C, 4 * C, rng));
    down5_b = this->register_module("down5_b", std::make_shared<DownsampleConnection<T>>(4 * C, 8 * C, rng));
    down6_a = this->register_module("down6_a", std::make_shared<DownsampleConnection<T>>(C, 2 * C, rng));
    down6_b = this->register_module("down6_b", std::make_shared<DownsampleConnection<T>>(2 * C, 4 * C, rng));
    lu7 = this->register_module("lu7", std::make_shared<LargeFieldUpsample<T>>(8 * C, 2 * C, rng));
    lu8 = this->register_module("lu8", std::make_shared<LargeFieldUpsample<T>>(4 * C, C, rng));
    align8 = this->register_module("align8", conv<T>(2 * C, C, 1, {}, true, rng));
    if (v == Variant::dcfam) {
        ssa5 = ssa6 = this->register_module("ssa", std::make_shared<SpatialAttention<T>>(4 * C, rng));
        sca6 = sca7 = this->register_module("sca", std::make_shared<ChannelAttention<T>>(2 * C, rng));
    } else if (v == Variant::dcfam_ns) {
        ssa5 = this->register_module("ssa5", std::make_shared<SpatialAttention<T>>(4 * C, rng));
        ssa6 = this->register_module("ssa6", std::make_shared<SpatialAttention<T>>(4 * C, rng));
        sca6 = this->register_module("sca6", std::make_shared<ChannelAttention<T>>(2 * C, rng));
        sca7 = this->register_module("sca7", std::make_shared<ChannelAttention<T>>(2 * C, rng));
    }
}

template <typename T>
void Aggregator<T>::aggregate(FeaturePyramid<T>& p) const
{
    const auto& st = p.st;
    if (variant == Variant::baseline) {
        auto af1 = st[0];
        for (int k = 0; k < 3; ++k) {
            auto up = bilinear_upsample(baseline_align[k]->forward(st[k + 1]), 2 << k);
            af1 = join(af1, up, "baseline ST" + std::to_string(k + 2));
        }
        p.af = {af1, st[1], st[2], st[3]};
        return;
    }
    auto ssa = [](const std::shared_ptr<SpatialAttention<T>>& m, const Tensor<T>& x) { return m ? m->forward(x) : x; };
    auto sca = [](const std::shared_ptr<ChannelAttention<T>>& m, const Tensor<T>& x) { return m ? m->forward(x) : x; };

    p.af[3] = join(st[3], down5_b->forward(ssa(ssa5, down5_a->forward(st[1]))), "AF4 = ST4 + D(SSA(D(ST2)))");
    p.af[2] = join(ssa(ssa6, st[2]), down6_b->forward(sca(sca6, down6_a->forward(st[0]))),
                   "AF3 = SSA(ST3) + D(SCA(D(ST1)))");
    p.af[1] = join(sca(sca7, st[1]), lu7->forward(p.af[3]), "AF2 = SCA(ST2) + LU(AF4)");
    auto up = align8->forward(bilinear_upsample(p.af[1], 2));
    p.af[0] = join(join(st[0], up, "AF1 = ST1 + align(U(AF2))"), lu8->forward(p.af[2]), "AF1 += LU(AF3)");
}

// ---- head and full model -------------------------------------------------------

template <typename T>
SegmentationHead<T>::SegmentationHead(int64_t in, int classes, int up, Rng& rng) : upsample(up)
{
    if (classes < 2) throw Error("segmentation head needs at least 2 classes, got " + std::to_string(classes));
    conv = this->register_module("conv", dcswin::conv<T>(in, in, 3, {1, 1, 1}, false, rng));
    bn = this->register_module("bn", std::make_shared<BatchNorm2d<T>>(in));
    classifier = this->register_module("classifier", dcswin::conv<T>(in, classes, 1, {}, true, rng));
}

template <typename T>
Tensor<T> SegmentationHead<T>::forward(const Tensor<T>& x) const
{
    return bilinear_upsample(classifier->forward(relu(bn->forward(conv->forward(x)))), upsample);
}

template <typename T>
SegmentationModel<T>::SegmentationModel(const ModelConfig& cfg, uint64_t seed)
    : config(cfg), variant(parse_variant(cfg.variant))
{
    config.validate();
    Rng rng(seed);
    encoder = this->register_module("encoder", std::make_shared<SwinEncoder<T>>(config, rng));
    decoder = this->register_module("decoder", std::make_shared<Aggregator<T>>(config.embed_dim, variant, rng));
    head = this->register_module("head", std::make_shared<SegmentationHead<T>>(config.embed_dim, config.num_classes,
                                                                                config.patch_size, rng));
}

template <typename T>
FeaturePyramid<T> SegmentationModel<T>::features(const Tensor<T>& image) const
{
    auto p = encoder->encode(image);
    decoder->aggregate(p);
    return p;
}

template <typename T>
Tensor<T> SegmentationModel<T>::forward(const Tensor<T>& image) const
{
    if (image.ndim() != 4 || image.dim(1) != 3) {
        throw ShapeError("model expects an RGB batch [B, 3, H, W], got " + to_string(image.shape()));
    }
    const int64_t B = image.dim(0), H = image.dim(2), W = image.dim(3), m = pad_multiple();
    const int64_t Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
    Tensor<T> x = image;
    if (Hp != H || Wp != W) {
        if (image.is_meta() || meta_mode()) {
            MetaGuard meta;
            x = Tensor<T>::zeros({B, 3, Hp, Wp});
        } else {
            std::vector<int64_t> index(static_cast<std::size_t>(B * 3 * Hp * Wp));
            std::size_t o = 0;
            for (int64_t bc = 0; bc < B * 3; ++bc)
                for (int64_t y = 0; y < Hp; ++y)
                    for (int64_t xx = 0; xx < Wp; ++xx) index[o++] = (y < H && xx < W) ? (bc * H + y) * W + xx : -1;
            x = gather(image, {B, 3, Hp, Wp}, std::move(index));
        }
    }
    auto logits = head->forward(features(x).af[0]);
    if (Hp != H) logits = slice(logits, 2, 0, H);
    if (Wp != W) logits = slice(logits, 3, 0, W);
    return logits;
}

#define DCSWIN_INSTANTIATE(T)                 \
    template class DownsampleConnection<T>;   \
    template class DilatedUpsample<T>;        \
    template class LargeFieldUpsample<T>;     \
    template class Aggregator<T>;             \
    template class SegmentationHead<T>;       \
    template class SegmentationModel<T>;

DCSWIN_INSTANTIATE(float)
DCSWIN_INSTANTIATE(double)
#undef DCSWIN_INSTANTIATE

}  // namespace dcswin
