#pragma once

#include "dcswin/swin.hpp"

namespace dcswin {

enum class Variant { baseline, dc, dcfam_ns, dcfam };

/// "baseline", "dc", "dcfam_ns", "dcfam"; throws Error otherwise.
Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

/// ReLU(BN(conv3x3/2 i->j)(x) + BN(conv3x3/2 i->j)(BN(conv3x3 i->i)(x))); halves H and W.
template <typename T>
class DownsampleConnection : public Module<T> {
public:
    DownsampleConnection(int64_t in, int64_t out, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    std::shared_ptr<Conv2d<T>> conv_delta, conv_theta, conv_mu;
    std::shared_ptr<BatchNorm2d<T>> bn_delta, bn_theta, bn_mu;
};

/// One stage of the large-field upsample: 1x1 conv, 3x3 conv dilated by
/// `rate`, 2x2 stride-2 transpose conv.
template <typename T>
class DilatedUpsample : public Module<T> {
public:
    DilatedUpsample(int64_t in, int64_t out, int rate, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    std::shared_ptr<Conv2d<T>> pointwise, dilated;
    std::shared_ptr<ConvTranspose2d<T>> up;
};

/// f12(ReLU(f6(x))): m -> n channels, 4x resolution.
template <typename T>
class LargeFieldUpsample : public Module<T> {
public:
    LargeFieldUpsample(int64_t in, int64_t out, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    std::shared_ptr<DilatedUpsample<T>> f6, f12;
};

/// Maps the four encoder taps to AF_1..AF_4 (base width C):
///   AF4 = ST4 + D(4C->8C)(SSA(D(2C->4C)(ST2)))
///   AF3 = SSA(ST3) + D(2C->4C)(SCA(D(C->2C)(ST1)))
///   AF2 = SCA(ST2) + LU(8C->2C)(AF4)
///   AF1 = ST1 + align(2C->C)(up2(AF2)) + LU(4C->C)(AF3)
/// The dc variant replaces SSA/SCA by identity; dcfam_ns gives each of the
/// four attention sites its own parameters. The baseline variant skips the
/// graph: AF1 = ST1 + sum_k up(align_k(ST_k)).
template <typename T>
class Aggregator : public Module<T> {
public:
    Aggregator(int64_t base, Variant variant, Rng& rng);
    /// Fills p.af from p.st.
    void aggregate(FeaturePyramid<T>& p) const;

    Variant variant;
    // dense graph
    std::shared_ptr<DownsampleConnection<T>> down5_a, down5_b, down6_a, down6_b;
    std::shared_ptr<LargeFieldUpsample<T>> lu7, lu8;
    std::shared_ptr<Conv2d<T>> align8;
    // attention sites (null in the dc variant); shared storage in dcfam
    std::shared_ptr<SpatialAttention<T>> ssa5, ssa6;
    std::shared_ptr<ChannelAttention<T>> sca6, sca7;
    // baseline
    std::array<std::shared_ptr<Conv2d<T>>, 3> baseline_align;
};

/// 3x3 conv + BN + ReLU, 1x1 conv to K classes, bilinear upsample.
template <typename T>
class SegmentationHead : public Module<T> {
public:
    SegmentationHead(int64_t in, int classes, int upsample, Rng& rng);
    Tensor<T> forward(const Tensor<T>& x) const;

    int upsample;
    std::shared_ptr<Conv2d<T>> conv, classifier;
    std::shared_ptr<BatchNorm2d<T>> bn;
};

template <typename T>
class SegmentationModel : public Module<T> {
public:
    /// Variant is taken from cfg.variant.
    SegmentationModel(const ModelConfig& cfg, uint64_t seed);

    /// image [B, 3, H, W] -> logits [B, K, H, W]. Inputs are zero-padded to a
    /// multiple of 8 * patch size internally and the logits cropped back.
    Tensor<T> forward(const Tensor<T>& image) const;
    /// Encoder taps and aggregation features for an already padded image.
    FeaturePyramid<T> features(const Tensor<T>& image) const;
    int64_t pad_multiple() const { return int64_t(config.patch_size) * 8; }

    ModelConfig config;
    Variant variant;
    std::shared_ptr<SwinEncoder<T>> encoder;
    std::shared_ptr<Aggregator<T>> decoder;
    std::shared_ptr<SegmentationHead<T>> head;
};

}  // namespace dcswin
