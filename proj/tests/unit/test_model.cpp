#include <cmath>
#include <map>

#include "doctest.h"

#include "dcswin/dcfam.hpp"
#include "dcswin/gradcheck.hpp"
#include "test_util.hpp"

using namespace dcswin;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

std::vector<double> layer_norm_row(const std::vector<double>& x, const Tensor64& g, const Tensor64& b)
{
    double mu = 0, var = 0;
    for (double v : x) mu += v / double(x.size());
    for (double v : x) var += (v - mu) * (v - mu) / double(x.size());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mu) / std::sqrt(var + 1e-5) * g.data()[i] + b.data()[i];
    return out;
}

std::vector<double> affine(const std::vector<double>& x, const Linear<double>& l)
{
    const int64_t out = l.weight.dim(0), in = l.weight.dim(1);
    std::vector<double> y(static_cast<std::size_t>(out));
    for (int64_t o = 0; o < out; ++o) {
        double acc = l.bias.defined() ? l.bias.data()[o] : 0.0;
        for (int64_t i = 0; i < in; ++i) acc += l.weight.data()[o * in + i] * x[i];
        y[o] = acc;
    }
    return y;
}

// Straight-line Swin block: tokens attend to tokens of the same (rolled)
// window that are also adjacent in the unrolled map.
std::vector<double> swin_block_oracle(const Tensor64& x, int64_t H, int64_t W, const SwinBlock<double>& blk)
{
    const auto& at = *blk.attn;
    const int64_t N = H * W, D = at.dim, heads = at.num_heads, hd = D / heads;
    const int64_t w = at.window_size, s = blk.shifted ? w / 2 : 0, span = 2 * w - 1;
    auto row = [&](const std::vector<double>& v, int64_t t, int64_t width) {
        return std::vector<double>(v.begin() + t * width, v.begin() + (t + 1) * width);
    };
    std::vector<double> xs(x.data().begin(), x.data().end());
    std::vector<std::vector<double>> qkv(static_cast<std::size_t>(N));
    for (int64_t t = 0; t < N; ++t) qkv[t] = affine(layer_norm_row(row(xs, t, D), blk.norm1->gamma, blk.norm1->beta), *at.qkv);
    std::vector<double> y(xs);
    for (int64_t i = 0; i < N; ++i) {
        const int64_t yi = i / W, xi = i % W, ryi = (yi - s + H) % H, rxi = (xi - s + W) % W;
        std::vector<double> mixed(static_cast<std::size_t>(D), 0.0);
        for (int64_t h = 0; h < heads; ++h) {
            std::vector<std::pair<int64_t, double>> logits;
            double mx = -1e300;
            for (int64_t j = 0; j < N; ++j) {
                const int64_t yj = j / W, xj = j % W, ryj = (yj - s + H) % H, rxj = (xj - s + W) % W;
                if (ryi / w != ryj / w || rxi / w != rxj / w) continue;
                if (std::abs(yi - yj) >= w || std::abs(xi - xj) >= w) continue;
                double dot = 0;
                for (int64_t d = 0; d < hd; ++d) dot += qkv[i][h * hd + d] * qkv[j][D + h * hd + d];
                const int64_t rel = (yi - yj + w - 1) * span + (xi - xj + w - 1);
                const double l = dot / std::sqrt(double(hd)) + at.relative_position_bias_table.at({rel, h});
                logits.emplace_back(j, l);
                mx = std::max(mx, l);
            }
            double z = 0;
            for (auto& [j, l] : logits) z += (l = std::exp(l - mx));
            for (auto& [j, l] : logits)
                for (int64_t d = 0; d < hd; ++d) mixed[h * hd + d] += l / z * qkv[j][2 * D + h * hd + d];
        }
        auto o = affine(mixed, *at.proj);
        for (int64_t d = 0; d < D; ++d) y[i * D + d] += o[d];
    }
    std::vector<double> out(y);
    for (int64_t t = 0; t < N; ++t) {
        auto hdn = affine(layer_norm_row(row(y, t, D), blk.norm2->gamma, blk.norm2->beta), *blk.fc1);
        for (auto& v : hdn) v = 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)));
        auto o = affine(hdn, *blk.fc2);
        for (int64_t d = 0; d < D; ++d) out[t * D + d] += o[d];
    }
    return out;
}

void randomize(Module<double>& m, double std, uint64_t seed)
{
    Rng rng(seed);
    for (auto& p : m.parameters()) trunc_normal_(p, std, rng);
}

ModelConfig nano(const std::string& variant, int classes = 6)
{
    auto c = ModelConfig::from_preset("swin_nano");
    c.variant = variant;
    c.num_classes = classes;
    return c;
}

}  // namespace

// ---- encoder ---------------------------------------------------------------------

TEST_CASE("presets and config validation")
{
    auto s = ModelConfig::from_preset("swin_s");
    CHECK(s.embed_dim == 96);
    CHECK(s.depths == std::array<int, 4>{2, 2, 18, 2});
    CHECK(ModelConfig::from_preset("swin_t").depths[2] == 6);
    CHECK(ModelConfig::from_preset("swin_b").embed_dim == 128);
    CHECK(ModelConfig::from_preset("swin_l").embed_dim == 192);
    auto n = ModelConfig::from_preset("swin_nano");
    CHECK(n.embed_dim == 32);
    CHECK(n.window_size == 4);
    CHECK(n.num_heads == std::array<int, 4>{2, 4, 8, 16});
    CHECK_THROWS_AS(ModelConfig::from_preset("swin_xl"), Error);
    n.num_heads[1] = 3;
    CHECK_THROWS_AS(n.validate(), Error);
    n = ModelConfig::from_preset("swin_nano");
    n.num_classes = 1;
    CHECK_THROWS_AS(n.validate(), Error);
}

TEST_CASE("patch embedding: token count, zero image, conv equivalence")
{
    Rng rng(0);
    PatchEmbed<double> pe(4, 8, rng);
    std::array<int64_t, 2> grid{};
    CHECK(pe.forward(Tensor64::zeros({1, 3, 64, 64}), grid).shape() == Shape{1, 256, 8});
    CHECK(grid == std::array<int64_t, 2>{16, 16});

    trunc_normal_(pe.proj->bias, 0.5, rng);
    auto z = pe.forward(Tensor64::zeros({1, 3, 8, 8}), grid);
    for (int64_t t = 1; t < 4; ++t)
        for (int64_t d = 0; d < 8; ++d) CHECK(z.at({0, t, d}) == z.at({0, 0, d}));

    auto img = random_tensor<double>({2, 3, 8, 12}, 1);
    auto tokens = pe.forward(img, grid);
    auto conv = conv2d(img, reshape(pe.proj->weight, {8, 3, 4, 4}), pe.proj->bias, {4, 0, 1});
    auto ref = layer_norm(map_to_tokens(conv), pe.norm->gamma, pe.norm->beta);
    CHECK(max_abs_diff(tokens.data(), ref.data()) <= 1e-6);
    CHECK_THROWS_AS(pe.forward(Tensor64::zeros({1, 4, 8, 8}), grid), ShapeError);
}

TEST_CASE("swin block pair: exact identity with zeroed residual branches")
{
    Rng rng(1);
    SwinBlock<double> a(8, 2, 2, 4.0, false, rng), b(8, 2, 2, 4.0, true, rng);
    for (auto* blk : {&a, &b}) {
        for (auto* l : {blk->attn->proj.get(), blk->fc2.get()}) {
            std::fill(l->weight.mutable_data().begin(), l->weight.mutable_data().end(), 0.0);
            std::fill(l->bias.mutable_data().begin(), l->bias.mutable_data().end(), 0.0);
        }
    }
    auto x = random_tensor<double>({2, 16, 8}, 2);
    auto y = b.forward(a.forward(x, 4, 4), 4, 4);
    CHECK(y.shape() == x.shape());
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("swin block pair matches a straight-line reference on a 2x2-window toy")
{
    Rng rng(2);
    SwinBlock<double> a(4, 2, 2, 2.0, false, rng), b(4, 2, 2, 2.0, true, rng);
    randomize(a, 0.4, 3);
    randomize(b, 0.4, 4);
    auto x = random_tensor<double>({1, 16, 4}, 5);
    auto mid = a.forward(x, 4, 4);
    CHECK(max_abs_diff(mid.data(), swin_block_oracle(x, 4, 4, a)) <= 1e-5);
    auto out = b.forward(mid, 4, 4);
    CHECK(max_abs_diff(out.data(), swin_block_oracle(mid, 4, 4, b)) <= 1e-5);
}

TEST_CASE("patch merging: shape law, constant field, index oracle")
{
    Rng rng(3);
    PatchMerging<float> pm(96, rng);
    CHECK(pm.forward(Tensor32::zeros({1, 256, 96}), 16, 16).shape() == Shape{1, 64, 192});

    PatchMerging<double> small(3, rng);
    trunc_normal_(small.norm->beta, 0.3, rng);
    std::vector<double> row{0.3, -1.0, 2.0};
    std::vector<double> field;
    for (int t = 0; t < 16; ++t) field.insert(field.end(), row.begin(), row.end());
    auto merged = small.forward(Tensor64::from({1, 16, 3}, field), 4, 4);
    for (int64_t t = 1; t < 4; ++t)
        for (int64_t d = 0; d < 6; ++d) CHECK(merged.at({0, t, d}) == merged.at({0, 0, d}));

    const int64_t H = 5, W = 4, D = 2;
    auto idx = merge_index(1, H, W, D);
    REQUIRE(idx.size() == std::size_t(3 * 2 * 4 * D));
    std::size_t o = 0;
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 2; ++j)
            for (auto [dy, dx] : {std::pair{0, 0}, std::pair{1, 0}, std::pair{0, 1}, std::pair{1, 1}})
                for (int64_t d = 0; d < D; ++d) {
                    const int64_t y = 2 * i + dy, x = 2 * j + dx;
                    CHECK(idx[o++] == (y < H ? (y * W + x) * D + d : -1));
                }
}

TEST_CASE("encoder ladder: swin_nano at 64 and swin_s at 1024 (shape-only)")
{
    SegmentationModel<float> m(nano("dcfam"), 0);
    auto p = m.features(random_tensor<float>({1, 3, 64, 64}, 6));
    const std::array<Shape, 4> want{Shape{1, 32, 16, 16}, {1, 64, 8, 8}, {1, 128, 4, 4}, {1, 256, 2, 2}};
    for (int k = 0; k < 4; ++k) {
        CHECK(p.st[k].shape() == want[k]);
        CHECK(p.af[k].shape() == want[k]);
    }

    MetaGuard meta;
    auto cfg = ModelConfig::from_preset("swin_s");
    SegmentationModel<float> big(cfg, 0);
    auto q = big.features(Tensor32::zeros({1, 3, 1024, 1024}));
    const std::array<Shape, 4> ladder{Shape{1, 96, 256, 256}, {1, 192, 128, 128}, {1, 384, 64, 64}, {1, 768, 32, 32}};
    for (int k = 0; k < 4; ++k) {
        CHECK(q.st[k].shape() == ladder[k]);
        CHECK(q.af[k].shape() == ladder[k]);
    }
    const double count = double(big.encoder->parameter_count());
    CHECK(std::abs(count - 50e6) <= 5e6);
}

TEST_CASE("shifting the image by one window permutes first-block outputs")
{
    Rng rng(7);
    PatchEmbed<float> pe(4, 16, rng);
    SwinBlock<float> blk(16, 2, 4, 4.0, false, rng);
    const int64_t H = 32, W = 32, shift = 16;  // one 4-token window of 4x4 patches
    auto img = random_tensor<float>({1, 3, H, W}, 8);
    std::vector<float> rolled(img.data().size());
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x)
                rolled[(c * H + (y + shift) % H) * W + (x + shift) % W] = img.at({0, c, y, x});
    std::array<int64_t, 2> grid{};
    auto a = blk.forward(pe.forward(img, grid), 8, 8);
    auto b = blk.forward(pe.forward(Tensor32::from(img.shape(), rolled), grid), 8, 8);
    double worst = 0;
    for (int64_t y = 0; y < 8; ++y)
        for (int64_t x = 0; x < 8; ++x)
            for (int64_t d = 0; d < 16; ++d) {
                const int64_t ty = (y + 4) % 8, tx = (x + 4) % 8;
                worst = std::max(worst, double(std::abs(a.at({0, y * 8 + x, d}) - b.at({0, ty * 8 + tx, d}))));
            }
    CHECK(worst <= 1e-5);
}

TEST_CASE("every encoder parameter receives gradient from ST4")
{
    Rng rng(9);
    SwinEncoder<float> enc(nano("dcfam"), rng);
    auto p = enc.encode(random_tensor<float>({2, 3, 64, 64}, 10));
    sum(mul(p.st[3], random_tensor<float>(p.st[3].shape(), 11))).backward();
    for (const auto& np : enc.named_parameters()) {
        // the ST1..ST3 taps are side outputs, off the path to ST4
        if (np.name.starts_with("taps.") && !np.name.starts_with("taps.3")) continue;
        bool nonzero = false;
        if (np.tensor.has_grad())
            for (float g : np.tensor.grad()) nonzero = nonzero || g != 0.0f;
        INFO(np.name);
        CHECK(nonzero);
    }
}

// ---- decoder ---------------------------------------------------------------------

TEST_CASE("downsample connection: shape, non-negativity, zero weights")
{
    Rng rng(10);
    DownsampleConnection<float> d(96, 192, rng);
    auto y = d.forward(random_tensor<float>({1, 96, 16, 16}, 12));
    CHECK(y.shape() == Shape{1, 192, 8, 8});
    for (float v : y.data()) CHECK(v >= 0.0f);
    for (auto& p : d.named_parameters())
        if (p.name.find("conv") != std::string::npos)
            std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0f);
    const auto zeroed = d.forward(random_tensor<float>({2, 96, 8, 8}, 13));
    for (float v : zeroed.data()) CHECK(v == 0.0f);
}

TEST_CASE("large-field upsample: x4 law for both decoder sites")
{
    Rng rng(11);
    CHECK(LargeFieldUpsample<float>(768, 192, rng).forward(random_tensor<float>({1, 768, 2, 2}, 14)).shape() ==
          Shape{1, 192, 8, 8});
    CHECK(LargeFieldUpsample<float>(384, 96, rng).forward(random_tensor<float>({1, 384, 4, 4}, 15)).shape() ==
          Shape{1, 96, 16, 16});
}

TEST_CASE("gradcheck: downsample and large-field connections")
{
    GradcheckOptions opt;
    opt.step = 1e-5;
    opt.max_elements = 40;
    Rng rng(12);
    DownsampleConnection<double> d(4, 8, rng);
    randomize(d, 0.5, 16);
    auto x = random_tensor<double>({2, 4, 8, 8}, 17);
    std::vector<Tensor64> in{x};
    for (auto& p : d.parameters()) in.push_back(p);
    auto r1 = gradcheck([&] { return projection_loss(d.forward(x), 18); }, in, {}, opt);
    INFO(r1.worst);
    CHECK(r1.max_rel_error <= 1e-3);

    LargeFieldUpsample<double> lu(8, 4, rng);
    randomize(lu, 0.3, 19);
    auto z = random_tensor<double>({2, 8, 2, 2}, 20);
    in = {z};
    for (auto& p : lu.parameters()) in.push_back(p);
    auto r2 = gradcheck([&] { return projection_loss(lu.forward(z), 21); }, in, {}, opt);
    INFO(r2.worst);
    CHECK(r2.max_rel_error <= 1e-3);
}

TEST_CASE("aggregation: ladder errors name the edge")
{
    Rng rng(13);
    Aggregator<float> agg(8, Variant::dcfam, rng);
    FeaturePyramid<float> p;
    p.st = {Tensor32::zeros({1, 8, 16, 16}), Tensor32::zeros({1, 16, 8, 8}), Tensor32::zeros({1, 32, 4, 4}),
            Tensor32::zeros({1, 64, 4, 4})};
    try {
        agg.aggregate(p);
        FAIL("expected a ShapeError");
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("AF4") != std::string::npos);
    }
}

TEST_CASE("additivity: zeroed downsample branch leaves AF4 == ST4")
{
    SegmentationModel<float> m(nano("dcfam"), 1);
    for (auto& p : m.decoder->down5_b->named_parameters()) {
        if (p.name.find("conv") != std::string::npos || p.name.find(".bias") != std::string::npos)
            std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0f);
    }
    auto p = m.features(random_tensor<float>({2, 3, 64, 64}, 22));
    CHECK(max_abs_diff(p.af[3].data(), p.st[3].data()) == 0.0);
}

TEST_CASE("shared attention storage in dcfam, disjoint in dcfam_ns")
{
    SegmentationModel<float> shared(nano("dcfam"), 0), unshared(nano("dcfam_ns"), 0);
    auto& d = *shared.decoder;
    CHECK(d.ssa5 == d.ssa6);
    CHECK(d.sca6 == d.sca7);
    d.ssa5->query->weight.mutable_data()[0] = 42.0f;
    CHECK(d.ssa6->query->weight.data()[0] == 42.0f);
    d.sca7->proj->bias.mutable_data()[1] = -3.0f;
    CHECK(d.sca6->proj->bias.data()[1] == -3.0f);

    auto& u = *unshared.decoder;
    auto a = u.ssa5->parameters(), b = u.ssa6->parameters(), c = u.sca6->parameters(), e = u.sca7->parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK_FALSE(a[i].same_storage(b[i]));
    for (std::size_t i = 0; i < c.size(); ++i) CHECK_FALSE(c[i].same_storage(e[i]));
    u.ssa5->query->weight.mutable_data()[0] = 42.0f;
    CHECK(u.ssa6->query->weight.data()[0] != 42.0f);
}

TEST_CASE("variant parameter counts: baseline < dc < dcfam <= dcfam_ns")
{
    std::map<std::string, int64_t> n;
    for (auto v : {"baseline", "dc", "dcfam_ns", "dcfam"}) n[v] = SegmentationModel<float>(nano(v), 0).parameter_count();
    CHECK(n["baseline"] < n["dc"]);
    CHECK(n["dc"] < n["dcfam"]);
    CHECK(n["dcfam"] <= n["dcfam_ns"]);
    CHECK_THROWS_AS(parse_variant("dcfam_plus"), Error);
}

TEST_CASE("dc and dcfam agree when the attention blocks are identity")
{
    SegmentationModel<float> dc(nano("dc"), 3), full(nano("dcfam"), 4);
    std::map<std::string, Tensor32> src;
    for (auto& p : dc.named_parameters()) src[p.name] = p.tensor;
    for (auto& p : full.named_parameters()) {
        auto it = src.find(p.name);
        auto dst = p.tensor.mutable_data();
        if (it != src.end()) {
            std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
        } else if (p.name.find(".proj.") != std::string::npos) {
            std::fill(dst.begin(), dst.end(), 0.0f);
        }
    }
    auto x = random_tensor<float>({2, 3, 64, 64}, 23);
    CHECK(max_abs_diff(dc.forward(x).data(), full.forward(x).data()) <= 1e-5);
}

TEST_CASE("segmentation head and model output")
{
    Rng rng(14);
    CHECK_THROWS_AS(SegmentationHead<float>(8, 1, 4, rng), Error);
    SegmentationModel<float> m(nano("dcfam", 3), 5);
    auto logits = m.forward(random_tensor<float>({2, 3, 48, 40}, 24));
    REQUIRE(logits.shape() == Shape{2, 3, 48, 40});
    auto sm = softmax_lastdim(permute(logits, {0, 2, 3, 1}));
    for (int64_t i = 0; i < sm.numel() / 3; ++i) {
        const double s = sm.data()[3 * i] + sm.data()[3 * i + 1] + sm.data()[3 * i + 2];
        CHECK(std::abs(s - 1.0) <= 1e-5);
    }
}

TEST_CASE("loss gradient reaches every parameter of every variant")
{
    for (auto v : {"baseline", "dc", "dcfam_ns", "dcfam"}) {
        SegmentationModel<float> m(nano(v, 4), 6);
        auto y = m.forward(random_tensor<float>({2, 3, 64, 64}, 25));
        sum(mul(y, random_tensor<float>(y.shape(), 26))).backward();
        for (const auto& np : m.named_parameters()) {
            bool nonzero = false;
            if (np.tensor.has_grad())
                for (float g : np.tensor.grad()) nonzero = nonzero || g != 0.0f;
            INFO(v << " " << np.name);
            CHECK(nonzero);
        }
    }
}

TEST_CASE("end-to-end gradcheck: 2-class 16x16 swin_nano, 50 sampled parameters")
{
    SegmentationModel<double> m(nano("dcfam", 2), 7);
    randomize(m, 0.2, 27);
    for (auto& p : m.named_parameters())
        if (p.name.find("bn") != std::string::npos || p.name.find("norm") != std::string::npos) {
            for (auto& v : p.tensor.mutable_data()) v = p.name.ends_with("weight") ? 1.0 + v : v;
        }
    auto x = random_tensor<double>({2, 3, 16, 16}, 28);
    GradcheckOptions opt;
    opt.step = 1e-3;
    opt.total_samples = 50;
    opt.seed = 29;
    auto report = gradcheck([&] { return projection_loss(m.forward(x), 30); }, m.parameters(), {}, opt);
    INFO(report.worst);
    CHECK(report.checked == 50);
    CHECK(report.max_rel_error <= 1e-3);
}
