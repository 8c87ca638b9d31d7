#include "dcswin/verify.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <sstream>

#include "dcswin/attention.hpp"
#include "dcswin/gradcheck.hpp"
#include "dcswin/trainer.hpp"

namespace dcswin {

namespace {

template <typename T>
Tensor<T> rand_tensor(const Shape& shape, uint64_t seed, double lo = -1.0, double hi = 1.0)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<T>(u(rng));
    return Tensor<T>::from(shape, std::move(v));
}

template <typename A, typename B>
double max_diff(const A& a, const B& b)
{
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
    return m;
}

std::string fmt(double v)
{
    std::ostringstream os;
    os.precision(3);
    os << v;
    return os.str();
}

void randomize(Module<double>& m, double std, uint64_t seed)
{
    Rng rng(seed);
    for (auto& p : m.parameters()) trunc_normal_(p, std, rng);
}

// Collects gradcheck errors across several sub-checks.
struct GradLedger {
    double worst = 0;
    std::string where;
    bool fault = false;

    void run(const std::string& name, const std::function<Tensor64()>& loss, std::vector<Tensor64> inputs,
             double step = 1e-4, int64_t samples = 40)
    {
        GradcheckOptions opt;
        opt.step = step;
        opt.max_elements = samples;
        auto r = gradcheck(loss, std::move(inputs), {}, opt);
        if (fault && where.empty()) r.max_rel_error += 1.0;
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            where = name + " " + r.worst;
        }
    }
};

template <typename F>
CheckResult timed(const std::string& name, F&& body)
{
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    r.name = name;
    try {
        body(r);
    } catch (const std::exception& e) {
        r.pass = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

Tensor32 to_tokens(const Tensor32& x, const Conv2d<float>& c)
{
    const auto y = conv2d(x, c.weight, c.bias);
    return permute(reshape(y, {y.dim(0), y.dim(1), y.dim(2) * y.dim(3)}), {0, 2, 1});
}

}  // namespace

CheckResult check_attention_oracle(int instances, bool fault)
{
    return timed("attention-oracle", [&](CheckResult& r) {
        std::mt19937_64 rng(2024);
        double worst = 0;
        for (int i = 0; i < instances; ++i) {
            const int64_t C = 2 + int64_t(rng() % 15), side = 1 + int64_t(rng() % 8);  // C <= 16, N <= 64
            const int64_t N = side * side;
            const auto x = rand_tensor<float>({1, C, side, side}, rng());
            Rng init(rng());
            SpatialAttention<float> ssa(C, init);
            for (auto& p : ssa.parameters()) trunc_normal_(p, 0.5, init);
            auto fast = linear_attention_spatial(x, ssa.projection());
            const auto ref = brute_force_linear_attention(l2_normalize_lastdim(to_tokens(x, *ssa.query)),
                                                          l2_normalize_lastdim(to_tokens(x, *ssa.key)), to_tokens(x, *ssa.value));
            auto fast_tokens = permute(reshape(fast, {1, C, N}), {0, 2, 1});
            if (fault && i == 0) fast_tokens.mutable_data()[0] += 1e-3f;
            worst = std::max(worst, max_diff(fast_tokens.data(), ref.output.data()));

            const auto rows = reshape(x, {1, C, N});
            const auto chan = brute_force_linear_attention(l2_normalize_lastdim(rows), l2_normalize_lastdim(rows), rows);
            worst = std::max(worst, max_diff(linear_attention_channel(x).data(), chan.output.data()));
        }
        r.pass = worst <= 1e-5;
        r.detail = std::to_string(instances) + " SSA/SCA instances, max |diff| " + fmt(worst) + " (limit 1e-5)";
    });
}

CheckResult check_attention_convexity(int trials, bool fault)
{
    return timed("attention-convexity", [&](CheckResult& r) {
        std::mt19937_64 rng(77);
        double worst_sum = 0, worst_const = 0, min_weight = 1;
        for (int t = 0; t < trials; ++t) {
            const int64_t N = 1 + int64_t(rng() % 48), D = 1 + int64_t(rng() % 8), Dv = 1 + int64_t(rng() % 6);
            const auto q = l2_normalize_lastdim(rand_tensor<double>({1, N, D}, rng()));
            const auto k = l2_normalize_lastdim(rand_tensor<double>({1, N, D}, rng()));
            auto ref = brute_force_linear_attention(q, k, rand_tensor<double>({1, N, Dv}, rng()));
            if (fault && t == 0) ref.weights.mutable_data()[0] += 1e-3;
            for (int64_t i = 0; i < N; ++i) {
                double s = 0;
                for (int64_t j = 0; j < N; ++j) {
                    const double w = ref.weights.data()[i * N + j];
                    min_weight = std::min(min_weight, w);
                    s += w;
                }
                worst_sum = std::max(worst_sum, std::abs(s - 1.0));
            }
            // constant values pass through the factorized core unchanged
            std::vector<float> cv(static_cast<std::size_t>(N * Dv));
            for (int64_t i = 0; i < N; ++i)
                for (int64_t d = 0; d < Dv; ++d) cv[i * Dv + d] = float(d) - 0.5f * float(t % 3);
            const auto out = linear_attention_core(rand_tensor<float>({1, N, D}, rng()), rand_tensor<float>({1, N, D}, rng()),
                                                   Tensor32::from({1, N, Dv}, cv));
            worst_const = std::max(worst_const, max_diff(out.data(), cv));
        }
        r.pass = min_weight >= 0 && worst_sum <= 1e-6 && worst_const <= 1e-6;
        r.detail = std::to_string(trials) + " trials, min weight " + fmt(min_weight) + ", max |row sum - 1| " +
                   fmt(worst_sum) + ", max constant drift " + fmt(worst_const);
    });
}

CheckResult check_primitive_gradients(bool fault)
{
    return timed("primitive-gradcheck", [&](CheckResult& r) {
        GradLedger g{0, "", fault};
        const auto x = rand_tensor<double>({2, 3, 6, 6}, 1), w = rand_tensor<double>({4, 3, 3, 3}, 2);
        const auto b = rand_tensor<double>({4}, 3);
        g.run("conv2d", [&] { return projection_loss(conv2d(x, w, b, {2, 1, 1}), 1); }, {x, w, b});
        g.run("conv2d-dilated", [&] { return projection_loss(conv2d(x, w, b, {1, 2, 2}), 2); }, {x, w, b});
        const auto xt = rand_tensor<double>({2, 3, 3, 3}, 4), wt = rand_tensor<double>({3, 2, 2, 2}, 5);
        const auto bt = rand_tensor<double>({2}, 6);
        g.run("transpose_conv2d", [&] { return projection_loss(transpose_conv2d(xt, wt, bt, 2, 0), 3); }, {xt, wt, bt});
        const auto xb = rand_tensor<double>({2, 3, 4, 4}, 7), gb = rand_tensor<double>({3}, 8, 0.5, 1.5);
        const auto bb = rand_tensor<double>({3}, 9);
        RunningStats<double> rs{Tensor64::zeros({3}), Tensor64::full({3}, 1.0)};
        g.run("batch_norm2d", [&] { return projection_loss(batch_norm2d(xb, gb, bb, rs, true), 4); }, {xb, gb, bb});
        const auto xl = rand_tensor<double>({2, 5, 8}, 10), gl = rand_tensor<double>({8}, 11), bl = rand_tensor<double>({8}, 12);
        g.run("layer_norm", [&] { return projection_loss(layer_norm(xl, gl, bl), 5); }, {xl, gl, bl});
        const auto xu = rand_tensor<double>({2, 2, 3, 4}, 13);
        g.run("bilinear_upsample", [&] { return projection_loss(bilinear_upsample(xu, 4), 6); }, {xu});
        const auto y = rand_tensor<double>({2, 8, 8}, 14, -3, 3);
        g.run("gelu", [&] { return projection_loss(gelu(y), 7); }, {y});
        g.run("softmax", [&] { return projection_loss(softmax_lastdim(y), 8); }, {y});
        g.run("l2_normalize", [&] { return projection_loss(l2_normalize_lastdim(y), 9); }, {y});
        const auto pos = rand_tensor<double>({2, 8, 8}, 15, 0.05, 1.0);
        g.run("relu", [&] { return projection_loss(relu(mul_scalar(pos, -1.0)), 10); }, {pos});
        g.run("relu+", [&] { return projection_loss(relu(pos), 11); }, {pos});
        const auto a = rand_tensor<double>({2, 3, 4}, 16), c = rand_tensor<double>({3, 1}, 17, 0.5, 2.0);
        g.run("add/mul/div", [&] { return projection_loss(div(mul(add(a, c), a), c), 12); }, {a, c});
        const auto m = rand_tensor<double>({2, 4, 5}, 18);
        g.run("matmul", [&] { return projection_loss(matmul(a, m), 13); }, {a, m});
        const auto wl = rand_tensor<double>({6, 4}, 19), bl2 = rand_tensor<double>({6}, 20);
        g.run("linear", [&] { return projection_loss(linear(a, wl, bl2), 14); }, {a, wl, bl2});
        g.run("reductions", [&] { return add(sum(sum_dim(a, 1, true)), mean(mul(a, a))); }, {a});
        g.run("layout", [&] { return projection_loss(slice(permute(reshape(a, {4, 6}), {1, 0}), 0, 1, 4), 15); }, {a});
        g.run("gather", [&] { return projection_loss(gather(a, {2, 3}, {5, -1, 5, 0, 23, 7}), 16); }, {a});
        r.pass = g.worst <= 1e-3;
        r.detail = "max relative error " + fmt(g.worst) + " at " + g.where;
    });
}

CheckResult check_layer_gradients(bool fault)
{
    return timed("layer-gradcheck", [&](CheckResult& r) {
        GradLedger g{0, "", fault};
        Rng rng(31);
        auto with_params = [](const Tensor64& x, const Module<double>& m) {
            std::vector<Tensor64> in{x};
            for (auto& p : m.parameters()) in.push_back(p);
            return in;
        };
        DownsampleConnection<double> down(4, 8, rng);
        randomize(down, 0.5, 1);
        const auto x = rand_tensor<double>({2, 4, 8, 8}, 2);
        g.run("downsample-connection", [&] { return projection_loss(down.forward(x), 1); }, with_params(x, down), 1e-5);
        LargeFieldUpsample<double> lu(8, 4, rng);
        randomize(lu, 0.3, 3);
        const auto z = rand_tensor<double>({2, 8, 2, 2}, 4);
        g.run("large-field-upsample", [&] { return projection_loss(lu.forward(z), 2); }, with_params(z, lu), 1e-5);
        SpatialAttention<double> ssa(8, rng);
        randomize(ssa, 0.3, 5);
        const auto a = rand_tensor<double>({2, 8, 4, 4}, 6);
        g.run("ssa", [&] { return projection_loss(ssa.forward(a), 3); }, with_params(a, ssa));
        ChannelAttention<double> sca(8, rng);
        randomize(sca, 0.3, 7);
        g.run("sca", [&] { return projection_loss(sca.forward(a), 4); }, with_params(a, sca));
        SwinBlock<double> b0(8, 2, 2, 2.0, false, rng), b1(8, 2, 2, 2.0, true, rng);
        randomize(b0, 0.3, 8);
        randomize(b1, 0.3, 9);
        for (auto* blk : {&b0, &b1})
            for (auto* n : {blk->norm1.get(), blk->norm2.get()})
                for (auto& v : n->gamma.mutable_data()) v += 1.0;
        const auto t = rand_tensor<double>({2, 16, 8}, 10);
        auto in = with_params(t, b0);
        for (auto& p : b1.parameters()) in.push_back(p);
        g.run("swin-block-pair", [&] { return projection_loss(b1.forward(b0.forward(t, 4, 4), 4, 4), 5); }, in);
        const auto logits = rand_tensor<double>({2, 3, 4, 4}, 11, -2, 2);
        std::vector<int32_t> labels(32);
        for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 7 == 0 ? kDefaultIgnoreLabel : int32_t(i % 3);
        g.run("soft-cross-entropy", [&] { return soft_cross_entropy(logits, labels, 0.1); }, {logits}, 1e-4, 96);
        r.pass = g.worst <= 1e-3;
        r.detail = "max relative error " + fmt(g.worst) + " at " + g.where;
    });
}

CheckResult check_shape_goldens(bool fault)
{
    return timed("shape-goldens", [&](CheckResult& r) {
        std::vector<std::string> problems;
        auto nano = ModelConfig::from_preset("swin_nano");
        SegmentationModel<float> m(nano, 0);
        auto p = m.features(rand_tensor<float>({1, 3, 64, 64}, 1));
        const std::array<Shape, 4> small{Shape{1, 32, 16, 16}, {1, 64, 8, 8}, {1, 128, 4, 4}, {1, 256, 2, 2}};
        for (int k = 0; k < 4; ++k) {
            Shape want = small[k];
            if (fault && k == 0) want[1] += 1;
            if (p.st[k].shape() != want || p.af[k].shape() != want) {
                problems.push_back("nano level " + std::to_string(k + 1) + " got " + to_string(p.st[k].shape()) + "/" +
                                   to_string(p.af[k].shape()));
            }
        }
        if (m.forward(rand_tensor<float>({1, 3, 64, 64}, 2)).shape() != Shape{1, 6, 64, 64}) problems.push_back("nano logits");
        double count = 0;
        {
            MetaGuard meta;
            SegmentationModel<float> big(ModelConfig::from_preset("swin_s"), 0);
            auto q = big.features(Tensor32::zeros({1, 3, 1024, 1024}));
            const std::array<Shape, 4> ladder{Shape{1, 96, 256, 256}, {1, 192, 128, 128}, {1, 384, 64, 64}, {1, 768, 32, 32}};
            for (int k = 0; k < 4; ++k)
                if (q.st[k].shape() != ladder[k] || q.af[k].shape() != ladder[k]) {
                    problems.push_back("swin_s level " + std::to_string(k + 1));
                }
            count = double(big.encoder->parameter_count());
        }
        if (std::abs(count - 50e6) > 5e6) problems.push_back("swin_s encoder has " + std::to_string(int64_t(count)) + " parameters");
        r.pass = problems.empty();
        r.detail = "swin_s encoder parameters " + std::to_string(int64_t(count));
        for (const auto& s : problems) r.detail += "; " + s;
    });
}

CheckResult check_decoder_identities(bool fault)
{
    return timed("decoder-identities", [&](CheckResult& r) {
        std::vector<std::string> problems;
        auto cfg = ModelConfig::from_preset("swin_nano");
        SegmentationModel<float> m(cfg, 1);
        for (auto& p : m.decoder->down5_b->named_parameters()) {
            if (p.name.find("conv") != std::string::npos || p.name.find(".bias") != std::string::npos)
                std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), 0.0f);
        }
        auto f = m.features(rand_tensor<float>({2, 3, 64, 64}, 3));
        if (fault) f.af[3].mutable_data()[0] += 1e-4f;
        const double add_err = max_diff(f.af[3].data(), f.st[3].data());
        if (add_err != 0.0) problems.push_back("AF4 != ST4 with the downsample branch zeroed (" + fmt(add_err) + ")");

        SegmentationModel<float> shared(cfg, 0);
        auto ns_cfg = cfg;
        ns_cfg.variant = "dcfam_ns";
        SegmentationModel<float> unshared(ns_cfg, 0);
        auto& d = *shared.decoder;
        if (d.ssa5 != d.ssa6 || d.sca6 != d.sca7) problems.push_back("dcfam attention sites are not shared");
        d.ssa5->query->weight.mutable_data()[0] = 42.0f;
        if (d.ssa6->query->weight.data()[0] != 42.0f) problems.push_back("write to SSA5 not visible in SSA6");
        auto& u = *unshared.decoder;
        const auto a = u.ssa5->parameters(), b = u.ssa6->parameters(), c = u.sca6->parameters(), e = u.sca7->parameters();
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].same_storage(b[i])) problems.push_back("dcfam_ns SSA sites share storage");
        for (std::size_t i = 0; i < c.size(); ++i)
            if (c[i].same_storage(e[i])) problems.push_back("dcfam_ns SCA sites share storage");
        const int64_t attn = u.ssa5->parameter_count() + u.sca6->parameter_count();
        if (unshared.parameter_count() - shared.parameter_count() != attn) {
            problems.push_back("unshared model should carry exactly one extra SSA and SCA");
        }
        r.pass = problems.empty();
        r.detail = "additivity max |AF4 - ST4| " + fmt(add_err) + ", extra unshared parameters " + std::to_string(attn);
        for (const auto& s : problems) r.detail += "; " + s;
    });
}

CheckResult check_metrics_oracle(int trials, bool fault)
{
    return timed("metrics-oracle", [&](CheckResult& r) {
        std::mt19937_64 rng(5);
        int64_t count_mismatch = 0;
        double worst = 0;
        for (int t = 0; t < trials; ++t) {
            const int K = 2 + int(rng() % 6);
            const std::size_t n = 1 + rng() % 64;
            std::vector<int32_t> truth(n), pred(n);
            for (std::size_t i = 0; i < n; ++i) {
                truth[i] = int32_t(rng() % K);
                pred[i] = rng() % 3 == 0 ? truth[i] : int32_t(rng() % K);
            }
            ConfusionMatrix cm(K);
            cm.accumulate(truth, pred);
            const auto iou = per_class_iou(cm);
            const auto f1 = f1_scores(cm);
            std::size_t correct = 0;
            for (std::size_t i = 0; i < n; ++i) correct += truth[i] == pred[i];
            double ref_oa = double(correct) / double(n);
            if (fault && t == 0) ref_oa += 1e-6;
            worst = std::max(worst, std::abs(overall_accuracy(cm) - ref_oa));
            double miou = 0, mf1 = 0;
            int present = 0;
            for (int k = 0; k < K; ++k) {
                std::set<std::size_t> ts, ps, inter, uni;
                for (std::size_t i = 0; i < n; ++i) {
                    if (truth[i] == k) ts.insert(i);
                    if (pred[i] == k) ps.insert(i);
                }
                for (auto i : ts) (ps.count(i) ? inter : uni).insert(i);
                uni.insert(ts.begin(), ts.end());
                uni.insert(ps.begin(), ps.end());
                count_mismatch += cm.tp(k) != int64_t(inter.size());
                count_mismatch += cm.tp(k) + cm.fp(k) != int64_t(ps.size());
                count_mismatch += cm.tp(k) + cm.fn(k) != int64_t(ts.size());
                if (uni.empty()) continue;
                ++present;
                const double ri = double(inter.size()) / double(uni.size());
                const double rf = 2.0 * double(inter.size()) / double(ts.size() + ps.size());
                worst = std::max({worst, std::abs(iou[k] - ri), std::abs(f1.f1[k] - rf),
                                  std::abs(f1.f1[k] - 2 * iou[k] / (1 + iou[k]))});
                miou += ri;
                mf1 += rf;
            }
            worst = std::max({worst, std::abs(mean_iou(cm) - miou / present), std::abs(f1.mean_f1 - mf1 / present)});
        }
        r.pass = count_mismatch == 0 && worst <= 1e-9;
        r.detail = std::to_string(trials) + " label-map pairs, count mismatches " + std::to_string(count_mismatch) +
                   ", max ratio error " + fmt(worst);
    });
}

CheckResult check_checkpoint_roundtrip(bool fault)
{
    return timed("checkpoint-roundtrip", [&](CheckResult& r) {
        RunConfig cfg;
        cfg.model.embed_dim = 8;
        cfg.model.num_heads = {1, 1, 2, 2};
        cfg.model.num_classes = 3;
        SegmentationModel<float> model(cfg.model, 3);
        for (auto& nt : model.named_buffers())
            for (auto& v : nt.tensor.mutable_data()) v += 0.25f;
        const auto path = std::filesystem::temp_directory_path() /
                          ("dcswin_verify_" + std::to_string(std::random_device{}()) + ".ckpt");
        save_checkpoint(path, {cfg.to_ini(), NormStats{}, model_state(model)});
        auto restored = restore_model(path);
        std::filesystem::remove(path);
        const auto a = model_state(model), b = model_state(*restored.model);
        if (fault) b[0].tensor.node()->data[0] += 1.0f;
        std::size_t differing = a.size() == b.size() ? 0 : 1;
        for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
            if (a[i].name != b[i].name ||
                !std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin(), b[i].tensor.data().end()))
                ++differing;
        }
        r.pass = differing == 0 && restored.config.to_ini() == cfg.to_ini();
        r.detail = std::to_string(a.size()) + " tensors, " + std::to_string(differing) + " differ after reload";
    });
}

CheckResult check_tiling_identity(bool fault)
{
    return timed("tiling-identity", [&](CheckResult& r) {
        int failures = 0;
        for (auto [size, t, s] : {std::array<int64_t, 3>{64, 32, 32}, {70, 32, 32}, {50, 16, 10}}) {
            const auto cut = synth_scene(uint64_t(size), size, 4);
            std::vector<TileOrigin> origins;
            const auto tiles = tile_sample(cut, TileSpec{t, s}, &origins);
            std::vector<std::vector<int32_t>> labels;
            for (const auto& tile : tiles) labels.push_back(tile.label);
            if (fault && failures == 0) labels[0][0] ^= 1;
            failures += stitch_labels(labels, origins, t, size, size) != cut.label;
        }
        r.pass = failures == 0;
        r.detail = std::to_string(failures) + " of 3 tile/stitch layouts failed to reproduce the label map";
    });
}

std::vector<CheckGroup> verify_groups()
{
    return {
        {"primitive-gradcheck", [](bool f) { return check_primitive_gradients(f); }},
        {"layer-gradcheck", [](bool f) { return check_layer_gradients(f); }},
        {"attention-oracle", [](bool f) { return check_attention_oracle(20, f); }},
        {"attention-convexity", [](bool f) { return check_attention_convexity(100, f); }},
        {"shape-goldens", [](bool f) { return check_shape_goldens(f); }},
        {"decoder-identities", [](bool f) { return check_decoder_identities(f); }},
        {"metrics-oracle", [](bool f) { return check_metrics_oracle(1000, f); }},
        {"checkpoint-roundtrip", [](bool f) { return check_checkpoint_roundtrip(f); }},
        {"tiling-identity", [](bool f) { return check_tiling_identity(f); }},
    };
}

std::vector<CheckResult> run_verify(std::optional<uint64_t> fault_seed, const std::function<void(const CheckResult&)>& on_result)
{
    const auto groups = verify_groups();
    const std::size_t faulty = fault_seed ? std::size_t(*fault_seed % groups.size()) : groups.size();
    std::vector<CheckResult> out;
    for (std::size_t i = 0; i < groups.size(); ++i) {
        out.push_back(groups[i].run(i == faulty));
        if (on_result) on_result(out.back());
    }
    return out;
}

}  // namespace dcswin
