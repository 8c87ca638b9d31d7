// Acceptance run: one PASS/FAIL line per criterion, exit status = failures.
// Arguments, if any, pick a subset of criteria by number.
//
// Criteria 1, 2 and 7 compare against brute-force references written here,
// in double, straight from the definitions. The remaining criteria reuse the
// library's property groups or run the real training loop.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dcswin/attention.hpp"
#include "dcswin/bench.hpp"
#include "dcswin/config.hpp"
#include "dcswin/data.hpp"
#include "dcswin/metrics.hpp"
#include "dcswin/trainer.hpp"
#include "dcswin/verify.hpp"

using namespace dcswin;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

int failures = 0;
std::set<int> selected;  // empty: all

bool wanted(int id) { return selected.empty() || selected.count(id) > 0; }

void criterion(int id, const std::string& name, const std::function<Outcome()>& body)
{
    if (!wanted(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("%s  criterion %2d  %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
}

void randomize(Module<float>& m, std::mt19937_64& rng, double scale)
{
    std::normal_distribution<double> n(0.0, scale);
    for (auto& p : m.named_parameters())
        for (auto& v : p.tensor.mutable_data()) v = static_cast<float>(n(rng));
}

Tensor32 random_map(Shape s, std::mt19937_64& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    auto t = Tensor32::zeros(std::move(s));
    for (auto& v : t.mutable_data()) v = static_cast<float>(n(rng));
    return t;
}

// ---- quadratic attention reference -----------------------------------------------

using Rows = std::vector<std::vector<double>>;

std::vector<double> unit(std::vector<double> r)
{
    double s = 0;
    for (double v : r) s += v * v;
    const double n = std::sqrt(s);
    if (n > 0)
        for (double& v : r) v /= n;
    return r;
}

/// w_ij = (1 + e + q_i.k_j) / sum_j (...), out_i = sum_j w_ij v_j, q and k
/// normalized here.
Rows attend(const Rows& q, const Rows& k, const Rows& v, Rows* weights = nullptr)
{
    const std::size_t n = q.size();
    Rows out(n, std::vector<double>(v[0].size(), 0.0));
    if (weights) weights->assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto qi = unit(q[i]);
        std::vector<double> w(n);
        double total = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const auto kj = unit(k[j]);
            double dot = 0;
            for (std::size_t d = 0; d < qi.size(); ++d) dot += qi[d] * kj[d];
            w[j] = 1.0 + kKernelSmoothing + dot;
            total += w[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            w[j] /= total;
            for (std::size_t d = 0; d < v[j].size(); ++d) out[i][d] += w[j] * v[j][d];
        }
        if (weights) (*weights)[i] = w;
    }
    return out;
}

/// 1x1 convolution of x [1, C, H, W] as per-position rows [N][out].
Rows pointwise(const Tensor32& x, const Tensor32& w, const Tensor32& b)
{
    const int64_t C = x.dim(1), N = x.dim(2) * x.dim(3), O = w.dim(0);
    Rows r(static_cast<std::size_t>(N), std::vector<double>(static_cast<std::size_t>(O), 0.0));
    for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < O; ++o) {
            double s = b.data()[o];
            for (int64_t c = 0; c < C; ++c) s += double(w.data()[o * C + c]) * x.data()[c * N + n];
            r[n][o] = s;
        }
    return r;
}

/// x + proj(a) with a given as per-position rows; returns [C * N] channel-major.
std::vector<double> residual_projection(const Tensor32& x, const Rows& a, const Conv2d<float>& proj)
{
    const int64_t C = x.dim(1), N = x.dim(2) * x.dim(3);
    std::vector<double> out(static_cast<std::size_t>(C * N));
    for (int64_t c = 0; c < C; ++c)
        for (int64_t n = 0; n < N; ++n) {
            double s = double(x.data()[c * N + n]) + proj.bias.data()[c];
            for (int64_t d = 0; d < C; ++d) s += double(proj.weight.data()[c * C + d]) * a[n][d];
            out[c * N + n] = s;
        }
    return out;
}

double max_diff(std::span<const float> got, const std::vector<double>& want)
{
    double m = 0;
    for (std::size_t i = 0; i < want.size(); ++i) m = std::max(m, std::abs(double(got[i]) - want[i]));
    return m;
}

Outcome attention_oracle()
{
    std::mt19937_64 rng(2024);
    double worst_ssa = 0, worst_sca = 0;
    for (int inst = 0; inst < 20; ++inst) {
        const int64_t C = 2 + int64_t(rng() % 15);
        const int64_t H = 1 + int64_t(rng() % 8), W = 1 + int64_t(rng() % 8);
        const int64_t N = H * W;
        const auto x = random_map({1, C, H, W}, rng);
        Rng init(rng());

        SpatialAttention<float> ssa(C, init);
        randomize(ssa, rng, 0.5);
        const auto q = pointwise(x, ssa.query->weight, ssa.query->bias);
        const auto k = pointwise(x, ssa.key->weight, ssa.key->bias);
        const auto v = pointwise(x, ssa.value->weight, ssa.value->bias);
        worst_ssa = std::max(worst_ssa, max_diff(ssa.forward(x).data(), residual_projection(x, attend(q, k, v), *ssa.proj)));

        ChannelAttention<float> sca(C, init);
        randomize(sca, rng, 0.5);
        Rows r(static_cast<std::size_t>(C), std::vector<double>(static_cast<std::size_t>(N)));
        for (int64_t c = 0; c < C; ++c)
            for (int64_t n = 0; n < N; ++n) r[c][n] = x.data()[c * N + n];
        const auto a = attend(r, r, r);  // [C][N]
        Rows a_pos(static_cast<std::size_t>(N), std::vector<double>(static_cast<std::size_t>(C)));
        for (int64_t c = 0; c < C; ++c)
            for (int64_t n = 0; n < N; ++n) a_pos[n][c] = a[c][n];
        worst_sca = std::max(worst_sca, max_diff(sca.forward(x).data(), residual_projection(x, a_pos, *sca.proj)));
    }
    return {std::max(worst_ssa, worst_sca) <= 1e-5,
            "20 instances each, max |diff| SSA " + fmt(worst_ssa) + ", SCA " + fmt(worst_sca) + " (limit 1e-5, float32)"};
}

Outcome attention_convexity()
{
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> level(-2.0, 2.0);
    double min_weight = 1, worst_sum = 0, worst_ref = 0, worst_const = 0;
    for (int t = 0; t < 100; ++t) {
        const int64_t N = 1 + int64_t(rng() % 64), D = 1 + int64_t(rng() % 8), Dv = 1 + int64_t(rng() % 6);
        const auto q = random_map({1, N, D}, rng), k = random_map({1, N, D}, rng), v = random_map({1, N, Dv}, rng);
        const auto ref = brute_force_linear_attention(l2_normalize_lastdim(q), l2_normalize_lastdim(k), v);

        Rows qr(static_cast<std::size_t>(N)), kr(qr.size()), vr(qr.size()), w;
        for (int64_t i = 0; i < N; ++i) {
            qr[i].assign(q.data().begin() + i * D, q.data().begin() + (i + 1) * D);
            kr[i].assign(k.data().begin() + i * D, k.data().begin() + (i + 1) * D);
            vr[i].assign(v.data().begin() + i * Dv, v.data().begin() + (i + 1) * Dv);
        }
        attend(qr, kr, vr, &w);
        for (int64_t i = 0; i < N; ++i) {
            double s = 0;
            for (int64_t j = 0; j < N; ++j) {
                const double got = ref.weights.data()[i * N + j];
                min_weight = std::min(min_weight, got);
                worst_ref = std::max(worst_ref, std::abs(got - w[i][j]));
                s += got;
            }
            worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        }

        std::vector<double> c(static_cast<std::size_t>(N * Dv));
        std::vector<float> cf(c.size());
        std::vector<double> col(static_cast<std::size_t>(Dv));
        for (auto& x : col) x = level(rng);
        for (int64_t i = 0; i < N; ++i)
            for (int64_t d = 0; d < Dv; ++d) cf[i * Dv + d] = float(col[d]), c[i * Dv + d] = double(float(col[d]));
        const auto out = linear_attention_core(q, k, Tensor32::from({1, N, Dv}, cf));
        worst_const = std::max(worst_const, max_diff(out.data(), c));
    }
    const bool pass = min_weight >= 0 && worst_sum <= 1e-6 && worst_const <= 1e-6 && worst_ref <= 1e-6;
    return {pass, "100 trials, min weight " + fmt(min_weight) + ", max |row sum - 1| " + fmt(worst_sum) +
                      ", weights vs reference " + fmt(worst_ref) + ", constant drift " + fmt(worst_const) +
                      " for constants in [-2, 2]"};
}

// ---- metrics reference -------------------------------------------------------------

Outcome metrics_oracle()
{
    std::mt19937_64 rng(7);
    int64_t count_mismatch = 0;
    double worst_ratio = 0, worst_identity = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int K = 2 + int(rng() % 6);
        const std::size_t n = 1 + rng() % 200;
        std::vector<int32_t> truth(n), pred(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = rng() % 10 == 0 ? kDefaultIgnoreLabel : int32_t(rng() % K);
            pred[i] = int32_t(rng() % K);
        }
        ConfusionMatrix cm(K, kDefaultIgnoreLabel);
        cm.accumulate(truth, pred);
        const auto iou = per_class_iou(cm);
        const auto f1 = f1_scores(cm);

        std::set<std::size_t> valid;
        for (std::size_t i = 0; i < n; ++i)
            if (truth[i] != kDefaultIgnoreLabel) valid.insert(i);
        int64_t correct = 0;
        for (auto i : valid) correct += truth[i] == pred[i];
        const double oa = valid.empty() ? 0.0 : double(correct) / double(valid.size());
        worst_ratio = std::max(worst_ratio, std::abs(overall_accuracy(cm) - oa));

        double iou_sum = 0, f1_sum = 0;
        int present = 0;
        for (int k = 0; k < K; ++k) {
            std::set<std::size_t> T, P, I, U;
            for (auto i : valid) {
                if (truth[i] == k) T.insert(i);
                if (pred[i] == k) P.insert(i);
            }
            std::set_intersection(T.begin(), T.end(), P.begin(), P.end(), std::inserter(I, I.end()));
            std::set_union(T.begin(), T.end(), P.begin(), P.end(), std::inserter(U, U.end()));
            const int64_t tp = int64_t(I.size()), fp = int64_t(P.size() - I.size()), fn = int64_t(T.size() - I.size());
            count_mismatch += (cm.tp(k) != tp) + (cm.fp(k) != fp) + (cm.fn(k) != fn);
            if (U.empty()) continue;
            const double j = double(I.size()) / double(U.size());
            const double f = 2.0 * double(I.size()) / double(T.size() + P.size());
            worst_ratio = std::max({worst_ratio, std::abs(iou[k] - j), std::abs(f1.f1[k] - f)});
            worst_identity = std::max(worst_identity, std::abs(f1.f1[k] - 2 * iou[k] / (1 + iou[k])));
            iou_sum += j;
            f1_sum += f;
            ++present;
        }
        if (present) {
            worst_ratio = std::max({worst_ratio, std::abs(mean_iou(cm) - iou_sum / present),
                                    std::abs(f1.mean_f1 - f1_sum / present)});
        }
    }
    const bool pass = count_mismatch == 0 && worst_ratio <= 1e-9 && worst_identity <= 1e-9;
    return {pass, "1000 label-map pairs, count mismatches " + std::to_string(count_mismatch) + ", max ratio error " +
                      fmt(worst_ratio) + ", max |F1 - 2 IoU/(1 + IoU)| " + fmt(worst_identity)};
}

// ---- training runs shared by criteria 6, 9 and 10 ---------------------------------------

RunConfig overfit_config(uint64_t seed)
{
    RunConfig c;
    c.model = ModelConfig::from_preset("swin_nano");
    c.model.variant = "dcfam";
    c.model.num_classes = 6;
    c.train.steps = 200;
    c.train.eval_every = 50;
    c.train.seed = seed;
    c.data.synth_count = 8;
    c.data.synth_size = 64;
    c.data.tile = 64;
    c.validate();
    return c;
}

struct Run {
    TrainResult result;
    std::string log;
    std::shared_ptr<SegmentationModel<float>> model;
    double seconds = 0;
};

Run train_once(const RunConfig& cfg, const std::vector<Sample>& tiles)
{
    const auto t0 = std::chrono::steady_clock::now();
    Run r;
    r.model = std::make_shared<SegmentationModel<float>>(cfg.model, cfg.train.seed);
    r.result = train(*r.model, tiles, cfg.train, cfg.data.ignore_label);
    r.log = format_log(r.result.log);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

double median_loss(const std::vector<LogRow>& log, int64_t from, int64_t to)
{
    std::vector<double> v;
    for (const auto& r : log)
        if (r.step >= from && r.step <= to) v.push_back(r.loss);
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Outcome from_check(const CheckResult& r) { return {r.pass, r.detail}; }

}  // namespace

int main(int argc, char** argv)
{
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    criterion(1, "linear-attention oracle equivalence", attention_oracle);
    criterion(2, "attention convexity and normalization", attention_convexity);
    criterion(3, "gradient checks", [] {
        const auto p = check_primitive_gradients();
        const auto l = check_layer_gradients();
        return Outcome{p.pass && l.pass, "primitives: " + p.detail + "; layers: " + l.detail};
    });
    criterion(4, "shape goldens", [] { return from_check(check_shape_goldens()); });
    criterion(5, "additivity and shared-parameter identities", [] { return from_check(check_decoder_identities()); });

    // Seeds 0-2, each trained twice: the first runs feed criterion 6, the
    // pairs feed the determinism half of criterion 10.
    std::map<uint64_t, Run> first, second;
    std::vector<Sample> tiles;
    std::string train_error;
    try {
        if (!wanted(6) && !wanted(10)) throw std::runtime_error("not selected");
        tiles = load_training_tiles(overfit_config(0));
        for (uint64_t s = 0; s < 3; ++s) {
            std::fprintf(stderr, "training seed %llu (two runs)\n", static_cast<unsigned long long>(s));
            first[s] = train_once(overfit_config(s), tiles);
            second[s] = train_once(overfit_config(s), tiles);
        }
    } catch (const std::exception& e) {
        train_error = e.what();
    }

    criterion(6, "overfit run", [&] {
        if (!train_error.empty()) return Outcome{false, "training failed: " + train_error};
        const double oa = first[0].result.log.back().oa;
        bool decreasing = true;
        std::string medians;
        for (uint64_t s = 0; s < 3; ++s) {
            const double early = median_loss(first[s].result.log, 0, 50);
            const double late = median_loss(first[s].result.log, 150, 200);
            decreasing = decreasing && late < early;
            medians += " seed " + std::to_string(s) + " " + fmt(early) + " -> " + fmt(late) + ";";
        }
        const double secs = first[0].seconds;
        return Outcome{oa >= 0.95 && decreasing && secs < 900.0,
                       "seed 0 train pixel accuracy " + fmt(oa) + " (need 0.95) in " + fmt(secs) +
                           " s (limit 900); median loss steps 0-50 -> 150-200:" + medians};
    });

    criterion(7, "metrics oracle", metrics_oracle);

    criterion(8, "attention scaling benchmark", [] {
        const std::vector<int64_t> sizes{1024, 4096, 16384, 65536};
        const auto r = bench_attention(sizes);
        bool memory_ok = r.linear_memory_ok;
        for (const auto& row : r.rows) {
            memory_ok = memory_ok && double(row.linear_largest_alloc) < double(row.n) * double(row.n) * sizeof(float);
        }
        const bool pass = r.linear_slope >= 0.8 && r.linear_slope <= 1.3 && r.quadratic_slope >= 1.7 &&
                          r.quadratic_slope <= 2.3 && memory_ok;
        return Outcome{pass, "slopes linear " + fmt(r.linear_slope) + " (0.8-1.3), quadratic " + fmt(r.quadratic_slope) +
                                 " (1.7-2.3), factorized path N^2 allocation: " + (memory_ok ? "none" : "FOUND")};
    });

    criterion(9, "ablation harness", [] {
        auto cfg = overfit_config(0);
        const auto rows = run_ablation(cfg, [](const std::string& m) { std::fprintf(stderr, "%s\n", m.c_str()); });
        std::fprintf(stderr, "%s", format_ablation(rows).c_str());
        bool pass = rows.size() == 4;
        std::string detail = std::to_string(rows.size()) + " rows; train pixel accuracy";
        for (const auto& r : rows) {
            pass = pass && r.oa >= 0.90;
            detail += " " + r.method + " " + fmt(r.oa);
        }
        return Outcome{pass, detail + " (need 0.90 each)"};
    });

    criterion(10, "checkpoint round trip and determinism", [&] {
        if (!train_error.empty()) return Outcome{false, "training failed: " + train_error};
        const auto path = std::filesystem::temp_directory_path() / "dcswin_acceptance.ckpt";
        const auto cfg = overfit_config(0);
        const auto& run = first[0];
        save_checkpoint(path, Checkpoint{cfg.to_ini(), run.result.norm, model_state(*run.model)});
        const auto loaded = restore_model(path);
        std::filesystem::remove(path);

        int64_t differing = 0;
        const auto a = model_state(*run.model), b = model_state(*loaded.model);
        for (std::size_t i = 0; i < a.size(); ++i)
            if (a[i].name != b[i].name || !std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(),
                                                      b[i].tensor.data().begin(), b[i].tensor.data().end())) {
                ++differing;
            }
        const auto m1 = evaluate(*run.model, tiles, run.result.norm);
        const auto m2 = evaluate(*loaded.model, tiles, loaded.norm);
        const double metric_diff = std::max({std::abs(overall_accuracy(m1) - overall_accuracy(m2)),
                                             std::abs(mean_iou(m1) - mean_iou(m2)),
                                             std::abs(f1_scores(m1).mean_f1 - f1_scores(m2).mean_f1)});
        int identical = 0;
        for (uint64_t s = 0; s < 3; ++s) identical += first[s].log == second[s].log;
        const bool pass = differing == 0 && metric_diff <= 1e-7 && identical == 3;
        return Outcome{pass, std::to_string(a.size()) + " tensors, " + std::to_string(differing) +
                                 " differ after reload; eval metric diff " + fmt(metric_diff) + "; " +
                                 std::to_string(identical) + "/3 seeds gave bit-identical logs"};
    });

    std::printf("%d of %zu criteria failed\n", failures, selected.empty() ? std::size_t(10) : selected.size());
    return failures;
}
