#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"

#include "dcswin/gradcheck.hpp"
#include "dcswin/trainer.hpp"
#include "test_util.hpp"

using namespace dcswin;
namespace fs = std::filesystem;

namespace {

// Plain per-pixel reference of the smoothed loss.
double reference_ce(const Tensor64& x, const std::vector<int32_t>& y, double eps, int32_t ignore)
{
    const int64_t B = x.dim(0), K = x.dim(1), P = x.dim(2) * x.dim(3);
    double total = 0;
    int64_t n = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < P; ++p) {
            if (y[b * P + p] == ignore) continue;
            double se = 0;
            for (int64_t k = 0; k < K; ++k) se += std::exp(x.data()[(b * K + k) * P + p]);
            for (int64_t k = 0; k < K; ++k) {
                const double q = (k == y[b * P + p] ? 1 - eps : 0) + eps / K;
                total -= q * std::log(std::exp(x.data()[(b * K + k) * P + p]) / se);
            }
            ++n;
        }
    return total / n;
}

RunConfig tiny_config()
{
    RunConfig cfg;
    cfg.model.num_classes = 3;
    cfg.model.embed_dim = 8;
    cfg.model.num_heads = {1, 1, 2, 2};
    cfg.model.window_size = 2;
    cfg.model.mlp_ratio = 2;
    cfg.train.steps = 3;
    cfg.train.batch = 2;
    cfg.train.eval_every = 2;
    cfg.data.tile = 32;
    cfg.data.synth_count = 3;
    cfg.data.synth_size = 32;
    return cfg;
}

}  // namespace

TEST_CASE("soft cross-entropy: uniform logits give log K for any smoothing")
{
    for (double eps : {0.0, 0.1, 0.3}) {
        const auto x = Tensor64::full({2, 5, 3, 3}, 0.7);
        std::vector<int32_t> y(18);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = int32_t(i % 5);
        CHECK(soft_cross_entropy(x, y, eps).item() == doctest::Approx(std::log(5.0)).epsilon(1e-14));
    }
}

TEST_CASE("soft cross-entropy: matches reference, confident limit, ignore handling")
{
    const auto x = testing::random_tensor<double>({2, 4, 3, 2}, 1, -3, 3);
    std::vector<int32_t> y{0, 1, 2, 3, 255, 1, 2, 2, 0, 255, 3, 1};
    for (double eps : {0.0, 0.1}) CHECK(soft_cross_entropy(x, y, eps).item() == doctest::Approx(reference_ce(x, y, eps, 255)).epsilon(1e-12));

    std::vector<double> confident(2 * 3, -40.0);
    confident[0 * 2 + 0] = 40.0;  // pixel 0 -> class 0
    confident[1 * 2 + 1] = 40.0;  // pixel 1 -> class 1
    const auto c = Tensor64::from({1, 3, 1, 2}, confident);
    CHECK(soft_cross_entropy(c, std::vector<int32_t>{0, 1}, 0.0).item() < 1e-30);

    CHECK_THROWS_AS(soft_cross_entropy(x, std::vector<int32_t>(12, 255), 0.1), Error);
    CHECK_THROWS_AS(soft_cross_entropy(x, std::vector<int32_t>(12, 4), 0.1), Error);
    CHECK_THROWS_AS(soft_cross_entropy(x, std::vector<int32_t>(11, 0), 0.1), ShapeError);
}

TEST_CASE("soft cross-entropy gradcheck")
{
    auto x = testing::random_tensor<double>({2, 3, 4, 4}, 2, -2, 2).set_requires_grad(true);
    std::vector<int32_t> y(32);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = i % 7 == 0 ? 255 : int32_t(i % 3);
    const auto r = gradcheck([&] { return soft_cross_entropy(x, y, 0.1); }, {x}, {"logits"}, {1e-4, 96});
    CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("AdamW with zero decay follows the scalar Adam recurrence")
{
    const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 0.5;
    auto theta = Tensor64::full({1}, 1.0);
    theta.set_requires_grad(true);
    AdamW<double> opt({{"theta", theta}}, {lr, 0.0, b1, b2, eps});
    double ref = 1.0, m = 0, v = 0;
    for (int t = 1; t <= 20; ++t) {
        theta.zero_grad();
        theta.mutable_grad()[0] = g;
        opt.step();
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
        CHECK(std::abs(theta.item() - ref) <= 1e-14);
    }
    // with a constant gradient every bias-corrected step is lr * g / (|g| + eps)
    CHECK(std::abs(theta.item() - (1.0 - 20 * lr * g / (g + eps))) <= 1e-12);
}

TEST_CASE("AdamW zero gradients: no-op without decay, exponential decay with it")
{
    auto a = Tensor64::from({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
    auto b = Tensor64::from({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
    AdamW<double> plain({{"a", a}}, {1e-2, 0.0});
    AdamW<double> decayed({{"b", b}}, {1e-2, 0.1});
    for (int t = 0; t < 50; ++t) {
        plain.step();
        decayed.step();
    }
    CHECK(a.data()[1] == -2.0);
    const double f = std::pow(1 - 1e-2 * 0.1, 50);
    CHECK(std::abs(b.data()[0] - f) <= 1e-14);
    CHECK(std::abs(b.data()[1] + 2 * f) <= 1e-14);
}

TEST_CASE("AdamW equals an independent Adam reference on a quadratic bowl")
{
    // f(x) = 0.5 * sum_i c_i (x_i - t_i)^2
    const std::vector<double> c{1.0, 4.0, 0.25, 9.0}, t{0.5, -1.0, 2.0, 0.0};
    auto x = Tensor64::zeros({4}).set_requires_grad(true);
    AdamW<double> opt({{"x", x}}, {0.05, 0.0, 0.9, 0.999, 1e-8});
    std::vector<double> ref(4, 0.0), m(4, 0.0), v(4, 0.0);
    for (int step = 1; step <= 100; ++step) {
        x.zero_grad();
        const auto diff = sub(x, Tensor64::from({4}, t));
        const auto loss = mul_scalar(sum(mul(mul(diff, diff), Tensor64::from({4}, c))), 0.5);
        loss.backward();
        opt.step();
        for (int i = 0; i < 4; ++i) {
            const double g = c[i] * (ref[i] - t[i]);
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            ref[i] -= 0.05 * (m[i] / (1 - std::pow(0.9, step))) / (std::sqrt(v[i] / (1 - std::pow(0.999, step))) + 1e-8);
        }
    }
    for (int i = 0; i < 4; ++i) CHECK(std::abs(x.data()[i] - ref[i]) <= 1e-10);
}

TEST_CASE("AdamW rejects non-finite gradients without touching parameters")
{
    auto a = Tensor64::from({2}, {1.0, 2.0}).set_requires_grad(true);
    auto b = Tensor64::from({1}, {3.0}).set_requires_grad(true);
    AdamW<double> opt({{"layer.a", a}, {"layer.b", b}}, {});
    a.zero_grad();
    a.mutable_grad()[0] = 1.0;
    b.zero_grad();
    b.mutable_grad()[0] = std::nan("");
    try {
        opt.step();
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("layer.b") != std::string::npos);
    }
    CHECK(a.data()[0] == 1.0);
    CHECK(opt.steps_taken() == 0);
}

TEST_CASE("checkpoint round trip, corruption and name mismatch")
{
    const auto dir = fs::temp_directory_path() / "dcswin_test_ckpt";
    fs::remove_all(dir);
    auto cfg = tiny_config();
    SegmentationModel<float> model(cfg.model, 5);
    Checkpoint ck{cfg.to_ini(), NormStats{{0.1f, 0.2f, 0.3f}, {1.5f, 2.5f, 3.5f}}, model_state(model)};
    save_checkpoint(dir / "m.ckpt", ck);

    const auto restored = restore_model(dir / "m.ckpt");
    CHECK(restored.config.to_ini() == cfg.to_ini());
    CHECK(restored.norm.std[2] == 3.5f);
    const auto a = model_state(model), b = model_state(*restored.model);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(std::equal(a[i].tensor.data().begin(), a[i].tensor.data().end(), b[i].tensor.data().begin()));
    }

    {  // flip one payload byte
        std::fstream f(dir / "m.ckpt", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(200);
        char ch = 0;
        f.seekg(200);
        f.get(ch);
        f.seekp(200);
        f.put(char(ch ^ 0x5a));
    }
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "m.ckpt"), doctest::Contains("CRC"), Error);

    auto renamed = model_state(model);
    renamed[0].name = "bogus.weight";
    try {
        load_model_state(model, renamed);
        FAIL("expected Error");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("bogus.weight") != std::string::npos);
        CHECK(msg.find(a[0].name) != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("train: zero steps keep the initialization; runs are deterministic")
{
    auto cfg = tiny_config();
    const auto tiles = load_training_tiles(cfg);
    CHECK(tiles.size() == 3);

    SegmentationModel<float> fresh(cfg.model, 7), idle(cfg.model, 7);
    auto zero = cfg.train;
    zero.steps = 0;
    CHECK(train(idle, tiles, zero).log.empty());
    const auto s0 = model_state(fresh), s1 = model_state(idle);
    for (std::size_t i = 0; i < s0.size(); ++i)
        CHECK(std::equal(s0[i].tensor.data().begin(), s0[i].tensor.data().end(), s1[i].tensor.data().begin()));

    std::string logs[2];
    for (auto& log : logs) {
        SegmentationModel<float> m(cfg.model, 7);
        log = format_log(train(m, tiles, cfg.train).log);
    }
    CHECK(logs[0] == logs[1]);
    CHECK(logs[0].rfind("step\tloss\toa\tmiou\tmean_f1\n1\t", 0) == 0);
    CHECK(logs[0].find("\tnan\tnan\tnan\n") != std::string::npos);  // step 1 is not evaluated
}

TEST_CASE("train: divergence surfaces as DivergenceError")
{
    auto cfg = tiny_config();
    cfg.train.lr = 1e3;
    cfg.train.steps = 30;
    const auto tiles = load_training_tiles(cfg);
    SegmentationModel<float> m(cfg.model, 1);
    CHECK_THROWS_AS(train(m, tiles, cfg.train), DivergenceError);
}

TEST_CASE("run config: defaults round trip, unknown keys, presets")
{
    RunConfig def;
    CHECK(RunConfig::parse(def.to_ini()).to_ini() == def.to_ini());
    const auto c = RunConfig::parse("model.preset = swin_s\nmodel.num_classes = 4 # comment\ntrain.lr = 1e-3\n");
    CHECK(c.model.embed_dim == 96);
    CHECK(c.model.depths[2] == 18);
    CHECK(c.model.num_classes == 4);
    CHECK(c.train.lr == 1e-3);
    CHECK_THROWS_WITH_AS(RunConfig::parse("train.learning_rate = 1\n"), doctest::Contains("train.learning_rate"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::parse("train.steps = ten\n"), doctest::Contains("train.steps"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("train.label_smoothing = 0.5\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("model.preset = swin_x\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("model.variant = fancy\n"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("data.tile\n"), ConfigError);
}

TEST_CASE("ablation table layout")
{
    std::vector<AblationRow> rows{{"Swin-nano", 0.5, 0.6, 0.4, 1}, {"Swin-nano+DC", 0.5, 0.6, 0.4, 1},
                                  {"Swin-nano+DCFAM-NS", 0.5, 0.6, 0.4, 1}, {"Swin-nano+DCFAM", 0.9071, 0.9163, 0.8322, 1}};
    const auto table = format_ablation(rows);
    CHECK(std::count(table.begin(), table.end(), '\n') == 5);
    CHECK(table.find("Mean F1") < table.find("OA"));
    CHECK(table.find("90.71") != std::string::npos);
}
