#include <cmath>
#include <fstream>
#include <algorithm>
#include <filesystem>
#include <numeric>

#include "doctest.h"

#include "dcswin/data.hpp"

using namespace dcswin;
namespace fs = std::filesystem;

namespace {

// Ramp image and a label map that encodes each pixel's position.
Sample ramp_sample(int64_t H, int64_t W)
{
    Sample s;
    s.id = "ramp";
    s.image = Tensor32::zeros({3, H, W});
    auto d = s.image.mutable_data();
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < H * W; ++i) d[c * H * W + i] = float((i * 7 + c * 13) % 251) / 250.0f;
    s.label.resize(static_cast<std::size_t>(H * W));
    for (int64_t i = 0; i < H * W; ++i) s.label[i] = int32_t(i % 6);
    return s;
}

std::vector<int64_t> histogram(const std::vector<int32_t>& l, int K)
{
    std::vector<int64_t> h(static_cast<std::size_t>(K), 0);
    for (int32_t v : l) ++h[v];
    return h;
}

fs::path scratch_dir(const std::string& name)
{
    auto p = fs::temp_directory_path() / ("dcswin_test_" + name);
    fs::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("tile counts and ordering")
{
    TileSpec spec;
    CHECK(tile_origins(2048, 2048, spec).size() == 4);
    CHECK(tile_origins(1024, 1024, spec).size() == 1);
    const auto o = tile_origins(2048, 2048, spec);
    CHECK(o[1] == TileOrigin{0, 1024});
    CHECK(o[2] == TileOrigin{1024, 0});
    // 2500 px: 0, 1024, then end-aligned 1476
    const auto r = tile_origins(2500, 10, spec);
    REQUIRE(r.size() == 3);
    CHECK(r[2].y == 1476);
    CHECK_THROWS_AS(tile_origins(10, 10, TileSpec{0, 0}), Error);
    CHECK_THROWS_AS(tile_origins(10, 10, TileSpec{8, 9}), Error);
}

TEST_CASE("stitch(tile(x)) == x for label maps")
{
    for (auto [H, W, t, s] : {std::array<int64_t, 4>{64, 64, 32, 32}, {70, 45, 32, 32}, {50, 50, 16, 10}, {20, 12, 32, 32}}) {
        const auto sample = ramp_sample(H, W);
        std::vector<TileOrigin> origins;
        const auto tiles = tile_sample(sample, TileSpec{t, s}, &origins);
        std::vector<std::vector<int32_t>> labels;
        for (const auto& tile : tiles) {
            CHECK(tile.height() == t);
            labels.push_back(tile.label);
        }
        CHECK(stitch_labels(labels, origins, t, H, W) == sample.label);
    }
}

TEST_CASE("small images are reflect-padded, labels padded with ignore")
{
    const auto s = ramp_sample(5, 3);
    const auto t = crop_tile(s, {0, 0}, 8);
    CHECK(t.label[0 * 8 + 3] == kDefaultIgnoreLabel);
    CHECK(t.label[1 * 8 + 2] == s.label[1 * 3 + 2]);
    // column 3 mirrors column 1, row 5 mirrors row 3
    CHECK(t.image.data()[0 * 8 + 3] == s.image.data()[0 * 3 + 1]);
    CHECK(t.image.data()[5 * 8 + 0] == s.image.data()[3 * 3 + 0]);
    CHECK(reflect_index(-1, 4) == 1);
    CHECK(reflect_index(4, 4) == 2);
    CHECK(reflect_index(7, 4) == 1);
    CHECK(reflect_index(9, 1) == 0);
}

TEST_CASE("tiled per-pixel prediction commutes with direct application")
{
    // per-pixel map: logits_k = -(pixel - colour_k)^2 summed over channels
    const int K = 4;
    const auto s = synth_scene(3, 72, K);
    auto logits_of = [&](const Tensor32& img) {
        const int64_t H = img.dim(1), W = img.dim(2), plane = H * W;
        auto out = Tensor32::zeros({K, H, W});
        auto d = out.mutable_data();
        for (int k = 0; k < K; ++k) {
            const auto c = synth_class_color(k);
            for (int64_t p = 0; p < plane; ++p) {
                float acc = 0;
                for (int ch = 0; ch < 3; ++ch) acc -= (img.data()[ch * plane + p] - c[ch]) * (img.data()[ch * plane + p] - c[ch]);
                d[k * plane + p] = acc;
            }
        }
        return out;
    };
    const auto direct = logits_of(s.image);
    for (auto spec : {TileSpec{32, 32}, TileSpec{32, 20}, TileSpec{128, 128}}) {
        std::vector<TileOrigin> origins;
        const auto tiles = tile_sample(s, spec, &origins);
        Stitcher st(K, s.height(), s.width());
        for (std::size_t i = 0; i < tiles.size(); ++i) st.add(origins[i], logits_of(tiles[i].image));
        const auto stitched = st.logits();
        float worst = 0;
        for (std::size_t i = 0; i < direct.data().size(); ++i) worst = std::max(worst, std::abs(direct.data()[i] - stitched.data()[i]));
        CHECK(worst <= 1e-6f);
        CHECK(st.argmax() == argmax_labels(direct));
    }
    Stitcher partial(K, 10, 10);
    partial.add({0, 0}, Tensor32::zeros({K, 5, 5}));
    CHECK_THROWS_AS(partial.logits(), Error);
}

TEST_CASE("synthetic scenes: determinism, balance, validity")
{
    const auto a = synth_scene(11, 64, 6), b = synth_scene(11, 64, 6), c = synth_scene(12, 64, 6);
    CHECK(a.label == b.label);
    CHECK(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
    CHECK(a.label != c.label);

    const auto two = synth_scene(0, 64, 2);
    const auto h2 = histogram(two.label, 2);
    CHECK(h2[0] > 0);
    CHECK(h2[1] > 0);

    for (int K = 2; K <= 8; ++K) {
        for (uint64_t seed = 0; seed < 4; ++seed) {
            const auto s = synth_scene(seed, 48, K);
            validate_sample(s, K);
            for (int64_t n : histogram(s.label, K)) {
                CHECK(n >= 0.05 * 48 * 48);
                CHECK(n <= 0.60 * 48 * 48);
            }
        }
    }
    CHECK_THROWS_AS(synth_scene(0, 64, 1), Error);
    CHECK_THROWS_AS(synth_scene(0, 64, 9), Error);
    // datasets are call-order independent
    const auto ds = synth_dataset(20, 3, 32, 3);
    CHECK(ds[2].label == synth_scene(22, 32, 3).label);
}

TEST_CASE("nearest-colour classifier reaches 0.9 pixel accuracy")
{
    int64_t correct = 0, total = 0;
    for (int K : {2, 6, 8}) {
        for (uint64_t seed = 0; seed < 3; ++seed) {
            const auto s = synth_scene(100 + seed, 64, K);
            const int64_t plane = 64 * 64;
            for (int64_t p = 0; p < plane; ++p) {
                int best = 0;
                double best_d = 1e9;
                for (int k = 0; k < K; ++k) {
                    const auto c = synth_class_color(k);
                    double d = 0;
                    for (int ch = 0; ch < 3; ++ch) d += std::pow(s.image.data()[ch * plane + p] - c[ch], 2);
                    if (d < best_d) {
                        best_d = d;
                        best = k;
                    }
                }
                correct += best == s.label[p];
                ++total;
            }
        }
    }
    CHECK(double(correct) / double(total) >= 0.9);
}

TEST_CASE("dihedral transforms")
{
    const auto s = ramp_sample(5, 7);
    const int64_t H = 5, W = 7;
    for (int t = 0; t < 8; ++t) {
        const auto o = dihedral(s, t);
        CHECK(histogram(o.label, 6) == histogram(s.label, 6));
        CHECK(o.height() == (t % 2 ? W : H));
        // index-map oracle built from explicit corner images
        const int64_t OH = o.height(), OW = o.width();
        for (int64_t y = 0; y < OH; ++y)
            for (int64_t x = 0; x < OW; ++x) {
                int64_t sy = 0, sx = 0;
                const int64_t mx = t >= 4 ? OW - 1 - x : x;
                switch (t % 4) {
                case 0: sy = y, sx = mx; break;
                case 1: sy = mx, sx = W - 1 - y; break;
                case 2: sy = H - 1 - y, sx = W - 1 - mx; break;
                case 3: sy = H - 1 - mx, sx = y; break;
                }
                CHECK(o.label[y * OW + x] == s.label[sy * W + sx]);
                for (int c = 0; c < 3; ++c) CHECK(o.image.data()[(c * OH + y) * OW + x] == s.image.data()[(c * H + sy) * W + sx]);
            }
    }
    // mirror twice and four quarter turns are identities
    const auto ff = dihedral(dihedral(s, 4), 4);
    CHECK(ff.label == s.label);
    auto r = s;
    for (int i = 0; i < 4; ++i) r = dihedral(r, 1);
    CHECK(r.label == s.label);
    CHECK(std::equal(r.image.data().begin(), r.image.data().end(), s.image.data().begin()));
    CHECK_THROWS_AS(dihedral(s, 8), Error);
    CHECK(augment(s, 5).label == augment(s, 5).label);
}

TEST_CASE("netpbm and manifest round trip")
{
    const auto dir = scratch_dir("data");
    auto samples = synth_dataset(1, 2, 16, 3);
    save_dataset(dir, samples);
    const auto loaded = load_dataset(dir);
    REQUIRE(loaded.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(loaded[i].id == samples[i].id);
        CHECK(loaded[i].label == samples[i].label);
        for (std::size_t j = 0; j < samples[i].image.data().size(); ++j)
            CHECK(std::abs(loaded[i].image.data()[j] - samples[i].image.data()[j]) <= 0.5f / 255.0f + 1e-6f);
    }
    CHECK_THROWS_AS(load_dataset(dir / "missing"), Error);
    {
        std::ofstream bad(dir / "bad.ppm", std::ios::binary);
        bad << "P6\n4 4\n255\nxx";
    }
    CHECK_THROWS_AS(read_ppm(dir / "bad.ppm"), Error);
    fs::remove_all(dir);
}

TEST_CASE("normalization statistics and batching")
{
    const auto ds = synth_dataset(4, 3, 24, 4);
    const auto st = compute_norm_stats(ds);
    std::vector<const Sample*> batch{&ds[0], &ds[1], &ds[2]};
    const auto x = stack_images(batch, st);
    CHECK(x.shape() == Shape{3, 3, 24, 24});
    const int64_t plane = 24 * 24;
    for (int c = 0; c < 3; ++c) {
        double sum = 0, sq = 0;
        for (int b = 0; b < 3; ++b)
            for (int64_t p = 0; p < plane; ++p) {
                const double v = x.data()[(b * 3 + c) * plane + p];
                sum += v;
                sq += v * v;
            }
        const double n = 3.0 * plane;
        CHECK(std::abs(sum / n) <= 1e-4);
        CHECK(std::abs(sq / n - 1.0) <= 1e-3);
    }
    CHECK(stack_labels(batch).size() == std::size_t(3 * plane));
}
