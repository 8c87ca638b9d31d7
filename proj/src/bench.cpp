#include "dcswin/bench.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "dcswin/attention.hpp"

namespace dcswin {

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2) return std::numeric_limits<double>::quiet_NaN();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= double(x.size());
    my /= double(x.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

namespace {

Tensor32 uniform(const Shape& shape, std::mt19937_64& rng)
{
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::vector<float> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = u(rng);
    return Tensor32::from(shape, std::move(v));
}

template <typename F>
double best_time(int repeats, F&& f)
{
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return best;
}

}  // namespace

BenchResult bench_attention(const std::vector<int64_t>& sizes, bool force, int64_t channels, int repeats, uint64_t seed)
{
    NoGradGuard no_grad;
    std::mt19937_64 rng(seed);
    const int64_t dk = spatial_key_dim(channels);
    BenchResult out;
    std::vector<double> ln, lt, qn, qt;
    for (int64_t n : sizes) {
        if (n < 1) throw Error("bench sizes must be positive");
        const auto q = uniform({1, n, dk}, rng), k = uniform({1, n, dk}, rng), v = uniform({1, n, channels}, rng);
        BenchRow row;
        row.n = n;
        memory::reset_watermarks();
        row.t_linear = best_time(repeats, [&] { (void)linear_attention_core(q, k, v); });
        row.linear_largest_alloc = memory::stats().largest_allocation;
        if (double(row.linear_largest_alloc) >= double(n) * double(n) * sizeof(float)) out.linear_memory_ok = false;
        ln.push_back(double(n));
        lt.push_back(row.t_linear);
        if (n <= kBruteForceLimit || force) {
            const auto qh = l2_normalize_lastdim(q), kh = l2_normalize_lastdim(k);
            row.t_quadratic = best_time(n <= kBruteForceLimit ? repeats : 1,
                                        [&] { (void)brute_force_linear_attention(qh, kh, v, force); });
            qn.push_back(double(n));
            qt.push_back(row.t_quadratic);
        }
        out.rows.push_back(row);
    }
    out.linear_slope = loglog_slope(ln, lt);
    out.quadratic_slope = loglog_slope(qn, qt);
    return out;
}

std::string format_bench(const BenchResult& r)
{
    std::string s = "n\tt_linear\tt_quadratic\n";
    char buf[128];
    for (const auto& row : r.rows) {
        if (std::isnan(row.t_quadratic)) {
            std::snprintf(buf, sizeof buf, "%lld\t%.6e\tnan\n", static_cast<long long>(row.n), row.t_linear);
        } else {
            std::snprintf(buf, sizeof buf, "%lld\t%.6e\t%.6e\n", static_cast<long long>(row.n), row.t_linear, row.t_quadratic);
        }
        s += buf;
    }
    std::snprintf(buf, sizeof buf, "# slope_linear\t%.3f\n# slope_quadratic\t%.3f\n", r.linear_slope, r.quadratic_slope);
    return s + buf;
}

}  // namespace dcswin
