#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace dcswin {

struct BenchRow {
    int64_t n = 0;
    double t_linear = 0;                                           // seconds, best of repeats
    double t_quadratic = std::numeric_limits<double>::quiet_NaN();  // NaN when skipped
    std::size_t linear_largest_alloc = 0;                          // bytes
};

struct BenchResult {
    std::vector<BenchRow> rows;
    double linear_slope = std::numeric_limits<double>::quiet_NaN();
    double quadratic_slope = std::numeric_limits<double>::quiet_NaN();
    /// True when no single allocation on the factorized path reached N^2 floats.
    bool linear_memory_ok = true;
};

/// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Times the factorized spatial core against the quadratic oracle on random
/// [1, N, Dk] queries/keys and [1, N, channels] values. The oracle runs only
/// for N <= 4096 unless force is set.
BenchResult bench_attention(const std::vector<int64_t>& sizes, bool force = false, int64_t channels = 64, int repeats = 3,
                            uint64_t seed = 0);

/// "n\tt_linear\tt_quadratic" rows, then `# slope_linear` / `# slope_quadratic` lines.
std::string format_bench(const BenchResult& r);

}  // namespace dcswin
