#pragma once

#include <cstdint>
#include <functional>

namespace dcswin {

/// Worker-thread cap. Initialized from DCSWIN_THREADS (default 1, which
/// keeps every run bit-reproducible).
int num_threads();
void set_num_threads(int n);

/// Splits [0, n) into contiguous chunks; runs inline when one thread is configured
/// or the range is smaller than `min_chunk`.
void parallel_for(int64_t n, int64_t min_chunk, const std::function<void(int64_t, int64_t)>& body);

}  // namespace dcswin
