#pragma once

// Row-major single-precision/double GEMM used by conv, matmul and linear.

#include <algorithm>
#include <memory>
#include <cstdint>
#include <vector>

#include "dcswin/parallel.hpp"
#include "dcswin/tensor.hpp"

namespace dcswin::internal {

/// Scratch vector whose size is reported to the memory watermarks.
template <typename T>
class Scratch {
public:
    explicit Scratch(std::size_t n) : buf_(n, T(0)) { memory::note_alloc(n * sizeof(T)); }
    ~Scratch() { memory::note_free(buf_.size() * sizeof(T)); }
    Scratch(const Scratch&) = delete;
    Scratch& operator=(const Scratch&) = delete;

    T* data() { return buf_.data(); }
    const T* data() const { return buf_.data(); }
    std::size_t size() const { return buf_.size(); }
    T& operator[](std::size_t i) { return buf_[i]; }

private:
    std::vector<T> buf_;
};

/// C[M,N] = beta*C + A[M,K] * B[K,N]; all row-major and densely packed.
template <typename T>
void gemm_nn(int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C, bool accumulate)
{
    constexpr int64_t kBlockK = 128;
    constexpr int64_t kBlockN = 512;
    parallel_for(M, 16, [&](int64_t m0, int64_t m1) {
        if (!accumulate) std::fill(C + m0 * N, C + m1 * N, T(0));
        for (int64_t n0 = 0; n0 < N; n0 += kBlockN) {
            const int64_t n1 = std::min(N, n0 + kBlockN);
            for (int64_t k0 = 0; k0 < K; k0 += kBlockK) {
                const int64_t k1 = std::min(K, k0 + kBlockK);
                for (int64_t i = m0; i < m1; ++i) {
                    T* __restrict c = C + i * N;
                    const T* a = A + i * K;
                    for (int64_t k = k0; k < k1; ++k) {
                        const T av = a[k];
                        const T* __restrict b = B + k * N;
                        for (int64_t j = n0; j < n1; ++j) c[j] += av * b[j];
                    }
                }
            }
        }
    });
}

template <typename T>
void transpose(int64_t rows, int64_t cols, const T* src, T* dst)
{
    constexpr int64_t kTile = 32;
    for (int64_t r0 = 0; r0 < rows; r0 += kTile) {
        for (int64_t c0 = 0; c0 < cols; c0 += kTile) {
            const int64_t r1 = std::min(rows, r0 + kTile);
            const int64_t c1 = std::min(cols, c0 + kTile);
            for (int64_t r = r0; r < r1; ++r) {
                for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
}

/// General form: op(A) is M×K, op(B) is K×N. Transposed operands are packed first.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t M, int64_t N, int64_t K, const T* A, const T* B, T* C,
          bool accumulate)
{
    const T* a = A;
    const T* b = B;
    std::unique_ptr<Scratch<T>> pa, pb;
    if (trans_a) {
        pa = std::make_unique<Scratch<T>>(static_cast<std::size_t>(M * K));
        transpose(K, M, A, pa->data());
        a = pa->data();
    }
    if (trans_b) {
        pb = std::make_unique<Scratch<T>>(static_cast<std::size_t>(K * N));
        transpose(N, K, B, pb->data());
        b = pb->data();
    }
    gemm_nn(M, N, K, a, b, C, accumulate);
}

}  // namespace dcswin::internal
