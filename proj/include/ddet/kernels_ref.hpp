#pragma once

#include "ddet/kernels.hpp"

#include <limits>

// Naive single-threaded reference kernels. These are deliberately the
// textbook quadruple loops with bounds checks in the innermost body; the
// kernel tests compare the parallel kernels against them, and the `bench`
// CLI reports the speed of both.

namespace ddet::ref {

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, Tensor<T>& y, const kernels::ConvDims& d) {
    const int cin_g = d.cin / d.groups;
    const int cout_g = d.cout / d.groups;
    for (int b = 0; b < d.batch; ++b)
        for (int co = 0; co < d.cout; ++co)
            for (int oy = 0; oy < d.ho; ++oy)
                for (int ox = 0; ox < d.wo; ++ox) {
                    T acc = bias ? bias[co] : T(0);
                    const int g = co / cout_g;
                    for (int ci = 0; ci < cin_g; ++ci)
                        for (int ky = 0; ky < d.kh; ++ky)
                            for (int kx = 0; kx < d.kw; ++kx) {
                                const int iy = oy * d.stride + ky - d.pad;
                                const int ix = ox * d.stride + kx - d.pad;
                                if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                                acc += w.data[((static_cast<size_t>(co) * cin_g + ci) * d.kh + ky) * d.kw + kx] *
                                       x.at4(b, g * cin_g + ci, iy, ix);
                            }
                    y.at4(b, co, oy, ox) = acc;
                }
}

template <typename T>
void maxpool_forward(const Tensor<T>& x, Tensor<T>& y, const kernels::PoolDims& d) {
    for (int b = 0; b < d.batch; ++b)
        for (int c = 0; c < d.c; ++c)
            for (int oy = 0; oy < d.ho; ++oy)
                for (int ox = 0; ox < d.wo; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    for (int ky = 0; ky < d.k; ++ky)
                        for (int kx = 0; kx < d.k; ++kx) {
                            const int iy = oy * d.stride + ky - d.pad;
                            const int ix = ox * d.stride + kx - d.pad;
                            if (iy < 0 || iy >= d.h || ix < 0 || ix >= d.w) continue;
                            best = std::max(best, x.at4(b, c, iy, ix));
                        }
                    y.at4(b, c, oy, ox) = best;
                }
}

template <typename T>
void matmul(const T* A, const T* B, T* C, int batch, int M, int N, int K, bool trans_a, bool trans_b) {
    for (int i = 0; i < batch; ++i)
        for (int m = 0; m < M; ++m)
            for (int n = 0; n < N; ++n) {
                T acc = T(0);
                for (int k = 0; k < K; ++k) {
                    const T a = trans_a ? A[(static_cast<size_t>(i) * K + k) * M + m]
                                        : A[(static_cast<size_t>(i) * M + m) * K + k];
                    const T b = trans_b ? B[(static_cast<size_t>(i) * N + n) * K + k]
                                        : B[(static_cast<size_t>(i) * K + k) * N + n];
                    acc += a * b;
                }
                C[(static_cast<size_t>(i) * M + m) * N + n] = acc;
            }
}

} // namespace ddet::ref
