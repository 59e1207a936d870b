#pragma once

#include "ddet/tensor.hpp"
#include "ddet/threading.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

// Parallel kernels behind the differentiable ops. Every kernel assigns each
// output element to exactly one thread and keeps the per-element accumulation
// order fixed, so outputs are bit-identical for any thread count. Naive
// serial counterparts live in kernels_ref.hpp and are compared in tests and
// in the kernel benchmark.

namespace ddet::kernels {

struct ConvDims {
    int batch, cin, h, w;
    int cout, kh, kw;
    int stride, pad, groups;
    int ho, wo;
};

inline ConvDims conv_dims(const std::vector<int>& xs, const std::vector<int>& ws, int stride, int pad, int groups) {
    if (xs.size() != 4 || ws.size() != 4) throw std::invalid_argument("conv2d: tensors must be rank 4");
    ConvDims d;
    d.batch = xs[0];
    d.cin = xs[1];
    d.h = xs[2];
    d.w = xs[3];
    d.cout = ws[0];
    d.kh = ws[2];
    d.kw = ws[3];
    d.stride = stride;
    d.pad = pad;
    d.groups = groups;
    if (d.cin % groups != 0 || d.cout % groups != 0)
        throw std::invalid_argument("conv2d: groups must divide both channel counts");
    if (ws[1] != d.cin / groups)
        throw std::invalid_argument("conv2d: weight shape " + shape_str(ws) + " does not match input channels " +
                                    std::to_string(d.cin) + " with groups " + std::to_string(groups));
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.ho < 1 || d.wo < 1) throw std::invalid_argument("conv2d: output dims would be < 1");
    return d;
}

template <typename T>
void conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const T* bias, Tensor<T>& y, const ConvDims& d) {
    const int cin_g = d.cin / d.groups;
    const int cout_g = d.cout / d.groups;
    const T* xp = x.ptr();
    const T* wp = w.ptr();
    T* yp = y.ptr();
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int b = 0; b < d.batch; ++b) {
        for (int co = 0; co < d.cout; ++co) {
            const int g = co / cout_g;
            T* yrow0 = yp + (static_cast<size_t>(b) * d.cout + co) * d.ho * d.wo;
            const T bval = bias ? bias[co] : T(0);
            for (int oy = 0; oy < d.ho; ++oy) {
                T* yrow = yrow0 + static_cast<size_t>(oy) * d.wo;
                for (int ox = 0; ox < d.wo; ++ox) yrow[ox] = bval;
                for (int ci = 0; ci < cin_g; ++ci) {
                    const T* xc = xp + (static_cast<size_t>(b) * d.cin + g * cin_g + ci) * d.h * d.w;
                    const T* wc = wp + ((static_cast<size_t>(co) * cin_g + ci) * d.kh) * d.kw;
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        const T* xr = xc + static_cast<size_t>(iy) * d.w;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const T wv = wc[ky * d.kw + kx];
                            // valid ox range so that ix = ox*stride + kx - pad is in bounds
                            int lo = 0, hi = d.wo - 1;
                            if (d.stride == 1) {
                                lo = std::max(0, d.pad - kx);
                                hi = std::min(d.wo - 1, d.w - 1 + d.pad - kx);
                            }
                            for (int ox = lo; ox <= hi; ++ox) {
                                const int ix = ox * d.stride + kx - d.pad;
                                if (d.stride != 1 && (ix < 0 || ix >= d.w)) continue;
                                yrow[ox] += wv * xr[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_input(const Tensor<T>& dy, const Tensor<T>& w, Tensor<T>& dx, const ConvDims& d) {
    const int cin_g = d.cin / d.groups;
    const int cout_g = d.cout / d.groups;
    const T* gp = dy.ptr();
    const T* wp = w.ptr();
    T* dxp = dx.ptr();
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int b = 0; b < d.batch; ++b) {
        for (int ci = 0; ci < d.cin; ++ci) {
            const int g = ci / cin_g;
            const int ci_g = ci % cin_g;
            T* dxc = dxp + (static_cast<size_t>(b) * d.cin + ci) * d.h * d.w;
            for (int iy = 0; iy < d.h; ++iy) {
                T* dxr = dxc + static_cast<size_t>(iy) * d.w;
                for (int ix = 0; ix < d.w; ++ix) dxr[ix] = T(0);
                for (int co = g * cout_g; co < (g + 1) * cout_g; ++co) {
                    const T* gc = gp + (static_cast<size_t>(b) * d.cout + co) * d.ho * d.wo;
                    const T* wc = wp + ((static_cast<size_t>(co) * cin_g + ci_g) * d.kh) * d.kw;
                    for (int ky = 0; ky < d.kh; ++ky) {
                        const int num = iy + d.pad - ky;
                        if (num < 0 || num % d.stride != 0) continue;
                        const int oy = num / d.stride;
                        if (oy >= d.ho) continue;
                        const T* grow = gc + static_cast<size_t>(oy) * d.wo;
                        for (int kx = 0; kx < d.kw; ++kx) {
                            const T wv = wc[ky * d.kw + kx];
                            if (d.stride == 1) {
                                const int lo = std::max(0, kx - d.pad);
                                const int hi = std::min(d.w - 1, d.wo - 1 + kx - d.pad);
                                for (int ix = lo; ix <= hi; ++ix) dxr[ix] += wv * grow[ix + d.pad - kx];
                            } else {
                                for (int ix = 0; ix < d.w; ++ix) {
                                    const int nx = ix + d.pad - kx;
                                    if (nx < 0 || nx % d.stride != 0) continue;
                                    const int ox = nx / d.stride;
                                    if (ox >= d.wo) continue;
                                    dxr[ix] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_weight(const Tensor<T>& dy, const Tensor<T>& x, Tensor<T>& dw, T* dbias, const ConvDims& d) {
    const int cin_g = d.cin / d.groups;
    const int cout_g = d.cout / d.groups;
    const T* gp = dy.ptr();
    const T* xp = x.ptr();
    T* dwp = dw.ptr();
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int co = 0; co < d.cout; ++co) {
        for (int ci = 0; ci < cin_g; ++ci) {
            const int g = co / cout_g;
            for (int ky = 0; ky < d.kh; ++ky) {
                for (int kx = 0; kx < d.kw; ++kx) {
                    T acc = T(0);
                    for (int b = 0; b < d.batch; ++b) {
                        const T* gc = gp + (static_cast<size_t>(b) * d.cout + co) * d.ho * d.wo;
                        const T* xc = xp + (static_cast<size_t>(b) * d.cin + g * cin_g + ci) * d.h * d.w;
                        for (int oy = 0; oy < d.ho; ++oy) {
                            const int iy = oy * d.stride + ky - d.pad;
                            if (iy < 0 || iy >= d.h) continue;
                            const T* grow = gc + static_cast<size_t>(oy) * d.wo;
                            const T* xr = xc + static_cast<size_t>(iy) * d.w;
                            for (int ox = 0; ox < d.wo; ++ox) {
                                const int ix = ox * d.stride + kx - d.pad;
                                if (ix < 0 || ix >= d.w) continue;
                                acc += grow[ox] * xr[ix];
                            }
                        }
                    }
                    dwp[((static_cast<size_t>(co) * cin_g + ci) * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    }
    if (dbias) {
#pragma omp parallel for schedule(static) if (num_threads() > 1)
        for (int co = 0; co < d.cout; ++co) {
            T acc = T(0);
            for (int b = 0; b < d.batch; ++b) {
                const T* gc = gp + (static_cast<size_t>(b) * d.cout + co) * d.ho * d.wo;
                for (int i = 0; i < d.ho * d.wo; ++i) acc += gc[i];
            }
            dbias[co] = acc;
        }
    }
}

struct PoolDims {
    int batch, c, h, w, k, stride, pad, ho, wo;
};

inline PoolDims pool_dims(const std::vector<int>& xs, int k, int stride, int pad) {
    if (xs.size() != 4) throw std::invalid_argument("maxpool: tensor must be rank 4");
    if (k < 1) throw std::invalid_argument("maxpool: kernel must be >= 1");
    PoolDims d{xs[0], xs[1], xs[2], xs[3], k, stride, pad, 0, 0};
    d.ho = (d.h + 2 * pad - k) / stride + 1;
    d.wo = (d.w + 2 * pad - k) / stride + 1;
    if (d.ho < 1 || d.wo < 1) throw std::invalid_argument("maxpool: output dims would be < 1");
    return d;
}

// Padding is -inf: out-of-bounds positions never win the max. argmax records
// the flat spatial index iy*w+ix of the winner; first winner in (ky,kx) scan
// order on ties.
template <typename T>
void maxpool_forward(const Tensor<T>& x, Tensor<T>& y, std::vector<int32_t>& argmax, const PoolDims& d) {
    const T* xp = x.ptr();
    T* yp = y.ptr();
    argmax.assign(y.numel(), -1);
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int b = 0; b < d.batch; ++b) {
        for (int c = 0; c < d.c; ++c) {
            const T* xc = xp + (static_cast<size_t>(b) * d.c + c) * d.h * d.w;
            const size_t obase = (static_cast<size_t>(b) * d.c + c) * d.ho * d.wo;
            for (int oy = 0; oy < d.ho; ++oy) {
                for (int ox = 0; ox < d.wo; ++ox) {
                    T best = -std::numeric_limits<T>::infinity();
                    int32_t best_idx = -1;
                    for (int ky = 0; ky < d.k; ++ky) {
                        const int iy = oy * d.stride + ky - d.pad;
                        if (iy < 0 || iy >= d.h) continue;
                        for (int kx = 0; kx < d.k; ++kx) {
                            const int ix = ox * d.stride + kx - d.pad;
                            if (ix < 0 || ix >= d.w) continue;
                            const T v = xc[iy * d.w + ix];
                            if (v > best) {
                                best = v;
                                best_idx = iy * d.w + ix;
                            }
                        }
                    }
                    yp[obase + static_cast<size_t>(oy) * d.wo + ox] = best;
                    argmax[obase + static_cast<size_t>(oy) * d.wo + ox] = best_idx;
                }
            }
        }
    }
}

inline int ceil_div(int a, int b) { // b > 0
    return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}

template <typename T>
void maxpool_backward(const Tensor<T>& dy, const std::vector<int32_t>& argmax, Tensor<T>& dx, const PoolDims& d) {
    const T* gp = dy.ptr();
    T* dxp = dx.ptr();
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int b = 0; b < d.batch; ++b) {
        for (int c = 0; c < d.c; ++c) {
            const size_t obase = (static_cast<size_t>(b) * d.c + c) * d.ho * d.wo;
            T* dxc = dxp + (static_cast<size_t>(b) * d.c + c) * d.h * d.w;
            for (int iy = 0; iy < d.h; ++iy) {
                // windows covering iy: oy*s <= iy+pad <= oy*s + k-1
                const int oy_lo = std::max(0, ceil_div(iy + d.pad - d.k + 1, d.stride));
                const int oy_hi = std::min(d.ho - 1, (iy + d.pad) / d.stride);
                for (int ix = 0; ix < d.w; ++ix) {
                    const int ox_lo = std::max(0, ceil_div(ix + d.pad - d.k + 1, d.stride));
                    const int ox_hi = std::min(d.wo - 1, (ix + d.pad) / d.stride);
                    T acc = T(0);
                    const int32_t self = iy * d.w + ix;
                    for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                        for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                            const size_t oidx = obase + static_cast<size_t>(oy) * d.wo + ox;
                            if (argmax[oidx] == self) acc += gp[oidx];
                        }
                    }
                    dxc[iy * d.w + ix] = acc;
                }
            }
        }
    }
}

// Batched matmul: C[i] = op(A[i]) * op(B[i]) over `batch` independent
// matrices; op transposes when the flag is set. A is [batch, M, K] (or
// [batch, K, M] when trans_a), similarly for B.
template <typename T>
void matmul(const T* A, const T* B, T* C, int batch, int M, int N, int K, bool trans_a, bool trans_b) {
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int i = 0; i < batch; ++i) {
        for (int m = 0; m < M; ++m) {
            const T* Ai = A + static_cast<size_t>(i) * M * K;
            const T* Bi = B + static_cast<size_t>(i) * K * N;
            T* Ci = C + (static_cast<size_t>(i) * M + m) * N;
            for (int n = 0; n < N; ++n) Ci[n] = T(0);
            if (!trans_b) {
                for (int k = 0; k < K; ++k) {
                    const T a = trans_a ? Ai[static_cast<size_t>(k) * M + m] : Ai[static_cast<size_t>(m) * K + k];
                    const T* Brow = Bi + static_cast<size_t>(k) * N;
                    for (int n = 0; n < N; ++n) Ci[n] += a * Brow[n];
                }
            } else {
                for (int n = 0; n < N; ++n) {
                    const T* Brow = Bi + static_cast<size_t>(n) * K;
                    T acc = T(0);
                    for (int k = 0; k < K; ++k) {
                        const T a = trans_a ? Ai[static_cast<size_t>(k) * M + m] : Ai[static_cast<size_t>(m) * K + k];
                        acc += a * Brow[k];
                    }
                    Ci[n] = acc;
                }
            }
        }
    }
}

// Softmax over the last dimension; rows = numel / cols.
template <typename T>
void softmax_lastdim(const T* x, T* y, size_t rows, int cols) {
#pragma omp parallel for schedule(static) if (num_threads() > 1)
    for (long long r = 0; r < static_cast<long long>(rows); ++r) {
        const T* xr = x + static_cast<size_t>(r) * cols;
        T* yr = y + static_cast<size_t>(r) * cols;
        T mx = xr[0];
        for (int i = 1; i < cols; ++i) mx = std::max(mx, xr[i]);
        T s = T(0);
        for (int i = 0; i < cols; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            s += yr[i];
        }
        const T inv = T(1) / s;
        for (int i = 0; i < cols; ++i) yr[i] *= inv;
    }
}

template <typename T>
void softmax_lastdim_backward(const T* y, const T* dy, T* dx, size_t rows, int cols) {
#pragma omp parallel for schedule(static) if (num_threads() > 1)
    for (long long r = 0; r < static_cast<long long>(rows); ++r) {
        const T* yr = y + static_cast<size_t>(r) * cols;
        const T* gr = dy + static_cast<size_t>(r) * cols;
        T* dr = dx + static_cast<size_t>(r) * cols;
        T dot = T(0);
        for (int i = 0; i < cols; ++i) dot += gr[i] * yr[i];
        for (int i = 0; i < cols; ++i) dr[i] = yr[i] * (gr[i] - dot);
    }
}

} // namespace ddet::kernels
