#pragma once

#include "ddet/autodiff.hpp"
#include "ddet/kernels.hpp"

#include <cmath>
#include <cstdint>
#include <utility>

// Differentiable tensor ops. Forward calls the parallel kernels; each op's
// backprop accumulates into its inputs' grads with the same deterministic
// ordering guarantees as the kernels.

namespace ddet::ops {

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int stride, int pad, int groups = 1) {
    const auto d = kernels::conv_dims(x->value.shape, w->value.shape, stride, pad, groups);
    if (bias && bias->value.numel() != static_cast<size_t>(d.cout))
        throw std::invalid_argument("conv2d: bias size mismatch");
    Tensor<T> y({d.batch, d.cout, d.ho, d.wo});
    kernels::conv2d_forward(x->value, w->value, bias ? bias->value.ptr() : nullptr, y, d);
    std::vector<Var<T>> ins = bias ? std::vector<Var<T>>{x, w, bias} : std::vector<Var<T>>{x, w};
    return make_op<T>(std::move(y), std::move(ins), [x, w, bias, d](Node<T>& n) {
        if (x->needs_grad) {
            Tensor<T> dx(x->value.shape);
            kernels::conv2d_backward_input(n.grad, w->value, dx, d);
            auto& g = x->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += dx[i];
        }
        if (w->needs_grad) {
            Tensor<T> dw(w->value.shape);
            Tensor<T> db;
            if (bias && bias->needs_grad) db = Tensor<T>(bias->value.shape);
            kernels::conv2d_backward_weight(n.grad, x->value, dw, db.data.empty() ? nullptr : db.ptr(), d);
            auto& g = w->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += dw[i];
            if (bias && bias->needs_grad) {
                auto& gb = bias->ensure_grad();
                for (size_t i = 0; i < gb.numel(); ++i) gb[i] += db[i];
            }
        }
    });
}

template <typename T>
Var<T> maxpool(const Var<T>& x, int k, int stride, int pad) {
    const auto d = kernels::pool_dims(x->value.shape, k, stride, pad);
    Tensor<T> y({d.batch, d.c, d.ho, d.wo});
    auto argmax = std::make_shared<std::vector<int32_t>>();
    kernels::maxpool_forward(x->value, y, *argmax, d);
    return make_op<T>(std::move(y), {x}, [x, argmax, d](Node<T>& n) {
        Tensor<T> dx(x->value.shape);
        kernels::maxpool_backward(n.grad, *argmax, dx, d);
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += dx[i];
    });
}

template <typename T>
Var<T> silu(const Var<T>& x) {
    Tensor<T> y(x->value.shape);
    const size_t n = y.numel();
#pragma omp parallel for schedule(static) if (num_threads() > 1)
    for (long long i = 0; i < static_cast<long long>(n); ++i) {
        const T v = x->value[i];
        y[i] = v / (T(1) + std::exp(-v));
    }
    return make_op<T>(std::move(y), {x}, [x](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) {
            const T v = x->value[i];
            const T s = T(1) / (T(1) + std::exp(-v));
            g[i] += nd.grad[i] * (s + v * s * (T(1) - s));
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> y(x->value.shape);
    const size_t n = y.numel();
#pragma omp parallel for schedule(static) if (num_threads() > 1)
    for (long long i = 0; i < static_cast<long long>(n); ++i) y[i] = T(1) / (T(1) + std::exp(-x->value[i]));
    auto yv = std::make_shared<Tensor<T>>(y);
    return make_op<T>(std::move(y), {x}, [x, yv](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) {
            const T s = (*yv)[i];
            g[i] += nd.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> y(a->value.shape);
    for (size_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] + b->value[i];
    return make_op<T>(std::move(y), {a, b}, [a, b](Node<T>& nd) {
        if (a->needs_grad) {
            auto& g = a->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
        if (b->needs_grad) {
            auto& g = b->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
    });
}

template <typename T>
Var<T> mul_const(const Var<T>& x, T c) {
    Tensor<T> y(x->value.shape);
    for (size_t i = 0; i < y.numel(); ++i) y[i] = x->value[i] * c;
    return make_op<T>(std::move(y), {x}, [x, c](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * c;
    });
}

// out = s * x where s is a learnable 1-element tensor (ACmix alpha/beta).
template <typename T>
Var<T> scale_by_scalar(const Var<T>& x, const Var<T>& s) {
    if (s->value.numel() != 1) throw std::invalid_argument("scale_by_scalar: scalar must have 1 element");
    Tensor<T> y(x->value.shape);
    const T sv = s->value[0];
    for (size_t i = 0; i < y.numel(); ++i) y[i] = x->value[i] * sv;
    return make_op<T>(std::move(y), {x, s}, [x, s](Node<T>& nd) {
        const T sv = s->value[0];
        if (x->needs_grad) {
            auto& g = x->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i] * sv;
        }
        if (s->needs_grad) {
            T acc = T(0);
            for (size_t i = 0; i < nd.grad.numel(); ++i) acc += nd.grad[i] * x->value[i];
            s->ensure_grad()[0] += acc;
        }
    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const auto& s0 = xs[0]->value.shape;
    int ctotal = 0;
    for (const auto& v : xs) {
        const auto& s = v->value.shape;
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw std::invalid_argument("concat: inputs must agree on batch and spatial dims");
        ctotal += s[1];
    }
    const int b = s0[0], h = s0[2], w = s0[3];
    const size_t hw = static_cast<size_t>(h) * w;
    Tensor<T> y({b, ctotal, h, w});
    int coff = 0;
    for (const auto& v : xs) {
        const int c = v->value.shape[1];
        for (int bi = 0; bi < b; ++bi) {
            const T* src = v->value.ptr() + static_cast<size_t>(bi) * c * hw;
            T* dst = y.ptr() + (static_cast<size_t>(bi) * ctotal + coff) * hw;
            std::copy(src, src + static_cast<size_t>(c) * hw, dst);
        }
        coff += c;
    }
    return make_op<T>(std::move(y), xs, [xs, b, ctotal, hw](Node<T>& nd) {
        int coff = 0;
        for (const auto& v : xs) {
            const int c = v->value.shape[1];
            if (v->needs_grad) {
                auto& g = v->ensure_grad();
                for (int bi = 0; bi < b; ++bi) {
                    const T* src = nd.grad.ptr() + (static_cast<size_t>(bi) * ctotal + coff) * hw;
                    T* dst = g.ptr() + static_cast<size_t>(bi) * c * hw;
                    for (size_t i = 0; i < static_cast<size_t>(c) * hw; ++i) dst[i] += src[i];
                }
            }
            coff += c;
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& x, std::vector<int> new_shape) {
    if (Tensor<T>::count(new_shape) != x->value.numel()) throw std::invalid_argument("reshape: element count mismatch");
    Tensor<T> y = x->value;
    y.shape = new_shape;
    return make_op<T>(std::move(y), {x}, [x](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
    });
}

namespace detail {
inline std::vector<size_t> strides_of(const std::vector<int>& shape) {
    std::vector<size_t> st(shape.size());
    size_t acc = 1;
    for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= static_cast<size_t>(shape[i]);
    }
    return st;
}

template <typename T>
void permute_copy(const Tensor<T>& in, Tensor<T>& out, const std::vector<int>& perm, bool accumulate) {
    const auto ist = strides_of(in.shape);
    const auto& oshape = out.shape;
    const int r = static_cast<int>(oshape.size());
    std::vector<int> idx(r, 0);
    const size_t n = out.numel();
    for (size_t o = 0; o < n; ++o) {
        size_t src = 0;
        for (int d = 0; d < r; ++d) src += static_cast<size_t>(idx[d]) * ist[perm[d]];
        if (accumulate)
            out[o] += in[src];
        else
            out[o] = in[src];
        for (int d = r - 1; d >= 0; --d) {
            if (++idx[d] < oshape[d]) break;
            idx[d] = 0;
        }
    }
}
} // namespace detail

// out[i0,...,ik] = x[i_perm[0],...]: axis d of the output is axis perm[d] of
// the input.
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> perm) {
    const auto& s = x->value.shape;
    if (perm.size() != s.size()) throw std::invalid_argument("permute: rank mismatch");
    std::vector<int> oshape(perm.size());
    for (size_t d = 0; d < perm.size(); ++d) oshape[d] = s[perm[d]];
    Tensor<T> y(oshape);
    detail::permute_copy(x->value, y, perm, false);
    return make_op<T>(std::move(y), {x}, [x, perm](Node<T>& nd) {
        std::vector<int> inv(perm.size());
        for (size_t d = 0; d < perm.size(); ++d) inv[perm[d]] = static_cast<int>(d);
        Tensor<T> dx(x->value.shape);
        detail::permute_copy(nd.grad, dx, inv, false);
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += dx[i];
    });
}

// Batched matmul over flattened leading dims. a: [..., M, K], b: [..., K, N]
// (shapes before transposition flags are applied).
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false) {
    const auto& as = a->value.shape;
    const auto& bs = b->value.shape;
    if (as.size() < 2 || bs.size() != as.size()) throw std::invalid_argument("matmul: rank mismatch");
    int batch = 1;
    for (size_t d = 0; d + 2 < as.size(); ++d) {
        if (as[d] != bs[d]) throw std::invalid_argument("matmul: batch dims mismatch");
        batch *= as[d];
    }
    const int M = trans_a ? as[as.size() - 1] : as[as.size() - 2];
    const int K = trans_a ? as[as.size() - 2] : as[as.size() - 1];
    const int Kb = trans_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
    const int N = trans_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
    if (K != Kb) throw std::invalid_argument("matmul: inner dims mismatch");
    std::vector<int> oshape(as.begin(), as.end() - 2);
    oshape.push_back(M);
    oshape.push_back(N);
    Tensor<T> y(oshape);
    kernels::matmul(a->value.ptr(), b->value.ptr(), y.ptr(), batch, M, N, K, trans_a, trans_b);
    return make_op<T>(std::move(y), {a, b}, [a, b, batch, M, N, K, trans_a, trans_b](Node<T>& nd) {
        if (a->needs_grad) {
            Tensor<T> da(a->value.shape);
            // dA = dC * B^T (or transposed variants)
            if (!trans_a)
                kernels::matmul(nd.grad.ptr(), b->value.ptr(), da.ptr(), batch, M, K, N, false, !trans_b);
            else
                kernels::matmul(b->value.ptr(), nd.grad.ptr(), da.ptr(), batch, K, M, N, trans_b, true);
            auto& g = a->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += da[i];
        }
        if (b->needs_grad) {
            Tensor<T> db(b->value.shape);
            if (!trans_b)
                kernels::matmul(a->value.ptr(), nd.grad.ptr(), db.ptr(), batch, K, N, M, !trans_a, false);
            else
                kernels::matmul(nd.grad.ptr(), a->value.ptr(), db.ptr(), batch, N, K, M, true, trans_a);
            auto& g = b->ensure_grad();
            for (size_t i = 0; i < g.numel(); ++i) g[i] += db[i];
        }
    });
}

template <typename T>
Var<T> softmax_lastdim(const Var<T>& x) {
    const int cols = x->value.shape.back();
    const size_t rows = x->value.numel() / cols;
    Tensor<T> y(x->value.shape);
    kernels::softmax_lastdim(x->value.ptr(), y.ptr(), rows, cols);
    auto yv = std::make_shared<Tensor<T>>(y);
    return make_op<T>(std::move(y), {x}, [x, yv, rows, cols](Node<T>& nd) {
        Tensor<T> dx(x->value.shape);
        kernels::softmax_lastdim_backward(yv->ptr(), nd.grad.ptr(), dx.ptr(), rows, cols);
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += dx[i];
    });
}

// Batch normalization over (batch, height, width) per channel.
// Training mode uses batch statistics and updates the running stats in
// place; eval mode normalizes with the stored running stats.
template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    const auto& s = x->value.shape;
    if (s.size() != 4) throw std::invalid_argument("batchnorm: input must be rank 4");
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    if (gamma->value.numel() != static_cast<size_t>(C)) throw std::invalid_argument("batchnorm: gamma size mismatch");
    const size_t hw = static_cast<size_t>(H) * W;
    const T n_elem = static_cast<T>(B) * static_cast<T>(hw);
    Tensor<T> y(s);
    auto mean = std::make_shared<Tensor<T>>(std::vector<int>{C});
    auto invstd = std::make_shared<Tensor<T>>(std::vector<int>{C});
#pragma omp parallel for schedule(static) if (num_threads() > 1)
    for (int c = 0; c < C; ++c) {
        T mu, var;
        if (training) {
            T sum = T(0), sq = T(0);
            for (int b = 0; b < B; ++b) {
                const T* xc = x->value.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                for (size_t i = 0; i < hw; ++i) {
                    sum += xc[i];
                    sq += xc[i] * xc[i];
                }
            }
            mu = sum / n_elem;
            var = sq / n_elem - mu * mu;
            if (var < T(0)) var = T(0);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
        } else {
            mu = running_mean[c];
            var = running_var[c];
        }
        const T is = T(1) / std::sqrt(var + eps);
        (*mean)[c] = mu;
        (*invstd)[c] = is;
        const T g = gamma->value[c], bta = beta->value[c];
        for (int b = 0; b < B; ++b) {
            const T* xc = x->value.ptr() + (static_cast<size_t>(b) * C + c) * hw;
            T* yc = y.ptr() + (static_cast<size_t>(b) * C + c) * hw;
            for (size_t i = 0; i < hw; ++i) yc[i] = (xc[i] - mu) * is * g + bta;
        }
    }
    return make_op<T>(std::move(y), {x, gamma, beta},
                      [x, gamma, beta, mean, invstd, training, B, C, hw, n_elem](Node<T>& nd) {
#pragma omp parallel for schedule(static) if (num_threads() > 1)
                          for (int c = 0; c < C; ++c) {
                              const T mu = (*mean)[c], is = (*invstd)[c], g = gamma->value[c];
                              T sum_dy = T(0), sum_dy_xhat = T(0);
                              for (int b = 0; b < B; ++b) {
                                  const T* xc = x->value.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                                  const T* dc = nd.grad.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                                  for (size_t i = 0; i < hw; ++i) {
                                      sum_dy += dc[i];
                                      sum_dy_xhat += dc[i] * (xc[i] - mu) * is;
                                  }
                              }
                              if (gamma->needs_grad) gamma->ensure_grad()[c] += sum_dy_xhat;
                              if (beta->needs_grad) beta->ensure_grad()[c] += sum_dy;
                              if (x->needs_grad) {
                                  auto& gx = x->ensure_grad();
                                  for (int b = 0; b < B; ++b) {
                                      const T* xc = x->value.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                                      const T* dc = nd.grad.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                                      T* gc = gx.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                                      for (size_t i = 0; i < hw; ++i) {
                                          const T xhat = (xc[i] - mu) * is;
                                          if (training)
                                              gc[i] += g * is * (dc[i] - sum_dy / n_elem - xhat * sum_dy_xhat / n_elem);
                                          else
                                              gc[i] += g * is * dc[i];
                                      }
                                  }
                              }
                          }
                      });
}

// Layer normalization over the channel axis at each (batch, y, x) position.
template <typename T>
Var<T> layernorm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
    const auto& s = x->value.shape;
    if (s.size() != 4) throw std::invalid_argument("layernorm: input must be rank 4");
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    const size_t hw = static_cast<size_t>(H) * W;
    Tensor<T> y(s);
    auto mean = std::make_shared<Tensor<T>>(std::vector<int>{B, 1, H, W});
    auto invstd = std::make_shared<Tensor<T>>(std::vector<int>{B, 1, H, W});
#pragma omp parallel for schedule(static) if (num_threads() > 1)
    for (int b = 0; b < B; ++b) {
        for (size_t p = 0; p < hw; ++p) {
            const T* xb = x->value.ptr() + static_cast<size_t>(b) * C * hw + p;
            T sum = T(0), sq = T(0);
            for (int c = 0; c < C; ++c) {
                const T v = xb[static_cast<size_t>(c) * hw];
                sum += v;
                sq += v * v;
            }
            const T mu = sum / C;
            T var = sq / C - mu * mu;
            if (var < T(0)) var = T(0);
            const T is = T(1) / std::sqrt(var + eps);
            (*mean)[static_cast<size_t>(b) * hw + p] = mu;
            (*invstd)[static_cast<size_t>(b) * hw + p] = is;
            T* yb = y.ptr() + static_cast<size_t>(b) * C * hw + p;
            for (int c = 0; c < C; ++c)
                yb[static_cast<size_t>(c) * hw] =
                    (xb[static_cast<size_t>(c) * hw] - mu) * is * gamma->value[c] + beta->value[c];
        }
    }
    return make_op<T>(std::move(y), {x, gamma, beta}, [x, gamma, beta, mean, invstd, B, C, hw](Node<T>& nd) {
        for (int b = 0; b < B; ++b) {
            for (size_t p = 0; p < hw; ++p) {
                const T mu = (*mean)[static_cast<size_t>(b) * hw + p];
                const T is = (*invstd)[static_cast<size_t>(b) * hw + p];
                const T* xb = x->value.ptr() + static_cast<size_t>(b) * C * hw + p;
                const T* db = nd.grad.ptr() + static_cast<size_t>(b) * C * hw + p;
                T sum_dyg = T(0), sum_dyg_xhat = T(0);
                for (int c = 0; c < C; ++c) {
                    const T xhat = (xb[static_cast<size_t>(c) * hw] - mu) * is;
                    const T dyg = db[static_cast<size_t>(c) * hw] * gamma->value[c];
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xhat;
                    if (gamma->needs_grad) gamma->ensure_grad()[c] += db[static_cast<size_t>(c) * hw] * xhat;
                    if (beta->needs_grad) beta->ensure_grad()[c] += db[static_cast<size_t>(c) * hw];
                }
                if (x->needs_grad) {
                    auto& gx = x->ensure_grad();
                    T* gc = gx.ptr() + static_cast<size_t>(b) * C * hw + p;
                    for (int c = 0; c < C; ++c) {
                        const T xhat = (xb[static_cast<size_t>(c) * hw] - mu) * is;
                        const T dyg = db[static_cast<size_t>(c) * hw] * gamma->value[c];
                        gc[static_cast<size_t>(c) * hw] += is * (dyg - sum_dyg / C - xhat * sum_dyg_xhat / C);
                    }
                }
            }
        }
    });
}

// Shift-and-sum over k*k channel groups: the input has k*k*C channels laid
// out group-major; group j is shifted by its kernel displacement and the
// groups are summed into C output channels. Realizes the ACmix conv path
// with fixed (non-trainable) displacements.
template <typename T>
Var<T> shift_sum(const Var<T>& x, int k) {
    const auto& s = x->value.shape;
    if (s.size() != 4 || s[1] % (k * k) != 0) throw std::invalid_argument("shift_sum: channels must be k*k*C");
    const int B = s[0], C = s[1] / (k * k), H = s[2], W = s[3];
    const int off = (k - 1) / 2;
    Tensor<T> y({B, C, H, W});
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
            T* yc = y.ptr() + (static_cast<size_t>(b) * C + c) * H * W;
            for (int i = 0; i < H * W; ++i) yc[i] = T(0);
            for (int j = 0; j < k * k; ++j) {
                const int dy = j / k - off, dx = j % k - off;
                const T* xc = x->value.ptr() + (static_cast<size_t>(b) * (k * k * C) + j * C + c) * H * W;
                for (int yy = 0; yy < H; ++yy) {
                    const int sy = yy - dy;
                    if (sy < 0 || sy >= H) continue;
                    for (int xx = std::max(0, dx); xx < std::min(W, W + dx); ++xx)
                        yc[yy * W + xx] += xc[sy * W + (xx - dx)];
                }
            }
        }
    }
    return make_op<T>(std::move(y), {x}, [x, k, B, C, H, W, off](Node<T>& nd) {
        auto& g = x->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
        for (int b = 0; b < B; ++b) {
            for (int jc = 0; jc < k * k * C; ++jc) {
                const int j = jc / C, c = jc % C;
                const int dy = j / k - off, dx = j % k - off;
                T* gc = g.ptr() + (static_cast<size_t>(b) * (k * k * C) + jc) * H * W;
                const T* dn = nd.grad.ptr() + (static_cast<size_t>(b) * C + c) * H * W;
                for (int yy = 0; yy < H; ++yy) {
                    const int ty = yy + dy;
                    if (ty < 0 || ty >= H) continue;
                    for (int xx = 0; xx < W; ++xx) {
                        const int tx = xx + dx;
                        if (tx < 0 || tx >= W) continue;
                        gc[yy * W + xx] += dn[ty * W + tx];
                    }
                }
            }
        }
    });
}

// [B,C,H,W] -> [B, S*S, t, C] where region r = ry*S + rx holds its tokens in
// local row-major order; t = (H/S)*(W/S).
template <typename T>
Var<T> region_partition(const Var<T>& x, int S) {
    const auto& s = x->value.shape;
    if (s.size() != 4) throw std::invalid_argument("region_partition: input must be rank 4");
    const int B = s[0], C = s[1], H = s[2], W = s[3];
    if (H % S != 0 || W % S != 0)
        throw std::invalid_argument("region_partition: S=" + std::to_string(S) + " must divide " + shape_str(s));
    const int hr = H / S, wr = W / S, t = hr * wr;
    Tensor<T> y({B, S * S, t, C});
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < S * S; ++r) {
            const int ry = r / S, rx = r % S;
            for (int ti = 0; ti < t; ++ti) {
                const int yy = ry * hr + ti / wr, xx = rx * wr + ti % wr;
                for (int c = 0; c < C; ++c)
                    y[((static_cast<size_t>(b) * S * S + r) * t + ti) * C + c] =
                        x->value[((static_cast<size_t>(b) * C + c) * H + yy) * W + xx];
            }
        }
    return make_op<T>(std::move(y), {x}, [x, S, B, C, H, W, hr, wr, t](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int r = 0; r < S * S; ++r) {
                const int ry = r / S, rx = r % S;
                for (int ti = 0; ti < t; ++ti) {
                    const int yy = ry * hr + ti / wr, xx = rx * wr + ti % wr;
                    for (int c = 0; c < C; ++c)
                        g[((static_cast<size_t>(b) * C + c) * H + yy) * W + xx] +=
                            nd.grad[((static_cast<size_t>(b) * S * S + r) * t + ti) * C + c];
                }
            }
    });
}

// Inverse of region_partition: [B, S*S, t, C] -> [B, C, H, W].
template <typename T>
Var<T> region_merge(const Var<T>& x, int S, int H, int W) {
    const auto& s = x->value.shape;
    if (s.size() != 4 || s[1] != S * S) throw std::invalid_argument("region_merge: shape mismatch");
    const int B = s[0], t = s[2], C = s[3];
    const int hr = H / S, wr = W / S;
    if (hr * wr != t) throw std::invalid_argument("region_merge: token count mismatch");
    Tensor<T> y({B, C, H, W});
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < S * S; ++r) {
            const int ry = r / S, rx = r % S;
            for (int ti = 0; ti < t; ++ti) {
                const int yy = ry * hr + ti / wr, xx = rx * wr + ti % wr;
                for (int c = 0; c < C; ++c)
                    y[((static_cast<size_t>(b) * C + c) * H + yy) * W + xx] =
                        x->value[((static_cast<size_t>(b) * S * S + r) * t + ti) * C + c];
            }
        }
    return make_op<T>(std::move(y), {x}, [x, S, H, W, B, t, C, hr, wr](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int r = 0; r < S * S; ++r) {
                const int ry = r / S, rx = r % S;
                for (int ti = 0; ti < t; ++ti) {
                    const int yy = ry * hr + ti / wr, xx = rx * wr + ti % wr;
                    for (int c = 0; c < C; ++c)
                        g[((static_cast<size_t>(b) * S * S + r) * t + ti) * C + c] +=
                            nd.grad[((static_cast<size_t>(b) * C + c) * H + yy) * W + xx];
                }
            }
    });
}

// Gathers whole regions: x is [B, R, t, C], idx[b][r] lists the topk source
// regions for destination region r of batch item b; output [B, R, topk*t, C].
template <typename T>
Var<T> gather_regions(const Var<T>& x, const std::vector<std::vector<std::vector<int>>>& idx) {
    const auto& s = x->value.shape;
    if (s.size() != 4) throw std::invalid_argument("gather_regions: input must be rank 4");
    const int B = s[0], R = s[1], t = s[2], C = s[3];
    if (static_cast<int>(idx.size()) != B || static_cast<int>(idx[0].size()) != R)
        throw std::invalid_argument("gather_regions: index dims mismatch");
    const int topk = static_cast<int>(idx[0][0].size());
    const size_t tc = static_cast<size_t>(t) * C;
    Tensor<T> y({B, R, topk * t, C});
    for (int b = 0; b < B; ++b)
        for (int r = 0; r < R; ++r)
            for (int j = 0; j < topk; ++j) {
                const T* src = x->value.ptr() + (static_cast<size_t>(b) * R + idx[b][r][j]) * tc;
                T* dst = y.ptr() + ((static_cast<size_t>(b) * R + r) * topk + j) * tc;
                std::copy(src, src + tc, dst);
            }
    return make_op<T>(std::move(y), {x}, [x, idx, B, R, topk, tc](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int r = 0; r < R; ++r)
                for (int j = 0; j < topk; ++j) {
                    T* dst = g.ptr() + (static_cast<size_t>(b) * R + idx[b][r][j]) * tc;
                    const T* src = nd.grad.ptr() + ((static_cast<size_t>(b) * R + r) * topk + j) * tc;
                    for (size_t i = 0; i < tc; ++i) dst[i] += src[i];
                }
    });
}

// Per-position fully connected map across channel groups sharing D slots:
// input channels = A*D laid out group-major, output channels = Bout*D, and
// out[bo*D+d] = sum_a w[bo,a] * in[a*D+d] at every spatial position.
template <typename T>
Var<T> slotwise_fc(const Var<T>& x, const Var<T>& w, int slots) {
    const auto& s = x->value.shape;
    const auto& ws = w->value.shape;
    if (s.size() != 4 || ws.size() != 2) throw std::invalid_argument("slotwise_fc: bad ranks");
    const int A = ws[1], Bout = ws[0];
    if (s[1] != A * slots) throw std::invalid_argument("slotwise_fc: channel count mismatch");
    const int B = s[0], H = s[2], W = s[3];
    const size_t hw = static_cast<size_t>(H) * W;
    Tensor<T> y({B, Bout * slots, H, W});
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
    for (int b = 0; b < B; ++b)
        for (int oc = 0; oc < Bout * slots; ++oc) {
            const int bo = oc / slots, d = oc % slots;
            T* yc = y.ptr() + (static_cast<size_t>(b) * Bout * slots + oc) * hw;
            for (size_t p = 0; p < hw; ++p) yc[p] = T(0);
            for (int a = 0; a < A; ++a) {
                const T wv = w->value[static_cast<size_t>(bo) * A + a];
                const T* xc = x->value.ptr() + (static_cast<size_t>(b) * A * slots + a * slots + d) * hw;
                for (size_t p = 0; p < hw; ++p) yc[p] += wv * xc[p];
            }
        }
    return make_op<T>(std::move(y), {x, w}, [x, w, A, Bout, slots, B, hw](Node<T>& nd) {
        if (x->needs_grad) {
            auto& g = x->ensure_grad();
#pragma omp parallel for collapse(2) schedule(static) if (num_threads() > 1)
            for (int b = 0; b < B; ++b)
                for (int ic = 0; ic < A * slots; ++ic) {
                    const int a = ic / slots, d = ic % slots;
                    T* gc = g.ptr() + (static_cast<size_t>(b) * A * slots + ic) * hw;
                    for (int bo = 0; bo < Bout; ++bo) {
                        const T wv = w->value[static_cast<size_t>(bo) * A + a];
                        const T* dc = nd.grad.ptr() + (static_cast<size_t>(b) * Bout * slots + bo * slots + d) * hw;
                        for (size_t p = 0; p < hw; ++p) gc[p] += wv * dc[p];
                    }
                }
        }
        if (w->needs_grad) {
            auto& gw = w->ensure_grad();
#pragma omp parallel for schedule(static) if (num_threads() > 1)
            for (int bo = 0; bo < Bout; ++bo)
                for (int a = 0; a < A; ++a) {
                    T acc = T(0);
                    for (int b = 0; b < B; ++b)
                        for (int d = 0; d < slots; ++d) {
                            const T* dc = nd.grad.ptr() + (static_cast<size_t>(b) * Bout * slots + bo * slots + d) * hw;
                            const T* xc = x->value.ptr() + (static_cast<size_t>(b) * A * slots + a * slots + d) * hw;
                            for (size_t p = 0; p < hw; ++p) acc += dc[p] * xc[p];
                        }
                    gw[static_cast<size_t>(bo) * A + a] += acc;
                }
        }
    });
}

// Gathers scalar entries by flat index into a fresh tensor.
template <typename T>
Var<T> gather_entries(const Var<T>& x, std::vector<size_t> flat_idx, std::vector<int> out_shape) {
    if (Tensor<T>::count(out_shape) != flat_idx.size()) throw std::invalid_argument("gather_entries: shape mismatch");
    Tensor<T> y(out_shape);
    for (size_t i = 0; i < flat_idx.size(); ++i) y[i] = x->value[flat_idx[i]];
    auto idx = std::make_shared<std::vector<size_t>>(std::move(flat_idx));
    return make_op<T>(std::move(y), {x}, [x, idx](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < idx->size(); ++i) g[(*idx)[i]] += nd.grad[i];
    });
}

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    T acc = T(0);
    for (size_t i = 0; i < x->value.numel(); ++i) acc += x->value[i];
    Tensor<T> y({1});
    y[0] = acc;
    return make_op<T>(std::move(y), {x}, [x](Node<T>& nd) {
        auto& g = x->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[0];
    });
}

// Weighted sum of scalar nodes: out = sum_i w[i] * xs[i].
template <typename T>
Var<T> weighted_sum_scalars(const std::vector<Var<T>>& xs, const std::vector<T>& w) {
    Tensor<T> y({1});
    y[0] = T(0);
    for (size_t i = 0; i < xs.size(); ++i) y[0] += w[i] * xs[i]->value[0];
    return make_op<T>(std::move(y), xs, [xs, w](Node<T>& nd) {
        for (size_t i = 0; i < xs.size(); ++i)
            if (xs[i]->needs_grad) xs[i]->ensure_grad()[0] += nd.grad[0] * w[i];
    });
}

// sum_i bce_with_logits(z_i, t_i): numerically stable log-sum-exp form.
template <typename T>
Var<T> bce_logits_sum(const Var<T>& z, Tensor<T> targets) {
    if (z->value.numel() != targets.numel()) throw std::invalid_argument("bce: target size mismatch");
    T acc = T(0);
    for (size_t i = 0; i < targets.numel(); ++i) {
        const T zi = z->value[i], ti = targets[i];
        // max(z,0) - z*t + log(1+exp(-|z|))
        acc += std::max(zi, T(0)) - zi * ti + std::log1p(std::exp(-std::abs(zi)));
    }
    Tensor<T> y({1});
    y[0] = acc;
    auto tgt = std::make_shared<Tensor<T>>(std::move(targets));
    return make_op<T>(std::move(y), {z}, [z, tgt](Node<T>& nd) {
        auto& g = z->ensure_grad();
        for (size_t i = 0; i < g.numel(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-z->value[i]));
            g[i] += nd.grad[0] * (s - (*tgt)[i]);
        }
    });
}

} // namespace ddet::ops
