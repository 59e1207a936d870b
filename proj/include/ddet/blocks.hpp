#pragma once

#include "ddet/ops.hpp"
#include "ddet/params.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <vector>

// Network building blocks: CBS, MP, ELAN, SPPCSPC, ACmix, BRA, BiFormer,
// AC-SPPCSPC and ESAN. Every block registers its parameters under
// "<prefix>.<local>" and exposes forward(x, training).

namespace ddet {

template <typename T>
struct Conv2dBlock {
    Var<T> weight, bias;
    int stride = 1, pad = 0, groups = 1;

    Conv2dBlock() = default;
    Conv2dBlock(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int k, int stride_, int pad_,
                int groups_, bool with_bias, Rng& rng)
        : stride(stride_), pad(pad_), groups(groups_) {
        const size_t fan_in = static_cast<size_t>(cin / groups_) * k * k;
        weight = reg.add(prefix + ".weight", kaiming_uniform<T>({cout, cin / groups_, k, k}, fan_in, rng));
        if (with_bias) bias = reg.add(prefix + ".bias", zeros<T>({cout}));
    }

    Var<T> forward(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride, pad, groups); }
};

template <typename T>
struct BatchNormBlock {
    Var<T> gamma, beta;
    std::shared_ptr<Tensor<T>> running_mean, running_var;

    BatchNormBlock() = default;
    BatchNormBlock(ParamRegistry<T>& reg, const std::string& prefix, int c) {
        gamma = reg.add(prefix + ".gamma", ones<T>({c}));
        beta = reg.add(prefix + ".beta", zeros<T>({c}));
        running_mean = std::make_shared<Tensor<T>>(zeros<T>({c}));
        running_var = std::make_shared<Tensor<T>>(ones<T>({c}));
        reg.add_buffer(prefix + ".running_mean", running_mean.get());
        reg.add_buffer(prefix + ".running_var", running_var.get());
    }

    Var<T> forward(const Var<T>& x, bool training) const {
        return ops::batchnorm(x, gamma, beta, *running_mean, *running_var, training);
    }
};

// Conv + BatchNorm + SiLU.
template <typename T>
struct CBS {
    Conv2dBlock<T> conv;
    BatchNormBlock<T> bn;

    CBS() = default;
    CBS(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int k, int stride, int pad, Rng& rng)
        : conv(reg, prefix + ".conv", cin, cout, k, stride, pad, 1, false, rng), bn(reg, prefix + ".bn", cout) {}

    Var<T> forward(const Var<T>& x, bool training) const { return ops::silu(bn.forward(conv.forward(x), training)); }
};

// Downsampling block: maxpool branch and strided-conv branch, each producing
// half the output channels, concatenated pool-branch first.
template <typename T>
struct MP {
    CBS<T> pool_cv, conv_cv1, conv_cv2;

    MP() = default;
    MP(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, Rng& rng)
        : pool_cv(reg, prefix + ".pool_cv", cin, cout / 2, 1, 1, 0, rng),
          conv_cv1(reg, prefix + ".conv_cv1", cin, cout / 2, 1, 1, 0, rng),
          conv_cv2(reg, prefix + ".conv_cv2", cout / 2, cout / 2, 3, 2, 1, rng) {}

    Var<T> forward(const Var<T>& x, bool training) const {
        const auto& s = x->value.shape;
        if (s[2] % 2 != 0 || s[3] % 2 != 0)
            throw std::invalid_argument("mp: spatial dims must be even, got " + shape_str(s));
        auto p = pool_cv.forward(ops::maxpool(x, 2, 2, 0), training);
        auto c = conv_cv2.forward(conv_cv1.forward(x, training), training);
        return ops::concat_channels<T>({p, c});
    }
};

// Efficient aggregation network: a 1x1 stem followed by a chain of four 3x3
// convs; taps at depths {0,1,2,4} are concatenated and fused by a 1x1 conv.
template <typename T>
struct ELAN {
    CBS<T> cv1, c1, c2, c3, c4, fuse;
    int hidden = 0;

    ELAN() = default;
    ELAN(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int h, Rng& rng)
        : cv1(reg, prefix + ".cv1", cin, h, 1, 1, 0, rng), c1(reg, prefix + ".c1", h, h, 3, 1, 1, rng),
          c2(reg, prefix + ".c2", h, h, 3, 1, 1, rng), c3(reg, prefix + ".c3", h, h, 3, 1, 1, rng),
          c4(reg, prefix + ".c4", h, h, 3, 1, 1, rng), fuse(reg, prefix + ".fuse", 4 * h, cout, 1, 1, 0, rng),
          hidden(h) {}

    Var<T> forward(const Var<T>& x, bool training) const {
        auto t0 = cv1.forward(x, training);
        auto t1 = c1.forward(t0, training);
        auto t2 = c2.forward(t1, training);
        auto t3 = c3.forward(t2, training);
        auto t4 = c4.forward(t3, training);
        return fuse.forward(ops::concat_channels<T>({t0, t1, t2, t4}), training);
    }
};

// Mixed convolution/attention block: three shared 1x1 projections feed a
// conv path (slot-wise FC to k^2 maps, then shift-and-sum with fixed
// displacements) and an N-head attention path over all tokens; the outputs
// are combined as alpha*F_conv + beta*F_att.
template <typename T>
struct ACmix {
    Conv2dBlock<T> wq, wk, wv;
    Var<T> fc, alpha, beta;
    int heads = 4, k = 3, channels = 0;
    mutable std::shared_ptr<Tensor<T>> last_att; // softmax weights of the latest forward, for inspection

    ACmix() = default;
    ACmix(ParamRegistry<T>& reg, const std::string& prefix, int c, int heads_, int k_, Rng& rng)
        : wq(reg, prefix + ".wq", c, c, 1, 1, 0, 1, false, rng), wk(reg, prefix + ".wk", c, c, 1, 1, 0, 1, false, rng),
          wv(reg, prefix + ".wv", c, c, 1, 1, 0, 1, false, rng), heads(heads_), k(k_), channels(c) {
        if (c % heads_ != 0) throw std::invalid_argument("acmix: heads must divide channels");
        fc = reg.add(prefix + ".fc", kaiming_uniform<T>({k_ * k_ * heads_, 3 * heads_}, 3 * heads_, rng));
        alpha = reg.add(prefix + ".alpha", ones<T>({1}));
        beta = reg.add(prefix + ".beta", ones<T>({1}));
    }

    Var<T> forward(const Var<T>& x, bool) const {
        const auto& s = x->value.shape;
        if (s[1] != channels) throw std::invalid_argument("acmix: channel mismatch");
        // spatial dims below k are fine: out-of-range shifts contribute zero
        const int H = s[2], W = s[3], D = channels / heads;
        auto q = wq.forward(x), kk = wk.forward(x), v = wv.forward(x);
        // conv path
        auto qkv = ops::concat_channels<T>({q, kk, v});
        auto maps = ops::slotwise_fc(qkv, fc, D);
        auto f_conv = ops::shift_sum(maps, k);
        // attention path (dense over all tokens)
        auto to_heads = [&](const Var<T>& t) {
            auto part = ops::region_partition(t, 1);                   // [B,1,HW,C]
            auto resh = ops::reshape(part, {s[0], 1, H * W, heads, D}); // [B,1,HW,N,D]
            return ops::permute(resh, {0, 1, 3, 2, 4});                // [B,1,N,HW,D]
        };
        auto qh = to_heads(q), kh = to_heads(kk), vh = to_heads(v);
        auto scores = ops::mul_const(ops::matmul(qh, kh, false, true), T(1) / std::sqrt(static_cast<T>(D)));
        auto att = ops::softmax_lastdim(scores);
        last_att = std::make_shared<Tensor<T>>(att->value);
        auto out = ops::matmul(att, vh);                                // [B,1,N,HW,D]
        auto back = ops::reshape(ops::permute(out, {0, 1, 3, 2, 4}), {s[0], 1, H * W, channels});
        auto f_att = ops::region_merge(back, 1, H, W);
        return ops::add(ops::scale_by_scalar(f_conv, alpha), ops::scale_by_scalar(f_att, beta));
    }
};

// Region-to-region routing: affinity between mean-pooled region queries and
// keys; per destination region pick topk sources by descending affinity,
// ties broken by lowest index.
inline std::vector<std::vector<int>> routing_topk(const std::vector<double>& affinity, int regions, int topk) {
    std::vector<std::vector<int>> idx(regions);
    for (int r = 0; r < regions; ++r) {
        std::vector<char> used(regions, 0);
        for (int j = 0; j < topk; ++j) {
            int best = -1;
            double best_v = 0;
            for (int s = 0; s < regions; ++s) {
                if (used[s]) continue;
                const double v = affinity[static_cast<size_t>(r) * regions + s];
                if (best < 0 || v > best_v) {
                    best = s;
                    best_v = v;
                }
            }
            used[best] = 1;
            idx[r].push_back(best);
        }
    }
    return idx;
}

// Bi-level routing attention: coarse region routing (no gradient through the
// selection) followed by per-region multi-head attention over the gathered
// keys/values, plus a depthwise local-context term on V.
template <typename T>
struct BRA {
    Conv2dBlock<T> wq, wk, wv, lce;
    int S = 2, topk = 1, heads = 4, channels = 0;
    mutable std::shared_ptr<Tensor<T>> last_att;
    mutable std::vector<std::vector<std::vector<int>>> last_idx;

    BRA() = default;
    BRA(ParamRegistry<T>& reg, const std::string& prefix, int c, int S_, int topk_, int heads_, int lce_k, Rng& rng)
        : wq(reg, prefix + ".wq", c, c, 1, 1, 0, 1, false, rng), wk(reg, prefix + ".wk", c, c, 1, 1, 0, 1, false, rng),
          wv(reg, prefix + ".wv", c, c, 1, 1, 0, 1, false, rng),
          lce(reg, prefix + ".lce", c, c, lce_k, 1, (lce_k - 1) / 2, c, false, rng), S(S_), topk(topk_), heads(heads_),
          channels(c) {
        if (c % heads_ != 0) throw std::invalid_argument("bra: heads must divide channels");
        if (topk_ < 1 || topk_ > S_ * S_) throw std::invalid_argument("bra: topk out of range");
    }

    Var<T> forward(const Var<T>& x, bool) const {
        const auto& s = x->value.shape;
        if (s[1] != channels) throw std::invalid_argument("bra: channel mismatch");
        if (s[2] % S != 0 || s[3] % S != 0)
            throw std::invalid_argument("bra: region grid " + std::to_string(S) + " must divide " + shape_str(s));
        const int B = s[0], H = s[2], W = s[3], R = S * S, D = channels / heads;
        const int t = (H / S) * (W / S);
        auto q = wq.forward(x), kk = wk.forward(x), v = wv.forward(x);
        auto qp = ops::region_partition(q, S); // [B,R,t,C]
        auto kp = ops::region_partition(kk, S);
        auto vp = ops::region_partition(v, S);
        // region-level affinity on detached values: routing has no gradient
        last_idx.assign(B, {});
        for (int b = 0; b < B; ++b) {
            std::vector<double> qm(static_cast<size_t>(R) * channels, 0.0), km(qm), aff(static_cast<size_t>(R) * R);
            for (int r = 0; r < R; ++r)
                for (int ti = 0; ti < t; ++ti)
                    for (int c = 0; c < channels; ++c) {
                        const size_t o = ((static_cast<size_t>(b) * R + r) * t + ti) * channels + c;
                        qm[static_cast<size_t>(r) * channels + c] += static_cast<double>(qp->value[o]) / t;
                        km[static_cast<size_t>(r) * channels + c] += static_cast<double>(kp->value[o]) / t;
                    }
            for (int r = 0; r < R; ++r)
                for (int s2 = 0; s2 < R; ++s2) {
                    double acc = 0;
                    for (int c = 0; c < channels; ++c)
                        acc += qm[static_cast<size_t>(r) * channels + c] * km[static_cast<size_t>(s2) * channels + c];
                    aff[static_cast<size_t>(r) * R + s2] = acc;
                }
            last_idx[b] = routing_topk(aff, R, topk);
        }
        auto kg = ops::gather_regions(kp, last_idx); // [B,R,topk*t,C]
        auto vg = ops::gather_regions(vp, last_idx);
        auto to_heads = [&](const Var<T>& p, int tokens) {
            auto resh = ops::reshape(p, {B, R, tokens, heads, D});
            return ops::permute(resh, {0, 1, 3, 2, 4}); // [B,R,N,tokens,D]
        };
        auto qh = to_heads(qp, t), kh = to_heads(kg, topk * t), vh = to_heads(vg, topk * t);
        auto scores = ops::mul_const(ops::matmul(qh, kh, false, true), T(1) / std::sqrt(static_cast<T>(D)));
        auto att = ops::softmax_lastdim(scores);
        last_att = std::make_shared<Tensor<T>>(att->value);
        auto out = ops::matmul(att, vh); // [B,R,N,t,D]
        auto back = ops::reshape(ops::permute(out, {0, 1, 3, 2, 4}), {B, R, t, channels});
        auto merged = ops::region_merge(back, S, H, W);
        return ops::add(merged, lce.forward(v));
    }
};

// BiFormer block (transformer layout): x + DWConv3x3(x), then
// x + BRA(LN(x)), then x + MLP(LN(x)).
template <typename T>
struct BiFormerBlock {
    Conv2dBlock<T> dw;
    Var<T> ln1_g, ln1_b, ln2_g, ln2_b;
    BRA<T> bra;
    Conv2dBlock<T> mlp1, mlp2;

    BiFormerBlock() = default;
    BiFormerBlock(ParamRegistry<T>& reg, const std::string& prefix, int c, int S, int topk, int heads, Rng& rng)
        : dw(reg, prefix + ".dw", c, c, 3, 1, 1, c, false, rng), bra(reg, prefix + ".bra", c, S, topk, heads, 5, rng),
          mlp1(reg, prefix + ".mlp1", c, 2 * c, 1, 1, 0, 1, true, rng),
          mlp2(reg, prefix + ".mlp2", 2 * c, c, 1, 1, 0, 1, true, rng) {
        ln1_g = reg.add(prefix + ".ln1.gamma", ones<T>({c}));
        ln1_b = reg.add(prefix + ".ln1.beta", zeros<T>({c}));
        ln2_g = reg.add(prefix + ".ln2.gamma", ones<T>({c}));
        ln2_b = reg.add(prefix + ".ln2.beta", zeros<T>({c}));
    }

    Var<T> forward(const Var<T>& x, bool training) const {
        auto h = ops::add(x, dw.forward(x));
        h = ops::add(h, bra.forward(ops::layernorm_channels(h, ln1_g, ln1_b), training));
        auto m = mlp2.forward(ops::silu(mlp1.forward(ops::layernorm_channels(h, ln2_g, ln2_b))));
        return ops::add(h, m);
    }
};

// Baseline SPP block with cross-stage-partial pass-through: three-conv stack,
// parallel maxpools {5,9,13}, concat and fuse.
template <typename T>
struct SPPCSPC {
    CBS<T> cv1, cv2, cv3, cv4, cv5, cv6, cv7;
    int hidden = 0;

    SPPCSPC() = default;
    SPPCSPC(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int h, Rng& rng)
        : cv1(reg, prefix + ".cv1", cin, h, 1, 1, 0, rng), cv2(reg, prefix + ".cv2", cin, h, 1, 1, 0, rng),
          cv3(reg, prefix + ".cv3", h, h, 3, 1, 1, rng), cv4(reg, prefix + ".cv4", h, h, 1, 1, 0, rng),
          cv5(reg, prefix + ".cv5", 4 * h, h, 1, 1, 0, rng), cv6(reg, prefix + ".cv6", h, h, 3, 1, 1, rng),
          cv7(reg, prefix + ".cv7", 2 * h, cout, 1, 1, 0, rng), hidden(h) {}

    Var<T> forward(const Var<T>& x, bool training) const {
        const auto& s = x->value.shape;
        if (s[2] < 13 || s[3] < 13)
            throw std::invalid_argument("sppcspc: spatial dims must be >= 13, got " + shape_str(s));
        auto x1 = cv4.forward(cv3.forward(cv1.forward(x, training), training), training);
        auto p5 = ops::maxpool(x1, 5, 1, 2);
        auto p9 = ops::maxpool(x1, 9, 1, 4);
        auto p13 = ops::maxpool(x1, 13, 1, 6);
        auto fused = cv6.forward(cv5.forward(ops::concat_channels<T>({x1, p5, p9, p13}), training), training);
        auto pass = cv2.forward(x, training);
        return cv7.forward(ops::concat_channels<T>({fused, pass}), training);
    }
};

// Improved SPP block: single pre-pool conv, ACmix before pooling, and a
// serial maxpool-5 chain whose taps reproduce the {5,9,13} pyramid.
template <typename T>
struct ACSPPCSPC {
    CBS<T> cv1, cv2, cv5, cv6, cv7;
    ACmix<T> acmix;
    int hidden = 0;

    ACSPPCSPC() = default;
    ACSPPCSPC(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int h, int heads, Rng& rng)
        : cv1(reg, prefix + ".cv1", cin, h, 1, 1, 0, rng), cv2(reg, prefix + ".cv2", cin, h, 1, 1, 0, rng),
          cv5(reg, prefix + ".cv5", 4 * h, h, 1, 1, 0, rng), cv6(reg, prefix + ".cv6", h, h, 3, 1, 1, rng),
          cv7(reg, prefix + ".cv7", 2 * h, cout, 1, 1, 0, rng), acmix(reg, prefix + ".acmix", h, heads, 3, rng),
          hidden(h) {}

    Var<T> forward(const Var<T>& x, bool training) const {
        const auto& s = x->value.shape;
        if (s[2] < 5 || s[3] < 5)
            throw std::invalid_argument("ac_sppcspc: spatial dims must be >= 5, got " + shape_str(s));
        auto xp = acmix.forward(cv1.forward(x, training), training);
        auto p1 = ops::maxpool(xp, 5, 1, 2);
        auto p2 = ops::maxpool(p1, 5, 1, 2);
        auto p3 = ops::maxpool(p2, 5, 1, 2);
        auto fused = cv6.forward(cv5.forward(ops::concat_channels<T>({xp, p1, p2, p3}), training), training);
        auto pass = cv2.forward(x, training);
        return cv7.forward(ops::concat_channels<T>({fused, pass}), training);
    }
};

// ELAN with a BiFormer block on the deepest branch before aggregation.
template <typename T>
struct ESAN {
    CBS<T> cv1, c1, c2, c3, c4, fuse;
    BiFormerBlock<T> bf;
    int hidden = 0;

    ESAN() = default;
    ESAN(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int h, int S, int topk, int heads,
         Rng& rng)
        : cv1(reg, prefix + ".cv1", cin, h, 1, 1, 0, rng), c1(reg, prefix + ".c1", h, h, 3, 1, 1, rng),
          c2(reg, prefix + ".c2", h, h, 3, 1, 1, rng), c3(reg, prefix + ".c3", h, h, 3, 1, 1, rng),
          c4(reg, prefix + ".c4", h, h, 3, 1, 1, rng), fuse(reg, prefix + ".fuse", 4 * h, cout, 1, 1, 0, rng),
          bf(reg, prefix + ".bf", h, S, topk, heads, rng), hidden(h) {}

    Var<T> forward(const Var<T>& x, bool training) const {
        auto t0 = cv1.forward(x, training);
        auto t1 = c1.forward(t0, training);
        auto t2 = c2.forward(t1, training);
        auto t3 = c3.forward(t2, training);
        auto t4 = bf.forward(c4.forward(t3, training), training);
        return fuse.forward(ops::concat_channels<T>({t0, t1, t2, t4}), training);
    }
};

} // namespace ddet
