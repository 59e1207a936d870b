#pragma once

// Independent re-implementations used only as oracles in tests: rasterized
// IoU, literal transcriptions of the loss formulas, central finite
// differences, a dense-attention reference and brute-force average precision.

#include "ddet/geometry.hpp"
#include "ddet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

// IoU by sampling cell centers of a `pitch`-sized raster covering both boxes.
inline double raster_iou(const ddet::Box& a, const ddet::Box& b, double pitch = 0.001) {
    const double x_lo = std::min(a.x1, b.x1), x_hi = std::max(a.x2, b.x2);
    const double y_lo = std::min(a.y1, b.y1), y_hi = std::max(a.y2, b.y2);
    long long inter = 0, uni = 0;
    for (double y = y_lo + pitch / 2; y < y_hi; y += pitch)
        for (double x = x_lo + pitch / 2; x < x_hi; x += pitch) {
            const bool in_a = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
            const bool in_b = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
            inter += in_a && in_b;
            uni += in_a || in_b;
        }
    return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

inline double iou_ref(const ddet::Box& a, const ddet::Box& b) {
    const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = iw * ih;
    return inter / (a.area() + b.area() - inter);
}

inline double ciou_loss_ref(const ddet::Box& p, const ddet::Box& g) {
    const double iou = iou_ref(p, g);
    const double rho2 = (p.cx() - g.cx()) * (p.cx() - g.cx()) + (p.cy() - g.cy()) * (p.cy() - g.cy());
    const double cw = std::max(p.x2, g.x2) - std::min(p.x1, g.x1);
    const double ch = std::max(p.y2, g.y2) - std::min(p.y1, g.y1);
    const double c2 = cw * cw + ch * ch;
    const double pi2 = M_PI * M_PI;
    const double d = std::atan(g.w() / g.h()) - std::atan(p.w() / p.h());
    const double v = 4.0 / pi2 * d * d;
    const double alpha = v > 0 ? v / ((1.0 - iou) + v) : 0.0;
    return 1.0 - iou + rho2 / c2 + alpha * v;
}

inline double mpdiou_ref(const ddet::Box& a, const ddet::Box& b, const ddet::ImageDims& dims) {
    const double d1 = (a.x1 - b.x1) * (a.x1 - b.x1) + (a.y1 - b.y1) * (a.y1 - b.y1);
    const double d2 = (a.x2 - b.x2) * (a.x2 - b.x2) + (a.y2 - b.y2) * (a.y2 - b.y2);
    const double norm = dims.w * dims.w + dims.h * dims.h;
    return iou_ref(a, b) - d1 / norm - d2 / norm;
}

inline double central_diff(const std::function<double(double)>& fn, double x, double eps) {
    return (fn(x + eps) - fn(x - eps)) / (2 * eps);
}

// Dense multi-head attention over all positions plus a depthwise 5x5
// local-context term, everything in double with plain loops.
inline ddet::TensorD dense_attention_ref(const ddet::TensorD& x, const ddet::TensorD& wq, const ddet::TensorD& wk,
                                         const ddet::TensorD& wv, const ddet::TensorD& lce, int heads) {
    const int C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int n = H * W, D = C / heads;
    auto proj = [&](const ddet::TensorD& w) {
        ddet::TensorD y({1, C, H, W});
        for (int co = 0; co < C; ++co)
            for (int p = 0; p < n; ++p) {
                double acc = 0;
                for (int ci = 0; ci < C; ++ci) acc += w[co * C + ci] * x.data[static_cast<size_t>(ci) * n + p];
                y.data[static_cast<size_t>(co) * n + p] = acc;
            }
        return y;
    };
    const auto q = proj(wq), k = proj(wk), v = proj(wv);
    ddet::TensorD out({1, C, H, W});
    for (int h = 0; h < heads; ++h) {
        const int c0 = h * D;
        for (int i = 0; i < n; ++i) {
            std::vector<double> scores(n);
            double mx = -1e300;
            for (int j = 0; j < n; ++j) {
                double acc = 0;
                for (int d = 0; d < D; ++d)
                    acc += q.data[static_cast<size_t>(c0 + d) * n + i] * k.data[static_cast<size_t>(c0 + d) * n + j];
                scores[j] = acc / std::sqrt(static_cast<double>(D));
                mx = std::max(mx, scores[j]);
            }
            double z = 0;
            for (auto& s : scores) {
                s = std::exp(s - mx);
                z += s;
            }
            for (int d = 0; d < D; ++d) {
                double acc = 0;
                for (int j = 0; j < n; ++j) acc += scores[j] / z * v.data[static_cast<size_t>(c0 + d) * n + j];
                out.data[static_cast<size_t>(c0 + d) * n + i] = acc;
            }
        }
    }
    // depthwise 5x5 on the value feature map, zero padding 2
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                double acc = 0;
                for (int ky = 0; ky < 5; ++ky)
                    for (int kx = 0; kx < 5; ++kx) {
                        const int sy = y + ky - 2, sx = xx + kx - 2;
                        if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                        acc += lce[(static_cast<size_t>(c) * 25) + ky * 5 + kx] *
                               v.data[(static_cast<size_t>(c) * H + sy) * W + sx];
                    }
                out.data[(static_cast<size_t>(c) * H + y) * W + xx] += acc;
            }
    return out;
}

// All-point-interpolated AP by direct enumeration: for every prefix of the
// confidence-descending detection list compute (recall, precision), then
// integrate recall increments against the running max precision to the right.
inline double brute_force_ap(std::vector<std::pair<double, bool>> scored, size_t num_gt) {
    std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    const size_t n = scored.size();
    std::vector<double> prec(n), rec(n);
    size_t tp = 0;
    for (size_t i = 0; i < n; ++i) {
        tp += scored[i].second ? 1 : 0;
        prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        rec[i] = static_cast<double>(tp) / static_cast<double>(num_gt);
    }
    double ap = 0;
    for (size_t i = 0; i < n; ++i) {
        const double prev = i ? rec[i - 1] : 0.0;
        if (rec[i] <= prev) continue;
        double best = 0;
        for (size_t j = i; j < n; ++j) best = std::max(best, prec[j]);
        ap += (rec[i] - prev) * best;
    }
    return ap;
}

} // namespace oracle
