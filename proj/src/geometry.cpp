#include "ddet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ddet {

namespace {

void check_valid(const Box& b, const char* who) {
    if (b.x1 > b.x2 || b.y1 > b.y2) throw std::invalid_argument(std::string(who) + ": box corners out of order");
}

void check_nondegenerate(const Box& b, const char* who) {
    check_valid(b, who);
    if (b.w() <= 0 || b.h() <= 0) throw std::invalid_argument(std::string(who) + ": degenerate box");
}

void check_in_image(const Box& b, const ImageDims& dims, const char* who) {
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > dims.w || b.y2 > dims.h)
        throw std::invalid_argument(std::string(who) + ": box outside image bounds");
}

struct IoUParts {
    double inter = 0, uni = 0, iou = 0;
    double xi1 = 0, yi1 = 0, xi2 = 0, yi2 = 0; // intersection corners
    double iw = 0, ih = 0;
};

IoUParts iou_parts(const Box& a, const Box& b) {
    IoUParts p;
    p.xi1 = std::max(a.x1, b.x1);
    p.yi1 = std::max(a.y1, b.y1);
    p.xi2 = std::min(a.x2, b.x2);
    p.yi2 = std::min(a.y2, b.y2);
    p.iw = std::max(0.0, p.xi2 - p.xi1);
    p.ih = std::max(0.0, p.yi2 - p.yi1);
    p.inter = p.iw * p.ih;
    p.uni = a.area() + b.area() - p.inter;
    p.iou = p.uni > 0 ? p.inter / p.uni : 0.0;
    return p;
}

} // namespace

double iou(const Box& a, const Box& b) {
    check_valid(a, "iou");
    check_valid(b, "iou");
    return iou_parts(a, b).iou;
}

CIoUTerms ciou_terms(const Box& pred, const Box& gt) {
    check_nondegenerate(pred, "ciou");
    check_nondegenerate(gt, "ciou");
    CIoUTerms t;
    t.iou = iou_parts(pred, gt).iou;
    t.rho_sq = (pred.cx() - gt.cx()) * (pred.cx() - gt.cx()) + (pred.cy() - gt.cy()) * (pred.cy() - gt.cy());
    const double cw = std::max(pred.x2, gt.x2) - std::min(pred.x1, gt.x1);
    const double ch = std::max(pred.y2, gt.y2) - std::min(pred.y1, gt.y1);
    t.c_sq = cw * cw + ch * ch;
    const double phi = std::atan(gt.w() / gt.h()) - std::atan(pred.w() / pred.h());
    t.v = 4.0 / (std::numbers::pi * std::numbers::pi) * phi * phi;
    const double denom = (1.0 - t.iou) + t.v;
    t.alpha_w = (t.v > 0 && denom > 0) ? t.v / denom : 0.0;
    return t;
}

double ciou_loss(const Box& pred, const Box& gt) {
    const auto t = ciou_terms(pred, gt);
    return 1.0 - t.iou + (t.c_sq > 0 ? t.rho_sq / t.c_sq : 0.0) + t.alpha_w * t.v;
}

MPDIoUTerms mpdiou_terms(const Box& a, const Box& b, const ImageDims& dims) {
    if (dims.w <= 0 || dims.h <= 0) throw std::invalid_argument("mpdiou: image dims must be positive");
    check_valid(a, "mpdiou");
    check_valid(b, "mpdiou");
    MPDIoUTerms t;
    t.iou = iou_parts(a, b).iou;
    t.d1_sq = (b.x1 - a.x1) * (b.x1 - a.x1) + (b.y1 - a.y1) * (b.y1 - a.y1);
    t.d2_sq = (b.x2 - a.x2) * (b.x2 - a.x2) + (b.y2 - a.y2) * (b.y2 - a.y2);
    t.norm = dims.w * dims.w + dims.h * dims.h;
    return t;
}

double mpdiou_unchecked(const Box& a, const Box& b, const ImageDims& dims) {
    const auto t = mpdiou_terms(a, b, dims);
    return t.iou - t.d1_sq / t.norm - t.d2_sq / t.norm;
}

double mpdiou(const Box& a, const Box& b, const ImageDims& dims) {
    check_in_image(a, dims, "mpdiou");
    check_in_image(b, dims, "mpdiou");
    return mpdiou_unchecked(a, b, dims);
}

double mpdiou_loss(const Box& pred, const Box& gt, const ImageDims& dims) {
    return 1.0 - mpdiou(pred, gt, dims);
}

double mpdiou_loss_unchecked(const Box& pred, const Box& gt, const ImageDims& dims) {
    return 1.0 - mpdiou_unchecked(pred, gt, dims);
}

namespace {

// d(iou)/d(pred corners). Gradients of intersection corners use the active
// side of each max/min; ties pick the pred side (a measure-zero choice).
std::array<double, 4> iou_grad(const Box& p, const Box& g, const IoUParts& ip) {
    std::array<double, 4> di{}, du{};
    if (ip.iw > 0 && ip.ih > 0) {
        di[0] = (p.x1 >= g.x1) ? -ip.ih : 0.0; // xi1 = p.x1 active
        di[1] = (p.y1 >= g.y1) ? -ip.iw : 0.0;
        di[2] = (p.x2 <= g.x2) ? ip.ih : 0.0;
        di[3] = (p.y2 <= g.y2) ? ip.iw : 0.0;
    }
    // U = area(p) + area(g) - I
    du[0] = -p.h() - di[0];
    du[1] = -p.w() - di[1];
    du[2] = p.h() - di[2];
    du[3] = p.w() - di[3];
    std::array<double, 4> out{};
    for (int i = 0; i < 4; ++i) out[i] = (di[i] * ip.uni - ip.inter * du[i]) / (ip.uni * ip.uni);
    return out;
}

} // namespace

BoxLossGrad loss_grad_terms(BoxLossKind kind, const Box& pred, const Box& gt, const ImageDims& dims) {
    check_nondegenerate(pred, "loss_grad");
    check_nondegenerate(gt, "loss_grad");
    BoxLossGrad out;
    const auto ip = iou_parts(pred, gt);
    const auto diou = iou_grad(pred, gt, ip);
    for (int i = 0; i < 4; ++i) out.iou_term[i] = -diou[i];

    if (kind == BoxLossKind::mpdiou) {
        const double norm = dims.w * dims.w + dims.h * dims.h;
        out.dist_term[0] = 2.0 * (pred.x1 - gt.x1) / norm;
        out.dist_term[1] = 2.0 * (pred.y1 - gt.y1) / norm;
        out.dist_term[2] = 2.0 * (pred.x2 - gt.x2) / norm;
        out.dist_term[3] = 2.0 * (pred.y2 - gt.y2) / norm;
    } else {
        // center-distance term rho^2 / c^2
        const double dcx = pred.cx() - gt.cx(), dcy = pred.cy() - gt.cy();
        const double rho_sq = dcx * dcx + dcy * dcy;
        const double cw = std::max(pred.x2, gt.x2) - std::min(pred.x1, gt.x1);
        const double ch = std::max(pred.y2, gt.y2) - std::min(pred.y1, gt.y1);
        const double c_sq = cw * cw + ch * ch;
        // d(rho^2): both corners move the center by 1/2
        const std::array<double, 4> drho{dcx, dcy, dcx, dcy};
        std::array<double, 4> dc{};
        dc[0] = (pred.x1 <= gt.x1) ? -2.0 * cw : 0.0; // enclosing left edge follows pred
        dc[1] = (pred.y1 <= gt.y1) ? -2.0 * ch : 0.0;
        dc[2] = (pred.x2 >= gt.x2) ? 2.0 * cw : 0.0;
        dc[3] = (pred.y2 >= gt.y2) ? 2.0 * ch : 0.0;
        for (int i = 0; i < 4; ++i) out.dist_term[i] = (drho[i] * c_sq - rho_sq * dc[i]) / (c_sq * c_sq);

        // aspect term alpha*v with alpha = v / (1 - iou + v); alpha depends
        // on pred, so d(alpha*v) = alpha*dv + v*dalpha with
        // dalpha = (dv*(1-iou) + v*diou) / (1 - iou + v)^2.
        const double phi = std::atan(gt.w() / gt.h()) - std::atan(pred.w() / pred.h());
        const double v = 4.0 / (std::numbers::pi * std::numbers::pi) * phi * phi;
        const double denom = (1.0 - ip.iou) + v;
        if (v > 0 && denom > 0) {
            const double alpha = v / denom;
            const double wh_sq = pred.w() * pred.w() + pred.h() * pred.h();
            const double dv_dw = 8.0 / (std::numbers::pi * std::numbers::pi) * phi * (-pred.h() / wh_sq);
            const double dv_dh = 8.0 / (std::numbers::pi * std::numbers::pi) * phi * (pred.w() / wh_sq);
            const std::array<double, 4> dv{-dv_dw, -dv_dh, dv_dw, dv_dh};
            for (int i = 0; i < 4; ++i) {
                const double dalpha = (dv[i] * (1.0 - ip.iou) + v * diou[i]) / (denom * denom);
                out.aspect_term[i] = alpha * dv[i] + v * dalpha;
            }
        }
    }
    for (int i = 0; i < 4; ++i) out.total[i] = out.iou_term[i] + out.dist_term[i] + out.aspect_term[i];
    return out;
}

std::array<double, 4> loss_grad(BoxLossKind kind, const Box& pred, const Box& gt, const ImageDims& dims) {
    return loss_grad_terms(kind, pred, gt, dims).total;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
    std::vector<size_t> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
        return dets[a].class_id < dets[b].class_id;
    });
    std::vector<Detection> kept;
    std::vector<char> suppressed(dets.size(), 0);
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const size_t i = order[oi];
        if (suppressed[i]) continue;
        kept.push_back(dets[i]);
        for (size_t oj = oi + 1; oj < order.size(); ++oj) {
            const size_t j = order[oj];
            if (suppressed[j] || dets[j].class_id != dets[i].class_id) continue;
            if (iou(dets[i].box, dets[j].box) > iou_thresh) suppressed[j] = 1;
        }
    }
    return kept;
}

APResult average_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<LabeledBox>>& gts, int class_id, double iou_thresh) {
    if (dets.size() != gts.size()) throw std::invalid_argument("average_precision: image count mismatch");
    size_t n_gt = 0;
    for (const auto& g : gts)
        for (const auto& lb : g)
            if (lb.class_id == class_id) ++n_gt;
    APResult res;
    if (n_gt == 0) return res; // undefined
    res.defined = true;

    struct Entry {
        double conf;
        size_t img, pos; // input order for tie-breaking
        const Detection* det;
    };
    std::vector<Entry> entries;
    for (size_t im = 0; im < dets.size(); ++im)
        for (size_t k = 0; k < dets[im].size(); ++k)
            if (dets[im][k].class_id == class_id) entries.push_back({dets[im][k].confidence, im, k, &dets[im][k]});
    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.conf > b.conf; });

    std::vector<std::vector<char>> matched(gts.size());
    for (size_t im = 0; im < gts.size(); ++im) matched[im].assign(gts[im].size(), 0);

    std::vector<double> precision, recall;
    size_t tp = 0, fp = 0;
    for (const auto& e : entries) {
        // best unmatched same-class GT in the same image; ties to lowest index
        int best = -1;
        double best_iou = 0;
        const auto& g = gts[e.img];
        for (size_t j = 0; j < g.size(); ++j) {
            if (g[j].class_id != class_id || matched[e.img][j]) continue;
            const double ov = iou(e.det->box, g[j].box);
            if (ov >= iou_thresh && (best < 0 || ov > best_iou)) {
                best = static_cast<int>(j);
                best_iou = ov;
            }
        }
        if (best >= 0) {
            matched[e.img][best] = 1;
            ++tp;
        } else {
            ++fp;
        }
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }

    // all-point interpolation: running max of precision from the right,
    // summed over recall increments
    double ap = 0, prev_recall = 0, max_p = 0;
    std::vector<double> env(precision.size());
    for (int i = static_cast<int>(precision.size()) - 1; i >= 0; --i) {
        max_p = std::max(max_p, precision[i]);
        env[i] = max_p;
    }
    for (size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * env[i];
        prev_recall = recall[i];
    }
    res.ap = ap;
    return res;
}

double mean_ap(const std::vector<APResult>& per_class) {
    double sum = 0;
    int n = 0;
    for (const auto& r : per_class)
        if (r.defined) {
            sum += r.ap;
            ++n;
        }
    return n > 0 ? sum / n : 0.0;
}

} // namespace ddet
