#pragma once

#include "ddet/blocks.hpp"
#include "ddet/geometry.hpp"
#include "ddet/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

// Desk-scale anchor-based one-stage detector. Variant flags swap the
// SPP block (baseline vs AC), the neck aggregation (ELAN vs ESAN) and the
// box-regression loss (CIoU vs MPDIoU).

namespace ddet {

constexpr int kStride = 8;
constexpr double kBoxLossWeight = 0.05, kObjLossWeight = 1.0, kClsLossWeight = 0.5;

struct ModelSpec {
    bool use_ac_sppcspc = false;
    bool use_esan = false;
    BoxLossKind box_loss = BoxLossKind::ciou;
    double width_mult = 1.0;
    int input_size = 64;
    int num_anchors = 3;
    int num_classes = 5;
};

inline std::string box_loss_name(BoxLossKind k) { return k == BoxLossKind::ciou ? "ciou" : "mpdiou"; }
inline BoxLossKind box_loss_from_name(const std::string& s) {
    if (s == "ciou") return BoxLossKind::ciou;
    if (s == "mpdiou") return BoxLossKind::mpdiou;
    throw std::invalid_argument("box_loss must be 'ciou' or 'mpdiou', got '" + s + "'");
}

inline std::string modelspec_to_json(const ModelSpec& s) {
    nlohmann::json j;
    j["use_ac_sppcspc"] = s.use_ac_sppcspc;
    j["use_esan"] = s.use_esan;
    j["box_loss"] = box_loss_name(s.box_loss);
    j["width_mult"] = s.width_mult;
    j["input_size"] = s.input_size;
    j["num_anchors"] = s.num_anchors;
    j["num_classes"] = s.num_classes;
    return j.dump();
}

inline ModelSpec modelspec_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ModelSpec s;
    s.use_ac_sppcspc = j.at("use_ac_sppcspc").get<bool>();
    s.use_esan = j.at("use_esan").get<bool>();
    s.box_loss = box_loss_from_name(j.at("box_loss").get<std::string>());
    s.width_mult = j.at("width_mult").get<double>();
    s.input_size = j.at("input_size").get<int>();
    s.num_anchors = j.at("num_anchors").get<int>();
    s.num_classes = j.at("num_classes").get<int>();
    return s;
}

// Default anchor (w, h) pairs in pixels, matched to the synthetic glyph
// size range.
inline std::vector<std::array<double, 2>> default_anchors() { return {{14, 14}, {20, 22}, {28, 28}}; }

template <typename T>
struct Model {
    ModelSpec spec;
    ParamRegistry<T> reg;
    std::vector<std::array<double, 2>> anchors = default_anchors();

    CBS<T> cbs1, cbs2;
    ELAN<T> elan1;
    MP<T> mp1;
    ELAN<T> elan2;
    MP<T> mp2;
    SPPCSPC<T> spp;
    ACSPPCSPC<T> acspp;
    MP<T> mp3;
    ELAN<T> neck_elan;
    ESAN<T> neck_esan;
    Conv2dBlock<T> head;

    mutable std::map<std::string, Tensor<T>> taps; // layer-tag -> latest activation

    Model(const ModelSpec& s, uint64_t seed) : spec(s) {
        if (s.input_size % kStride != 0)
            throw std::invalid_argument("model: input size " + std::to_string(s.input_size) +
                                        " not divisible by stride " + std::to_string(kStride));
        if (s.num_classes != 5) throw std::invalid_argument("model: class count must be 5");
        // one rng stream per stage so variant flags leave other stages'
        // initial weights untouched
        int stage = 0;
        auto next_rng = [&] { return Rng(seed, static_cast<uint64_t>(stage++)); };
        auto r = next_rng();
        cbs1 = CBS<T>(reg, "backbone.cbs1", 3, w(8), 3, 1, 1, r);
        r = next_rng();
        cbs2 = CBS<T>(reg, "backbone.cbs2", w(8), w(16), 3, 1, 1, r);
        r = next_rng();
        elan1 = ELAN<T>(reg, "backbone.elan1", w(16), w(32), w(8), r);
        r = next_rng();
        mp1 = MP<T>(reg, "backbone.mp1", w(32), w(32), r);
        r = next_rng();
        elan2 = ELAN<T>(reg, "backbone.elan2", w(32), w(64), w(16), r);
        r = next_rng();
        mp2 = MP<T>(reg, "backbone.mp2", w(64), w(64), r);
        r = next_rng();
        if (s.use_ac_sppcspc)
            acspp = ACSPPCSPC<T>(reg, "backbone.acspp", w(64), w(64), w(32), 4, r);
        else
            spp = SPPCSPC<T>(reg, "backbone.spp", w(64), w(64), w(32), r);
        r = next_rng();
        mp3 = MP<T>(reg, "neck.mp3", w(64), w(64), r);
        r = next_rng();
        if (s.use_esan)
            neck_esan = ESAN<T>(reg, "neck.esan", w(64), w(32), w(16), 2, 1, 4, r);
        else
            neck_elan = ELAN<T>(reg, "neck.elan", w(64), w(32), w(32), r);
        r = next_rng();
        head = Conv2dBlock<T>(reg, "head.conv", w(32), head_channels(), 1, 1, 0, 1, true, r);
    }

    int w(int base) const {
        const int v = static_cast<int>(std::lround(base * spec.width_mult / 4.0)) * 4;
        return std::max(4, v);
    }
    int grid() const { return spec.input_size / kStride; }
    int head_channels() const { return spec.num_anchors * (5 + spec.num_classes); }
    std::string spp_tag() const { return spec.use_ac_sppcspc ? "ac-sppcspc-out" : "sppcspc-out"; }

    Var<T> forward(const Var<T>& x, bool training) const {
        const auto& s = x->value.shape;
        if (s.size() != 4 || s[1] != 3 || s[2] != spec.input_size || s[3] != spec.input_size)
            throw std::invalid_argument("model: expected [B,3," + std::to_string(spec.input_size) + "," +
                                        std::to_string(spec.input_size) + "], got " + shape_str(s));
        auto t = cbs2.forward(cbs1.forward(x, training), training);
        t = elan1.forward(t, training);
        t = mp1.forward(t, training);
        t = elan2.forward(t, training);
        t = mp2.forward(t, training);
        t = spec.use_ac_sppcspc ? acspp.forward(t, training) : spp.forward(t, training);
        taps[spp_tag()] = t->value;
        t = mp3.forward(t, training);
        t = spec.use_esan ? neck_esan.forward(t, training) : neck_elan.forward(t, training);
        return head.forward(t);
    }
};

// ---------------------------------------------------------------------------
// Target assignment

struct Assignment {
    int anchor = 0, cy = 0, cx = 0;
    LabeledBox gt;
};

struct TargetGrid {
    int grid = 0;
    std::vector<Assignment> assigned; // in original label order
};

inline double wh_iou(double w1, double h1, double w2, double h2) {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    return inter / (w1 * h1 + w2 * h2 - inter);
}

// Center-cell rule with best width/height-IoU anchor; collisions go to the
// larger box (then input order), the loser falls back to its next-best
// anchor in the same cell.
inline TargetGrid assign_targets(const std::vector<LabeledBox>& labels, const ModelSpec& spec,
                                 const std::vector<std::array<double, 2>>& anchors) {
    TargetGrid tg;
    tg.grid = spec.input_size / kStride;
    std::vector<size_t> order(labels.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return labels[a].box.area() > labels[b].box.area(); });
    std::map<std::tuple<int, int, int>, bool> taken; // (anchor, cy, cx)
    std::vector<std::pair<size_t, Assignment>> picked;
    for (const size_t i : order) {
        const auto& lb = labels[i];
        const int cx = std::clamp(static_cast<int>(std::floor(lb.box.cx() / kStride)), 0, tg.grid - 1);
        const int cy = std::clamp(static_cast<int>(std::floor(lb.box.cy() / kStride)), 0, tg.grid - 1);
        std::vector<int> pref(anchors.size());
        for (size_t a = 0; a < anchors.size(); ++a) pref[a] = static_cast<int>(a);
        std::stable_sort(pref.begin(), pref.end(), [&](int a, int b) {
            return wh_iou(lb.box.w(), lb.box.h(), anchors[a][0], anchors[a][1]) >
                   wh_iou(lb.box.w(), lb.box.h(), anchors[b][0], anchors[b][1]);
        });
        for (const int a : pref) {
            if (taken.count({a, cy, cx})) continue;
            taken[{a, cy, cx}] = true;
            picked.push_back({i, Assignment{a, cy, cx, lb}});
            break;
        }
    }
    std::stable_sort(picked.begin(), picked.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [idx, as] : picked) tg.assigned.push_back(as);
    return tg;
}

// ---------------------------------------------------------------------------
// In-graph box decoding and loss

struct DecodeMeta {
    double cx, cy, aw, ah; // cell indices and anchor dims
};

// Decodes raw (tx,ty,tw,th) rows to corner boxes:
//   center = (2*sigmoid(t) - 0.5 + cell) * stride
//   size   = anchor * (2*sigmoid(t))^2 + kMinBoxSize
// The additive floor keeps strongly negative size logits from collapsing
// x2 - x1 to exactly zero in float32 (the half-size would otherwise be
// absorbed by the center's magnitude), which the box losses reject.
inline constexpr double kMinBoxSize = 1e-4;

template <typename T>
Var<T> decode_boxes(const Var<T>& t4, std::vector<DecodeMeta> meta) {
    const auto& s = t4->value.shape;
    if (s.size() != 2 || s[1] != 4 || static_cast<size_t>(s[0]) != meta.size())
        throw std::invalid_argument("decode_boxes: expected [n,4] matching meta");
    const int n = s[0];
    Tensor<T> y({n, 4});
    auto sig = [](T v) { return T(1) / (T(1) + std::exp(-v)); };
    for (int i = 0; i < n; ++i) {
        const T* t = t4->value.ptr() + static_cast<size_t>(i) * 4;
        const auto& m = meta[i];
        const T bx = (T(2) * sig(t[0]) - T(0.5) + static_cast<T>(m.cx)) * T(kStride);
        const T by = (T(2) * sig(t[1]) - T(0.5) + static_cast<T>(m.cy)) * T(kStride);
        const T sw = T(2) * sig(t[2]), sh = T(2) * sig(t[3]);
        const T bw = static_cast<T>(m.aw) * sw * sw + T(kMinBoxSize);
        const T bh = static_cast<T>(m.ah) * sh * sh + T(kMinBoxSize);
        T* o = y.ptr() + static_cast<size_t>(i) * 4;
        o[0] = bx - bw / 2;
        o[1] = by - bh / 2;
        o[2] = bx + bw / 2;
        o[3] = by + bh / 2;
    }
    return make_op<T>(std::move(y), {t4}, [t4, meta, n](Node<T>& nd) {
        auto sig = [](T v) { return T(1) / (T(1) + std::exp(-v)); };
        auto& g = t4->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const T* t = t4->value.ptr() + static_cast<size_t>(i) * 4;
            const T* d = nd.grad.ptr() + static_cast<size_t>(i) * 4;
            const auto& m = meta[i];
            const T gbx = d[0] + d[2], gby = d[1] + d[3];
            const T gbw = (d[2] - d[0]) / 2, gbh = (d[3] - d[1]) / 2;
            const T s0 = sig(t[0]), s1 = sig(t[1]), s2 = sig(t[2]), s3 = sig(t[3]);
            T* gi = g.ptr() + static_cast<size_t>(i) * 4;
            gi[0] += gbx * T(2) * s0 * (T(1) - s0) * T(kStride);
            gi[1] += gby * T(2) * s1 * (T(1) - s1) * T(kStride);
            gi[2] += gbw * static_cast<T>(m.aw) * T(8) * s2 * s2 * (T(1) - s2);
            gi[3] += gbh * static_cast<T>(m.ah) * T(8) * s3 * s3 * (T(1) - s3);
        }
    });
}

// Mean box-regression loss over [n,4] corner rows against fixed GT boxes;
// the backward pass uses the analytic per-box gradients.
template <typename T>
Var<T> box_corner_loss(const Var<T>& corners, std::vector<Box> gts, BoxLossKind kind, ImageDims dims) {
    const auto& s = corners->value.shape;
    if (s.size() != 2 || s[1] != 4 || static_cast<size_t>(s[0]) != gts.size())
        throw std::invalid_argument("box_corner_loss: expected [n,4] matching gts");
    const int n = s[0];
    auto row_box = [](const Tensor<T>& t, int i) {
        const T* p = t.ptr() + static_cast<size_t>(i) * 4;
        return Box{static_cast<double>(p[0]), static_cast<double>(p[1]), static_cast<double>(p[2]),
                   static_cast<double>(p[3])};
    };
    Tensor<T> y({1});
    double acc = 0;
    for (int i = 0; i < n; ++i) {
        const Box pred = row_box(corners->value, i);
        acc += kind == BoxLossKind::ciou ? ciou_loss(pred, gts[i]) : mpdiou_loss_unchecked(pred, gts[i], dims);
    }
    y[0] = static_cast<T>(acc / n);
    return make_op<T>(std::move(y), {corners}, [corners, gts, kind, dims, n, row_box](Node<T>& nd) {
        auto& g = corners->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const auto grad = loss_grad(kind, row_box(corners->value, i), gts[i], dims);
            for (int j = 0; j < 4; ++j)
                g[static_cast<size_t>(i) * 4 + j] += nd.grad[0] * static_cast<T>(grad[j]) / n;
        }
    });
}

// ---------------------------------------------------------------------------
// Composite detection loss

template <typename T>
struct LossBreakdown {
    Var<T> box, obj, cls, total;
    int num_assigned = 0;
    double box_v() const { return static_cast<double>(box->value[0]); }
    double obj_v() const { return static_cast<double>(obj->value[0]); }
    double cls_v() const { return static_cast<double>(cls->value[0]); }
    double total_v() const { return static_cast<double>(total->value[0]); }
};

template <typename T>
LossBreakdown<T> detection_loss(const Var<T>& head_raw, const std::vector<TargetGrid>& targets, const ModelSpec& spec,
                                const std::vector<std::array<double, 2>>& anchors) {
    const auto& s = head_raw->value.shape;
    const int A = spec.num_anchors, C = spec.num_classes, g = spec.input_size / kStride;
    if (s.size() != 4 || s[1] != A * (5 + C) || s[2] != g || s[3] != g)
        throw std::invalid_argument("detection_loss: head shape mismatch: " + shape_str(s));
    if (static_cast<size_t>(s[0]) != targets.size())
        throw std::invalid_argument("detection_loss: batch size != target count");
    const int B = s[0];
    const size_t ch_stride = static_cast<size_t>(g) * g;
    auto head_index = [&](int b, int ch, int y, int x) {
        return ((static_cast<size_t>(b) * (A * (5 + C)) + ch) * g + y) * g + x;
    };

    // objectness over every anchor/cell
    std::vector<size_t> obj_idx;
    obj_idx.reserve(static_cast<size_t>(B) * A * ch_stride);
    Tensor<T> obj_tgt({B, A, g, g});
    for (int b = 0; b < B; ++b)
        for (int a = 0; a < A; ++a)
            for (int y = 0; y < g; ++y)
                for (int x = 0; x < g; ++x) obj_idx.push_back(head_index(b, a * (5 + C) + 4, y, x));
    for (int b = 0; b < B; ++b)
        for (const auto& as : targets[b].assigned)
            obj_tgt[((static_cast<size_t>(b) * A + as.anchor) * g + as.cy) * g + as.cx] = T(1);

    auto z_obj = ops::gather_entries(head_raw, obj_idx, {B, A, g, g});
    auto obj = ops::mul_const(ops::bce_logits_sum(z_obj, std::move(obj_tgt)),
                              T(1) / static_cast<T>(static_cast<size_t>(B) * A * ch_stride));

    // assigned anchors: box + class terms
    std::vector<size_t> box_idx, cls_idx;
    std::vector<DecodeMeta> meta;
    std::vector<Box> gts;
    std::vector<T> cls_tgt_vals;
    for (int b = 0; b < B; ++b)
        for (const auto& as : targets[b].assigned) {
            for (int j = 0; j < 4; ++j) box_idx.push_back(head_index(b, as.anchor * (5 + C) + j, as.cy, as.cx));
            for (int c = 0; c < C; ++c) {
                cls_idx.push_back(head_index(b, as.anchor * (5 + C) + 5 + c, as.cy, as.cx));
                cls_tgt_vals.push_back(as.gt.class_id == c ? T(1) : T(0));
            }
            meta.push_back({static_cast<double>(as.cx), static_cast<double>(as.cy), anchors[as.anchor][0],
                            anchors[as.anchor][1]});
            gts.push_back(as.gt.box);
        }
    const int n = static_cast<int>(gts.size());

    LossBreakdown<T> out;
    out.num_assigned = n;
    out.obj = obj;
    if (n > 0) {
        auto raw_boxes = ops::gather_entries(head_raw, box_idx, {n, 4});
        auto corners = decode_boxes(raw_boxes, meta);
        const ImageDims dims{static_cast<double>(spec.input_size), static_cast<double>(spec.input_size)};
        out.box = box_corner_loss(corners, gts, spec.box_loss, dims);
        auto z_cls = ops::gather_entries(head_raw, cls_idx, {n, C});
        Tensor<T> ct({n, C});
        std::copy(cls_tgt_vals.begin(), cls_tgt_vals.end(), ct.data.begin());
        out.cls = ops::mul_const(ops::bce_logits_sum(z_cls, std::move(ct)), T(1) / static_cast<T>(n * C));
    } else {
        out.box = make_var<T>(Tensor<T>({1}), false);
        out.cls = make_var<T>(Tensor<T>({1}), false);
    }
    out.total = ops::weighted_sum_scalars<T>({out.box, out.obj, out.cls},
                                             {static_cast<T>(kBoxLossWeight), static_cast<T>(kObjLossWeight),
                                              static_cast<T>(kClsLossWeight)});
    return out;
}

// ---------------------------------------------------------------------------
// Inference decode and target encoding

struct DecodeParams {
    double conf_thresh = 0.25;
    double nms_thresh = 0.45;
};

// Decodes one batch item of a raw head tensor into image-space detections
// (confidence = objectness * best class probability), then class-wise NMS.
template <typename T>
std::vector<Detection> decode_detections(const Tensor<T>& head, int b, const ModelSpec& spec,
                                         const std::vector<std::array<double, 2>>& anchors,
                                         const DecodeParams& params = {}) {
    const int A = spec.num_anchors, C = spec.num_classes, g = spec.input_size / kStride;
    auto head_index = [&](int ch, int y, int x) {
        return ((static_cast<size_t>(b) * (A * (5 + C)) + ch) * g + y) * g + x;
    };
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    std::vector<Detection> dets;
    for (int a = 0; a < A; ++a)
        for (int y = 0; y < g; ++y)
            for (int x = 0; x < g; ++x) {
                const double obj = sig(static_cast<double>(head[head_index(a * (5 + C) + 4, y, x)]));
                int best_c = 0;
                double best_p = -1;
                for (int c = 0; c < C; ++c) {
                    const double p = sig(static_cast<double>(head[head_index(a * (5 + C) + 5 + c, y, x)]));
                    if (p > best_p) {
                        best_p = p;
                        best_c = c;
                    }
                }
                const double conf = obj * best_p;
                if (conf < params.conf_thresh) continue;
                const double t0 = static_cast<double>(head[head_index(a * (5 + C) + 0, y, x)]);
                const double t1 = static_cast<double>(head[head_index(a * (5 + C) + 1, y, x)]);
                const double t2 = static_cast<double>(head[head_index(a * (5 + C) + 2, y, x)]);
                const double t3 = static_cast<double>(head[head_index(a * (5 + C) + 3, y, x)]);
                const double bx = (2 * sig(t0) - 0.5 + x) * kStride;
                const double by = (2 * sig(t1) - 0.5 + y) * kStride;
                const double bw = anchors[a][0] * 4 * sig(t2) * sig(t2) + kMinBoxSize;
                const double bh = anchors[a][1] * 4 * sig(t3) * sig(t3) + kMinBoxSize;
                Detection d;
                d.box.x1 = std::clamp(bx - bw / 2, 0.0, static_cast<double>(spec.input_size));
                d.box.y1 = std::clamp(by - bh / 2, 0.0, static_cast<double>(spec.input_size));
                d.box.x2 = std::clamp(bx + bw / 2, 0.0, static_cast<double>(spec.input_size));
                d.box.y2 = std::clamp(by + bh / 2, 0.0, static_cast<double>(spec.input_size));
                d.class_id = best_c;
                d.confidence = conf;
                dets.push_back(d);
            }
    return nms(dets, params.nms_thresh);
}

// Writes the exact head values that decode back to the assignment's GT box
// with objectness ~1 and a one-hot class (logit magnitude 20).
template <typename T>
void encode_into_head(Tensor<T>& head, int b, const Assignment& as, const ModelSpec& spec,
                      const std::vector<std::array<double, 2>>& anchors) {
    const int A = spec.num_anchors, C = spec.num_classes, g = spec.input_size / kStride;
    auto head_index = [&](int ch, int y, int x) {
        return ((static_cast<size_t>(b) * (A * (5 + C)) + ch) * g + y) * g + x;
    };
    auto logit = [](double p) { return std::log(p / (1.0 - p)); };
    const auto& box = as.gt.box;
    const double sx = (box.cx() / kStride - as.cx + 0.5) / 2.0;
    const double sy = (box.cy() / kStride - as.cy + 0.5) / 2.0;
    const double sw = std::sqrt(box.w() / anchors[as.anchor][0]) / 2.0;
    const double sh = std::sqrt(box.h() / anchors[as.anchor][1]) / 2.0;
    for (const double v : {sx, sy, sw, sh})
        if (v <= 0 || v >= 1) throw std::invalid_argument("encode_into_head: target not representable");
    head[head_index(as.anchor * (5 + C) + 0, as.cy, as.cx)] = static_cast<T>(logit(sx));
    head[head_index(as.anchor * (5 + C) + 1, as.cy, as.cx)] = static_cast<T>(logit(sy));
    head[head_index(as.anchor * (5 + C) + 2, as.cy, as.cx)] = static_cast<T>(logit(sw));
    head[head_index(as.anchor * (5 + C) + 3, as.cy, as.cx)] = static_cast<T>(logit(sh));
    head[head_index(as.anchor * (5 + C) + 4, as.cy, as.cx)] = T(20);
    for (int c = 0; c < C; ++c)
        head[head_index(as.anchor * (5 + C) + 5 + c, as.cy, as.cx)] = as.gt.class_id == c ? T(20) : T(-20);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(const Model<float>& model, const std::string& path) {
    NamedTensorFile file;
    file.metadata_json = modelspec_to_json(model.spec);
    for (const auto& p : model.reg.params) file.tensors.emplace_back(p.name, p.var->value);
    for (const auto& b : model.reg.buffers) file.tensors.emplace_back(b.name, *b.tensor);
    save_container(path, file);
}

inline Model<float> load_checkpoint(const std::string& path) {
    const auto file = load_container(path);
    Model<float> model(modelspec_from_json(file.metadata_json), 0);
    std::map<std::string, const TensorF*> by_name;
    for (const auto& [name, tensor] : file.tensors) by_name[name] = &tensor;
    auto restore = [&](const std::string& name, TensorF& dst) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw std::runtime_error("load_checkpoint: missing tensor " + name);
        if (it->second->shape != dst.shape)
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name + ": file " +
                                     shape_str(it->second->shape) + " vs model " + shape_str(dst.shape));
        dst = *it->second;
    };
    for (auto& p : model.reg.params) restore(p.name, p.var->value);
    for (auto& b : model.reg.buffers) restore(b.name, *b.tensor);
    return model;
}

} // namespace ddet
