#pragma once

#include <array>
#include <string>
#include <vector>

// Box geometry: IoU, the CIoU and MPDIoU losses with analytic gradients,
// class-wise NMS and average precision. All double precision; pure functions.

namespace ddet {

struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    double w() const { return x2 - x1; }
    double h() const { return y2 - y1; }
    double area() const { return (x2 - x1) * (y2 - y1); }
    double cx() const { return (x1 + x2) / 2; }
    double cy() const { return (y1 + y2) / 2; }
};

struct ImageDims {
    double w = 0, h = 0;
};

struct LabeledBox {
    Box box;
    int class_id = 0;
};

struct Detection {
    Box box;
    int class_id = 0;
    double confidence = 0;
};

// Term breakdown of the CIoU loss: L = 1 - iou + rho_sq/c_sq + alpha_w * v.
struct CIoUTerms {
    double iou = 0;     // intersection over union
    double rho_sq = 0;  // squared center distance
    double c_sq = 0;    // squared enclosing-box diagonal
    double v = 0;       // aspect-consistency term
    double alpha_w = 0; // trade-off weight (0 when v = 0)
};

// Term breakdown of MPDIoU = iou - d1_sq/norm - d2_sq/norm.
struct MPDIoUTerms {
    double iou = 0;
    double d1_sq = 0; // squared distance between top-left corners
    double d2_sq = 0; // squared distance between bottom-right corners
    double norm = 0;  // w^2 + h^2 of the image
};

enum class BoxLossKind { ciou, mpdiou };

// Per-term gradients of a box loss w.r.t. the predicted corners
// (x1, y1, x2, y2); total = sum of the three parts.
struct BoxLossGrad {
    std::array<double, 4> iou_term{};    // d(1 - iou) or -d(iou)
    std::array<double, 4> dist_term{};   // center-distance (ciou) or corner-distance (mpdiou) part
    std::array<double, 4> aspect_term{}; // d(alpha*v); zero for mpdiou
    std::array<double, 4> total{};
};

double iou(const Box& a, const Box& b);

CIoUTerms ciou_terms(const Box& pred, const Box& gt);
double ciou_loss(const Box& pred, const Box& gt);

MPDIoUTerms mpdiou_terms(const Box& a, const Box& b, const ImageDims& dims);
double mpdiou(const Box& a, const Box& b, const ImageDims& dims);
double mpdiou_loss(const Box& pred, const Box& gt, const ImageDims& dims);

// Variants without the image-bounds check, used inside the training loss
// where decoded boxes may momentarily leave the canvas.
double mpdiou_unchecked(const Box& a, const Box& b, const ImageDims& dims);
double mpdiou_loss_unchecked(const Box& pred, const Box& gt, const ImageDims& dims);

// Analytic gradient of the chosen loss at pred (gt and dims held constant).
BoxLossGrad loss_grad_terms(BoxLossKind kind, const Box& pred, const Box& gt, const ImageDims& dims);
std::array<double, 4> loss_grad(BoxLossKind kind, const Box& pred, const Box& gt, const ImageDims& dims);

// Class-wise greedy NMS; keeps highest-confidence boxes, suppressing
// same-class boxes with IoU strictly above the threshold. Ties broken by
// confidence desc, then class_id asc, then input order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

struct APResult {
    double ap = 0;
    bool defined = false; // false when the class has zero ground-truth boxes
};

// All-point-interpolated average precision for one class over a dataset
// (outer index = image). Greedy confidence-descending matching, each ground
// truth matched at most once, IoU >= iou_thresh to match.
APResult average_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<LabeledBox>>& gts, int class_id, double iou_thresh = 0.5);

// Unweighted mean over classes with defined AP; undefined classes are
// excluded (callers warn).
double mean_ap(const std::vector<APResult>& per_class);

} // namespace ddet
