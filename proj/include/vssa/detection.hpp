#pragma once

#include <array>

#include "vssa/ops.hpp"

namespace vssa {

struct Box {
    double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
    double w() const { return xmax - xmin; }
    double h() const { return ymax - ymin; }
    double area() const { return w() * h(); }
};

struct GtBox {
    double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
    int cls = 0;  // 1..C
    Box box() const { return {xmin, ymin, xmax, ymax}; }
};

struct Anchor {
    double cx = 0, cy = 0, w = 0, h = 0;
    Box box() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
};

struct Detection {
    Box box;
    int cls = 0;  // 1..C
    double score = 0;
};

inline constexpr int kAnchorsPerCell = 5;
inline constexpr double kAnchorRatios[kAnchorsPerCell] = {1.0, 2.0, 3.0, 0.5, 1.0 / 3.0};

double iou(const Box& a, const Box& b);

// Five anchors per cell on every pyramid level (fine to coarse); level scale
// interpolates linearly from scale_min to scale_max (fractions of the input
// side). Order: level, then row, then column, then ratio — matching the
// per-anchor row layout the heads emit.
std::vector<Anchor> generate_anchors(const std::vector<std::pair<int, int>>& pyramid_hw, int input_size,
                                     double scale_min = 0.2, double scale_max = 0.95);

std::array<double, 4> encode_box(const Anchor& a, const Box& g);
Box decode_box(const Anchor& a, const std::array<double, 4>& t);

struct MatchResult {
    std::vector<int> labels;                      // 0 background, else class id
    std::vector<std::array<double, 4>> targets;   // defined where label > 0
    std::vector<int> positives;                   // indices with label > 0, ascending
    int clipped_gt = 0;                           // ground truths clipped to the image
};

// IoU >= pos_iou assigns an anchor to its best-overlap ground truth; each
// ground truth additionally claims its single best anchor. Ties break toward
// the lowest index.
MatchResult match_anchors(const std::vector<Anchor>& anchors, const std::vector<GtBox>& gts, int input_size,
                          double pos_iou = 0.5);

// probs: R x (C+1) row-major softmax outputs; deltas: R x 4. Per-class greedy
// suppression, then a global top-k by score.
std::vector<Detection> decode_and_nms(const std::vector<double>& probs, const std::vector<double>& deltas,
                                      const std::vector<Anchor>& anchors, int num_classes, int input_size,
                                      double score_thresh = 0.01, double nms_iou = 0.45, int max_out = 100);

// Background anchors ranked by their current cross-entropy against the
// background class; keeps ratio * max(1, N_pos) of them. Forward values
// only — the ranking itself carries no gradient.
template <class T>
std::vector<int> mine_hard_negatives(const Tensor<T>& logits, const MatchResult& match, int ratio = 3) {
    const std::int64_t rows = logits.dim(0);
    const std::int64_t k = logits.dim(1);
    std::vector<std::pair<double, int>> neg;
    const T* pl = logits.ptr();
    for (std::int64_t i = 0; i < rows; ++i) {
        if (match.labels[static_cast<std::size_t>(i)] > 0) continue;
        const T* row = pl + i * k;
        double mx = static_cast<double>(row[0]);
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double sum = 0;
        for (std::int64_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
        const double ce = std::log(sum) + mx - static_cast<double>(row[0]);
        neg.push_back({ce, static_cast<int>(i)});
    }
    std::sort(neg.begin(), neg.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    const std::size_t keep =
        std::min(neg.size(), static_cast<std::size_t>(ratio) * std::max<std::size_t>(1, match.positives.size()));
    std::vector<int> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(neg[i].second);
    return out;
}

// L = (1/N_pos) * sum_i [ CE_i + alpha * 1[pos_i] * smoothL1(delta_i - t_i) ]
// over the positives plus the supplied mined negatives, N_pos floored at 1.
template <class T>
Tensor<T> detection_loss_mined(Tape<T>* tp, const Tensor<T>& logits, const Tensor<T>& deltas,
                               const MatchResult& match, const std::vector<int>& hard_negatives, double alpha) {
    const std::int64_t rows = logits.dim(0);
    if (rows == 0) throw std::invalid_argument("detection loss: no anchors");
    if (static_cast<std::int64_t>(match.labels.size()) != rows || deltas.dim(0) != rows || deltas.dim(1) != 4) {
        throw std::invalid_argument("detection loss: logits " + shape_str(logits.shape) + " / deltas " +
                                    shape_str(deltas.shape) + " inconsistent with " +
                                    std::to_string(match.labels.size()) + " matched anchors");
    }
    const int n_pos = static_cast<int>(match.positives.size());
    const int n_pos_norm = std::max(1, n_pos);

    std::vector<int> selected = match.positives;
    selected.insert(selected.end(), hard_negatives.begin(), hard_negatives.end());
    if (selected.empty()) throw std::invalid_argument("detection loss: no anchors selected");
    std::vector<int> labels_sel;
    labels_sel.reserve(selected.size());
    for (int i : selected) labels_sel.push_back(match.labels[static_cast<std::size_t>(i)]);

    auto ce_rows = ops::softmax_cross_entropy(tp, ops::take_rows(tp, logits, selected), labels_sel);
    auto loss = ops::sum_all(tp, ce_rows);

    if (n_pos > 0 && alpha != 0.0) {
        Tensor<T> tgt = Tensor<T>::zeros({n_pos, 4});
        for (int i = 0; i < n_pos; ++i) {
            const auto& t4 = match.targets[static_cast<std::size_t>(match.positives[static_cast<std::size_t>(i)])];
            for (int j = 0; j < 4; ++j) tgt.ptr()[i * 4 + j] = static_cast<T>(t4[static_cast<std::size_t>(j)]);
        }
        auto diff = ops::sub(tp, ops::take_rows(tp, deltas, match.positives), tgt);
        auto reg = ops::sum_all(tp, ops::smooth_l1(tp, diff));
        loss = ops::add(tp, loss, ops::mul_scalar(tp, reg, static_cast<T>(alpha)));
    }
    return ops::mul_scalar(tp, loss, static_cast<T>(1.0 / n_pos_norm));
}

template <class T>
Tensor<T> detection_loss_matched(Tape<T>* tp, const Tensor<T>& logits, const Tensor<T>& deltas,
                                 const MatchResult& match, double alpha) {
    return detection_loss_mined(tp, logits, deltas, match, mine_hard_negatives(logits, match), alpha);
}

template <class T>
Tensor<T> detection_loss(Tape<T>* tp, const Tensor<T>& logits, const Tensor<T>& deltas,
                         const std::vector<Anchor>& anchors, const std::vector<GtBox>& gts, double alpha,
                         int input_size) {
    if (logits.dim(0) != static_cast<std::int64_t>(anchors.size())) {
        throw std::invalid_argument("detection loss: " + std::to_string(anchors.size()) + " anchors but logits " +
                                    shape_str(logits.shape));
    }
    return detection_loss_matched(tp, logits, deltas, match_anchors(anchors, gts, input_size), alpha);
}

}  // namespace vssa
