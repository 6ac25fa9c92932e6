#include "vssa/detection.hpp"

#include <algorithm>
#include <cmath>

namespace vssa {

double iou(const Box& a, const Box& b) {
    const double ix = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
    const double iy = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
    if (ix <= 0 || iy <= 0) return 0.0;
    const double inter = ix * iy;
    return inter / (a.area() + b.area() - inter);
}

std::vector<Anchor> generate_anchors(const std::vector<std::pair<int, int>>& pyramid_hw, int input_size,
                                     double scale_min, double scale_max) {
    if (pyramid_hw.empty()) throw std::invalid_argument("generate_anchors: empty pyramid");
    const int levels = static_cast<int>(pyramid_hw.size());
    std::vector<Anchor> anchors;
    for (int lv = 0; lv < levels; ++lv) {
        const double frac =
            levels == 1 ? scale_min : scale_min + (scale_max - scale_min) * lv / static_cast<double>(levels - 1);
        const double s = frac * input_size;
        const auto [h, w] = pyramid_hw[static_cast<std::size_t>(lv)];
        const double step_y = static_cast<double>(input_size) / h;
        const double step_x = static_cast<double>(input_size) / w;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (double r : kAnchorRatios) {
                    Anchor a;
                    a.cx = (x + 0.5) * step_x;
                    a.cy = (y + 0.5) * step_y;
                    a.w = s * std::sqrt(r);
                    a.h = s / std::sqrt(r);
                    anchors.push_back(a);
                }
    }
    return anchors;
}

std::array<double, 4> encode_box(const Anchor& a, const Box& g) {
    const double gcx = (g.xmin + g.xmax) / 2, gcy = (g.ymin + g.ymax) / 2;
    return {(gcx - a.cx) / a.w, (gcy - a.cy) / a.h, std::log(g.w() / a.w), std::log(g.h() / a.h)};
}

Box decode_box(const Anchor& a, const std::array<double, 4>& t) {
    const double cx = a.cx + t[0] * a.w;
    const double cy = a.cy + t[1] * a.h;
    const double w = a.w * std::exp(t[2]);
    const double h = a.h * std::exp(t[3]);
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

MatchResult match_anchors(const std::vector<Anchor>& anchors, const std::vector<GtBox>& gts, int input_size,
                          double pos_iou) {
    MatchResult res;
    res.labels.assign(anchors.size(), 0);
    res.targets.assign(anchors.size(), {0, 0, 0, 0});

    std::vector<GtBox> clipped;
    for (const auto& g : gts) {
        if (g.cls < 1) throw std::invalid_argument("match: ground-truth class must be >= 1");
        GtBox c = g;
        if (c.xmin < 0 || c.ymin < 0 || c.xmax > input_size || c.ymax > input_size) {
            c.xmin = std::max(0.0, c.xmin);
            c.ymin = std::max(0.0, c.ymin);
            c.xmax = std::min<double>(input_size, c.xmax);
            c.ymax = std::min<double>(input_size, c.ymax);
            ++res.clipped_gt;
        }
        if (c.xmax > c.xmin && c.ymax > c.ymin) clipped.push_back(c);
    }
    if (clipped.empty()) return res;

    // IoU matrix once; both assignment passes read it.
    const std::size_t na = anchors.size(), ng = clipped.size();
    std::vector<double> m(na * ng);
    for (std::size_t i = 0; i < na; ++i) {
        const Box ab = anchors[i].box();
        for (std::size_t j = 0; j < ng; ++j) m[i * ng + j] = iou(ab, clipped[j].box());
    }

    for (std::size_t i = 0; i < na; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < ng; ++j)
            if (m[i * ng + j] > m[i * ng + best]) best = j;
        if (m[i * ng + best] >= pos_iou) {
            res.labels[i] = clipped[best].cls;
            res.targets[i] = encode_box(anchors[i], clipped[best].box());
        }
    }
    // Every ground truth claims its best anchor even below the threshold.
    for (std::size_t j = 0; j < ng; ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < na; ++i)
            if (m[i * ng + j] > m[best * ng + j]) best = i;
        res.labels[best] = clipped[j].cls;
        res.targets[best] = encode_box(anchors[best], clipped[j].box());
    }
    for (std::size_t i = 0; i < na; ++i)
        if (res.labels[i] > 0) res.positives.push_back(static_cast<int>(i));
    return res;
}

std::vector<Detection> decode_and_nms(const std::vector<double>& probs, const std::vector<double>& deltas,
                                      const std::vector<Anchor>& anchors, int num_classes, int input_size,
                                      double score_thresh, double nms_iou, int max_out) {
    const std::size_t rows = anchors.size();
    const std::size_t k = static_cast<std::size_t>(num_classes) + 1;
    if (probs.size() != rows * k || deltas.size() != rows * 4) {
        throw std::invalid_argument("decode_and_nms: probs/deltas sizes inconsistent with anchor count");
    }
    struct Cand {
        Box box;
        double score;
        std::size_t idx;
    };
    std::vector<Detection> all;
    for (int c = 1; c <= num_classes; ++c) {
        std::vector<Cand> cands;
        for (std::size_t i = 0; i < rows; ++i) {
            const double score = probs[i * k + static_cast<std::size_t>(c)];
            if (score <= score_thresh) continue;
            Box b = decode_box(anchors[i], {deltas[i * 4], deltas[i * 4 + 1], deltas[i * 4 + 2], deltas[i * 4 + 3]});
            b.xmin = std::max(0.0, b.xmin);
            b.ymin = std::max(0.0, b.ymin);
            b.xmax = std::min<double>(input_size, b.xmax);
            b.ymax = std::min<double>(input_size, b.ymax);
            if (b.xmax <= b.xmin || b.ymax <= b.ymin) continue;
            cands.push_back({b, score, i});
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.idx < b.idx;
        });
        std::vector<bool> dead(cands.size(), false);
        for (std::size_t i = 0; i < cands.size(); ++i) {
            if (dead[i]) continue;
            all.push_back({cands[i].box, c, cands[i].score});
            for (std::size_t j = i + 1; j < cands.size(); ++j) {
                if (!dead[j] && iou(cands[i].box, cands[j].box) > nms_iou) dead[j] = true;
            }
        }
    }
    std::sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.cls != b.cls) return a.cls < b.cls;
        return a.box.xmin < b.box.xmin;
    });
    if (static_cast<int>(all.size()) > max_out) all.resize(static_cast<std::size_t>(max_out));
    return all;
}

}  // namespace vssa
