#include "vssa/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vssa {

namespace {

struct Flagged {
    int image;
    double score;
    bool tp;
    int gt_index;
};

// Greedy matching for one class: walk detections by descending score and
// claim the best still-free ground truth above the IoU threshold.
std::vector<Flagged> flag_class(const std::vector<EvalInstance>& images, int cls, double iou_thresh) {
    struct Ref {
        int image;
        int index;  // within its image's detection list, for stable ties
        const Detection* det;
    };
    std::vector<Ref> dets;
    for (std::size_t im = 0; im < images.size(); ++im) {
        const auto& list = images[im].dets;
        for (std::size_t i = 0; i < list.size(); ++i) {
            if (list[i].cls == cls) dets.push_back({static_cast<int>(im), static_cast<int>(i), &list[i]});
        }
    }
    std::sort(dets.begin(), dets.end(), [](const Ref& a, const Ref& b) {
        if (a.det->score != b.det->score) return a.det->score > b.det->score;
        if (a.image != b.image) return a.image < b.image;
        return a.index < b.index;
    });

    std::vector<std::vector<bool>> used(images.size());
    for (std::size_t im = 0; im < images.size(); ++im) used[im].assign(images[im].gts.size(), false);

    std::vector<Flagged> out;
    out.reserve(dets.size());
    for (const auto& r : dets) {
        const auto& gts = images[static_cast<std::size_t>(r.image)].gts;
        double best = -1;
        int bj = -1;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (gts[j].cls != cls || used[static_cast<std::size_t>(r.image)][j]) continue;
            const double v = iou(r.det->box, gts[j].box());
            if (v > best) {
                best = v;
                bj = static_cast<int>(j);
            }
        }
        if (bj >= 0 && best >= iou_thresh) {
            used[static_cast<std::size_t>(r.image)][static_cast<std::size_t>(bj)] = true;
            out.push_back({r.image, r.det->score, true, bj});
        } else {
            out.push_back({r.image, r.det->score, false, -1});
        }
    }
    return out;
}

// VOC-2007 interpolation: mean over the 11 recall grid points of the best
// precision at or beyond that recall.
double eleven_point_ap(const std::vector<PrPoint>& curve) {
    double ap = 0;
    for (int k = 0; k <= 10; ++k) {
        const double r = k / 10.0;
        double best = 0;
        for (const auto& p : curve)
            if (p.recall >= r) best = std::max(best, p.precision);
        ap += best / 11.0;
    }
    return ap;
}

}  // namespace

EvalReport evaluate(const std::vector<EvalInstance>& images, int num_classes, double iou_thresh) {
    if (num_classes < 1) throw std::invalid_argument("evaluate: num_classes must be >= 1");
    for (const auto& im : images) {
        for (const auto& d : im.dets) {
            if (d.cls < 1 || d.cls > num_classes) {
                throw std::invalid_argument("evaluate: detection class " + std::to_string(d.cls) + " outside 1.." +
                                            std::to_string(num_classes));
            }
        }
        for (const auto& g : im.gts) {
            if (g.cls < 1 || g.cls > num_classes) {
                throw std::invalid_argument("evaluate: ground-truth class " + std::to_string(g.cls) + " outside 1.." +
                                            std::to_string(num_classes));
            }
        }
    }

    EvalReport rep;
    std::vector<Flagged> pooled;
    int total_gt = 0;
    double map_sum = 0;
    int map_classes = 0;
    for (int c = 1; c <= num_classes; ++c) {
        ClassEval ce;
        ce.cls = c;
        for (const auto& im : images)
            for (const auto& g : im.gts)
                if (g.cls == c) ++ce.num_gt;
        total_gt += ce.num_gt;

        auto flags = flag_class(images, c, iou_thresh);
        int tp = 0, fp = 0;
        for (const auto& f : flags) {
            f.tp ? ++tp : ++fp;
            PrPoint p;
            p.recall = ce.num_gt > 0 ? static_cast<double>(tp) / ce.num_gt : 0.0;
            p.precision = static_cast<double>(tp) / (tp + fp);
            p.score = f.score;
            ce.curve.push_back(p);
            rep.log.push_back({f.image, c, f.score, f.tp, f.gt_index});
            pooled.push_back(f);
        }
        ce.ap = ce.num_gt > 0 ? eleven_point_ap(ce.curve) : 0.0;
        if (ce.num_gt > 0) {
            map_sum += ce.ap;
            ++map_classes;
        }
        rep.per_class.push_back(std::move(ce));
    }
    rep.map = map_classes > 0 ? map_sum / map_classes : 0.0;

    // Micro operating point: scan pooled detections by descending score and
    // keep the prefix whose F1 is best (ties resolve to the higher cutoff).
    std::sort(pooled.begin(), pooled.end(), [](const Flagged& a, const Flagged& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.image < b.image;
    });
    int tp = 0, fp = 0;
    double best_f1 = 0, best_p = 0, best_r = 0, best_thresh = 0;
    for (const auto& f : pooled) {
        f.tp ? ++tp : ++fp;
        const double p = static_cast<double>(tp) / (tp + fp);
        const double r = total_gt > 0 ? static_cast<double>(tp) / total_gt : 0.0;
        const double f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
        if (f1 > best_f1) {
            best_f1 = f1;
            best_p = p;
            best_r = r;
            best_thresh = f.score;
        }
    }
    rep.precision = best_p;
    rep.recall = best_r;
    rep.f1 = best_f1;
    rep.f1_threshold = best_thresh;
    return rep;
}

std::string EvalReport::text_table() const {
    std::ostringstream os;
    os << "class  gt  ap\n";
    for (const auto& c : per_class) {
        os << c.cls << "  " << c.num_gt << "  ";
        os.precision(6);
        os << std::fixed << c.ap << "\n";
        os.unsetf(std::ios::fixed);
    }
    os.precision(6);
    os << std::fixed << "mAP  " << map << "\n";
    os << "operating point (max F1): precision " << precision << "  recall " << recall << "  f1 " << f1
       << "  score >= " << f1_threshold << "\n";
    return os.str();
}

std::string EvalReport::delimited() const {
    std::ostringstream os;
    os.precision(9);
    os << std::fixed;
    for (const auto& c : per_class) os << c.cls << "\t" << c.num_gt << "\t" << c.ap << "\n";
    os << "mAP\t\t" << map << "\n";
    return os.str();
}

}  // namespace vssa
