#pragma once

#include "vssa/detection.hpp"

namespace vssa {

// One test image: the detector's output against the labeled truth.
struct EvalInstance {
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
};

struct PrPoint {
    double recall = 0;
    double precision = 0;
    double score = 0;  // threshold that realizes this point
};

struct ClassEval {
    int cls = 0;
    int num_gt = 0;
    double ap = 0;
    std::vector<PrPoint> curve;
};

struct MatchLogEntry {
    int image = 0;
    int cls = 0;
    double score = 0;
    bool tp = false;
    int gt_index = -1;  // within its image, -1 for false positives
};

struct EvalReport {
    std::vector<ClassEval> per_class;
    double map = 0;
    // Micro-averaged operating point at the score threshold maximizing F1
    // (reported because fixed-threshold operating points are not part of the
    // evaluation contract).
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    double f1_threshold = 0;
    std::vector<MatchLogEntry> log;

    std::string text_table() const;
    std::string delimited() const;  // tab-separated: class, gt, ap; final mAP row
};

// Greedy per-class matching, highest score first, each ground truth usable
// once; duplicates are false positives. AP per class by 11-point
// interpolation; mAP averages classes with at least one ground truth.
EvalReport evaluate(const std::vector<EvalInstance>& images, int num_classes, double iou_thresh = 0.5);

}  // namespace vssa
