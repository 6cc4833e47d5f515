#pragma once

#include <string>
#include <vector>

#include "m2s/data.hpp"

namespace m2s {

struct PredBox {
    std::string image_id;
    int class_id = 0;
    double score = 0;
    Box box;
};

// AP over IoU .50:.05:.95 (101-point interpolation, mean over classes with
// ground truth), fixed-threshold AP50/AP75, and recall limited to k
// detections per image averaged over the same thresholds.
struct MetricsReport {
    double ap = 0;
    double ap50 = 0;
    double ap75 = 0;
    double ar1 = 0;
    double ar10 = 0;
    double ar100 = 0;

    std::string serialize() const;
    static MetricsReport parse(const std::string& text);
};

MetricsReport evaluate(const std::vector<PredBox>& predictions,
                       const std::vector<Annotation>& ground_truth);

std::string serialize_predictions(const std::vector<PredBox>& predictions);
std::vector<PredBox> parse_predictions(const std::string& text);

}  // namespace m2s
