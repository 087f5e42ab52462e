#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

/// Intersection over union; defined as 1.0 when both masks are empty.
double iou(const Mask& pred, const Mask& gt);

struct ClassResult {
    int class_id = 0;
    long long intersection = 0;
    long long set_union = 0;
};

/// Class-accumulated mean IoU: intersections and unions are summed per
/// class across episodes before the ratio, then averaged over classes
/// without weighting.
double miou(const std::vector<ClassResult>& results);

struct EvalRow {
    int fold = 0;
    int class_id = 0;  // -1 marks the summary row carrying the mIoU
    int n_shot = 1;
    double iou_accumulated = 0.0;
    long long episodes = 0;
};

std::string format_metrics_csv(const std::vector<EvalRow>& rows);
void write_metrics_csv(const std::string& path, const std::vector<EvalRow>& rows);

}  // namespace fewseg
