#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vatt/volume.hpp"

namespace vatt {

// Masks are interpreted as binary: nonzero = foreground.
MaskVolume select_label(const MaskVolume& m, std::uint8_t label);

// 2|a AND b| / (|a|+|b|); 1.0 when both masks are empty.
double dice(const MaskVolume& a, const MaskVolume& b);

// Unweighted mean of per-volume Dice over paired cases.
double dice_per_case(std::span<const MaskVolume> pred, std::span<const MaskVolume> gt);

struct Lesion {
    std::vector<std::int64_t> voxels;  // flat indices, ascending
    double diameter_mm = 0.0;
    double score = 1.0;  // meaningful for predictions only
};

struct LesionSet {
    std::vector<Lesion> lesions;
    double dz = 1.0, dy = 1.0, dx = 1.0;
};

// Labels foreground under 6- or 26-connectivity; components are ordered by
// first voxel in scan order and carry equivalent-sphere diameters.
LesionSet connected_components(const MaskVolume& mask, int connectivity = 26);

// Equivalent-sphere diameter 2*(3V/4pi)^(1/3), V = voxel_count*dz*dy*dx.
double lesion_diameter(std::int64_t voxel_count, double dz, double dy, double dx);

// Size strata: small < 15mm, medium in [15mm, 30mm], large > 30mm.
// A stratum with no lesions is reported absent rather than zero.
struct StratifiedDice {
    std::optional<double> dice_s;
    std::optional<double> dice_m;
    std::optional<double> dice_l;
};

// Per-lesion Dice averaged within strata. Prediction voxels are attributed
// to their nearest ground-truth lesion within a 2-voxel Chebyshev radius.
StratifiedDice stratified_dice(const MaskVolume& pred, const MaskVolume& gt);

// Axis-aligned box in continuous image coordinates; min corner <= max corner.
struct Box {
    double y0 = 0.0, x0 = 0.0, y1 = 0.0, x1 = 0.0;
    double score = 1.0;  // predictions only
};

double box_iou(const Box& a, const Box& b);

// Bounding boxes of one slice's foreground components (in-plane
// 8-connectivity); scores are left at the Box default.
std::vector<Box> slice_boxes(const MaskVolume& mask, std::int64_t z);

struct DetectionRecord {
    std::string image_id;
    std::vector<Box> predictions;
    std::vector<Box> ground_truth;
};

// Sensitivity at each FPs/image operating point: greedy score-descending
// matching at IoU >= iou_thresh, one match per GT box, then the highest
// sensitivity whose false-positive rate stays within the operating point.
std::vector<double> froc_sensitivity(std::span<const DetectionRecord> records,
                                     std::span<const double> fppi,
                                     double iou_thresh = 0.5);

// Area under the all-point interpolated precision-recall curve at IoU 0.5.
double ap50(std::span<const DetectionRecord> records, double iou_thresh = 0.5);

// Voxelwise lesion AND liver.
MaskVolume mask_and_postprocess(const MaskVolume& liver, const MaskVolume& lesion);

struct MetricsReport {
    double dice_per_case = 0.0;
    StratifiedDice strata;
    std::vector<std::pair<double, double>> froc;  // (fppi, sensitivity)
    std::optional<double> ap_50;
};

std::string report_to_json(const MetricsReport& report);

// JSON-lines detection records, one image per line; atomic write.
void write_detection_records(std::span<const DetectionRecord> records, const std::string& path);
std::vector<DetectionRecord> read_detection_records(const std::string& path);

}  // namespace vatt
