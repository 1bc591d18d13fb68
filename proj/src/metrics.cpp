#include "vatt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

namespace vatt {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check_same_grid(const MaskVolume& a, const MaskVolume& b, const char* op) {
    if (a.nz != b.nz || a.ny != b.ny || a.nx != b.nx) {
        throw DimensionError(std::string(op) + ": mask dims [" + std::to_string(a.nz) + "," +
                             std::to_string(a.ny) + "," + std::to_string(a.nx) + "] vs [" +
                             std::to_string(b.nz) + "," + std::to_string(b.ny) + "," +
                             std::to_string(b.nx) + "]");
    }
}

}  // namespace

MaskVolume select_label(const MaskVolume& m, std::uint8_t label) {
    MaskVolume out = m;
    for (auto& v : out.values) {
        v = v == label ? 1 : 0;
    }
    return out;
}

double dice(const MaskVolume& a, const MaskVolume& b) {
    check_same_grid(a, b, "dice");
    std::int64_t both = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        const bool va = a.values[i] != 0;
        const bool vb = b.values[i] != 0;
        na += va;
        nb += vb;
        both += va && vb;
    }
    if (na + nb == 0) {
        return 1.0;  // empty vs empty counts as perfect
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double dice_per_case(std::span<const MaskVolume> pred, std::span<const MaskVolume> gt) {
    if (pred.size() != gt.size()) {
        throw ContractError("dice_per_case: " + std::to_string(pred.size()) + " predictions vs " +
                            std::to_string(gt.size()) + " ground-truth cases");
    }
    if (pred.empty()) {
        throw ContractError("dice_per_case: no cases");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        acc += dice(pred[i], gt[i]);
    }
    return acc / static_cast<double>(pred.size());
}

double lesion_diameter(std::int64_t voxel_count, double dz, double dy, double dx) {
    if (voxel_count < 1) {
        throw ContractError("lesion_diameter: empty component");
    }
    if (!(dz > 0.0) || !(dy > 0.0) || !(dx > 0.0)) {
        throw ContractError("lesion_diameter: spacing must be > 0");
    }
    const double volume = static_cast<double>(voxel_count) * dz * dy * dx;
    return 2.0 * std::cbrt(3.0 * volume / (4.0 * kPi));
}

LesionSet connected_components(const MaskVolume& mask, int connectivity) {
    if (connectivity != 6 && connectivity != 26) {
        throw ConfigError("connected_components: connectivity must be 6 or 26, got " +
                          std::to_string(connectivity));
    }
    LesionSet set;
    set.dz = mask.dz;
    set.dy = mask.dy;
    set.dx = mask.dx;

    const std::int64_t nz = mask.nz, ny = mask.ny, nx = mask.nx;
    std::vector<std::int32_t> label(mask.values.size(), -1);
    std::vector<std::int64_t> frontier;

    for (std::int64_t start = 0; start < mask.size(); ++start) {
        const auto si = static_cast<std::size_t>(start);
        if (mask.values[si] == 0 || label[si] >= 0) {
            continue;
        }
        const auto id = static_cast<std::int32_t>(set.lesions.size());
        Lesion lesion;
        frontier.clear();
        frontier.push_back(start);
        label[si] = id;
        while (!frontier.empty()) {
            const std::int64_t cur = frontier.back();
            frontier.pop_back();
            lesion.voxels.push_back(cur);
            const std::int64_t z = cur / (ny * nx);
            const std::int64_t y = (cur / nx) % ny;
            const std::int64_t x = cur % nx;
            for (std::int64_t oz = -1; oz <= 1; ++oz) {
                for (std::int64_t oy = -1; oy <= 1; ++oy) {
                    for (std::int64_t ox = -1; ox <= 1; ++ox) {
                        if (oz == 0 && oy == 0 && ox == 0) {
                            continue;
                        }
                        if (connectivity == 6 &&
                            std::abs(oz) + std::abs(oy) + std::abs(ox) != 1) {
                            continue;
                        }
                        const std::int64_t z2 = z + oz, y2 = y + oy, x2 = x + ox;
                        if (z2 < 0 || z2 >= nz || y2 < 0 || y2 >= ny || x2 < 0 || x2 >= nx) {
                            continue;
                        }
                        const std::int64_t n = (z2 * ny + y2) * nx + x2;
                        const auto ni = static_cast<std::size_t>(n);
                        if (mask.values[ni] != 0 && label[ni] < 0) {
                            label[ni] = id;
                            frontier.push_back(n);
                        }
                    }
                }
            }
        }
        std::sort(lesion.voxels.begin(), lesion.voxels.end());
        lesion.diameter_mm = lesion_diameter(static_cast<std::int64_t>(lesion.voxels.size()),
                                             mask.dz, mask.dy, mask.dx);
        set.lesions.push_back(std::move(lesion));
    }
    return set;
}

StratifiedDice stratified_dice(const MaskVolume& pred, const MaskVolume& gt) {
    check_same_grid(pred, gt, "stratified_dice");
    const LesionSet gt_lesions = connected_components(gt, 26);

    // Attribute every voxel to its nearest GT lesion within Chebyshev
    // radius 2 (ties to the lowest lesion index): one large false positive
    // then counts against at most one lesion.
    const std::int64_t nz = gt.nz, ny = gt.ny, nx = gt.nx;
    std::vector<std::uint8_t> dist(gt.values.size(), 255);
    std::vector<std::int32_t> owner(gt.values.size(), -1);
    for (std::size_t li = 0; li < gt_lesions.lesions.size(); ++li) {
        for (const std::int64_t v : gt_lesions.lesions[li].voxels) {
            const std::int64_t z = v / (ny * nx);
            const std::int64_t y = (v / nx) % ny;
            const std::int64_t x = v % nx;
            for (std::int64_t oz = -2; oz <= 2; ++oz) {
                for (std::int64_t oy = -2; oy <= 2; ++oy) {
                    for (std::int64_t ox = -2; ox <= 2; ++ox) {
                        const std::int64_t z2 = z + oz, y2 = y + oy, x2 = x + ox;
                        if (z2 < 0 || z2 >= nz || y2 < 0 || y2 >= ny || x2 < 0 || x2 >= nx) {
                            continue;
                        }
                        const auto d = static_cast<std::uint8_t>(
                            std::max({std::abs(oz), std::abs(oy), std::abs(ox)}));
                        const auto n = static_cast<std::size_t>((z2 * ny + y2) * nx + x2);
                        if (d < dist[n]) {
                            dist[n] = d;
                            owner[n] = static_cast<std::int32_t>(li);
                        }
                    }
                }
            }
        }
    }

    std::vector<std::int64_t> pred_in_region(gt_lesions.lesions.size(), 0);
    std::vector<std::int64_t> pred_on_lesion(gt_lesions.lesions.size(), 0);
    for (std::size_t i = 0; i < pred.values.size(); ++i) {
        if (pred.values[i] == 0 || owner[i] < 0) {
            continue;
        }
        const auto li = static_cast<std::size_t>(owner[i]);
        pred_in_region[li] += 1;
        if (gt.values[i] != 0 && dist[i] == 0) {
            pred_on_lesion[li] += 1;
        }
    }

    double sum_s = 0.0, sum_m = 0.0, sum_l = 0.0;
    std::int64_t n_s = 0, n_m = 0, n_l = 0;
    for (std::size_t li = 0; li < gt_lesions.lesions.size(); ++li) {
        const auto& lesion = gt_lesions.lesions[li];
        const auto gt_size = static_cast<double>(lesion.voxels.size());
        const double d = 2.0 * static_cast<double>(pred_on_lesion[li]) /
                         (static_cast<double>(pred_in_region[li]) + gt_size);
        if (lesion.diameter_mm < 15.0) {
            sum_s += d;
            ++n_s;
        } else if (lesion.diameter_mm <= 30.0) {
            sum_m += d;
            ++n_m;
        } else {
            sum_l += d;
            ++n_l;
        }
    }
    StratifiedDice out;
    if (n_s > 0) out.dice_s = sum_s / static_cast<double>(n_s);
    if (n_m > 0) out.dice_m = sum_m / static_cast<double>(n_m);
    if (n_l > 0) out.dice_l = sum_l / static_cast<double>(n_l);
    return out;
}

// ---- detection metrics ---------------------------------------------------------

double box_iou(const Box& a, const Box& b) {
    if (a.y1 < a.y0 || a.x1 < a.x0 || b.y1 < b.y0 || b.x1 < b.x0) {
        throw ContractError("box_iou: box corners must satisfy min <= max");
    }
    const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double inter = iy * ix;
    const double area_a = (a.y1 - a.y0) * (a.x1 - a.x0);
    const double area_b = (b.y1 - b.y0) * (b.x1 - b.x0);
    const double uni = area_a + area_b - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// 2D components via the 3D labeler on a single-slice copy (26-connectivity
// restricted to one slice is 8-connectivity).
std::vector<Box> slice_boxes(const MaskVolume& mask, std::int64_t z) {
    if (z < 0 || z >= mask.nz) {
        throw ContractError("slice_boxes: slice " + std::to_string(z) + " outside [0, " +
                            std::to_string(mask.nz) + ")");
    }
    MaskVolume slice = MaskVolume::create(1, mask.ny, mask.nx, 1.0, 1.0, 1.0);
    const auto base = static_cast<std::size_t>(z * mask.ny * mask.nx);
    std::copy_n(mask.values.begin() + static_cast<std::ptrdiff_t>(base), slice.values.size(),
                slice.values.begin());
    std::vector<Box> out;
    for (const Lesion& comp : connected_components(slice, 26).lesions) {
        Box b;
        b.y0 = static_cast<double>(mask.ny);
        b.x0 = static_cast<double>(mask.nx);
        b.y1 = 0.0;
        b.x1 = 0.0;
        for (const std::int64_t v : comp.voxels) {
            const double y = static_cast<double>((v / mask.nx) % mask.ny);
            const double x = static_cast<double>(v % mask.nx);
            b.y0 = std::min(b.y0, y);
            b.x0 = std::min(b.x0, x);
            b.y1 = std::max(b.y1, y + 1.0);
            b.x1 = std::max(b.x1, x + 1.0);
        }
        out.push_back(b);
    }
    return out;
}

namespace {

struct Flagged {
    double score;
    bool tp;
};

// Greedy matching: within each image, predictions in descending score order
// claim the unmatched GT with the highest IoU >= threshold. Flags are fixed
// by this one pass over the full prediction set.
std::pair<std::vector<Flagged>, std::int64_t> flag_predictions(
    std::span<const DetectionRecord> records, double iou_thresh) {
    std::vector<Flagged> flags;
    std::int64_t total_gt = 0;
    for (const DetectionRecord& rec : records) {
        total_gt += static_cast<std::int64_t>(rec.ground_truth.size());
        std::vector<std::size_t> order(rec.predictions.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return rec.predictions[a].score > rec.predictions[b].score;
        });
        std::vector<bool> gt_used(rec.ground_truth.size(), false);
        for (const std::size_t pi : order) {
            const Box& p = rec.predictions[pi];
            double best = 0.0;
            std::size_t best_gt = rec.ground_truth.size();
            for (std::size_t gi = 0; gi < rec.ground_truth.size(); ++gi) {
                if (gt_used[gi]) {
                    continue;
                }
                const double iou = box_iou(p, rec.ground_truth[gi]);
                if (iou > best) {
                    best = iou;
                    best_gt = gi;
                }
            }
            if (best >= iou_thresh && best_gt < rec.ground_truth.size()) {
                gt_used[best_gt] = true;
                flags.push_back({p.score, true});
            } else {
                flags.push_back({p.score, false});
            }
        }
    }
    std::stable_sort(flags.begin(), flags.end(),
                     [](const Flagged& a, const Flagged& b) { return a.score > b.score; });
    return {std::move(flags), total_gt};
}

}  // namespace

std::vector<double> froc_sensitivity(std::span<const DetectionRecord> records,
                                     std::span<const double> fppi, double iou_thresh) {
    if (records.empty()) {
        throw ContractError("froc_sensitivity: no detection records");
    }
    auto [flags, total_gt] = flag_predictions(records, iou_thresh);
    const double n_images = static_cast<double>(records.size());

    // Candidate operating points: prefixes ending at a score boundary, so
    // tied scores enter together.
    std::vector<std::pair<double, double>> curve;  // (fppi, sensitivity)
    curve.emplace_back(0.0, 0.0);
    std::int64_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        tp += flags[i].tp;
        fp += !flags[i].tp;
        if (i + 1 < flags.size() && flags[i + 1].score == flags[i].score) {
            continue;
        }
        const double sens = total_gt > 0 ? static_cast<double>(tp) / static_cast<double>(total_gt)
                                         : 0.0;
        curve.emplace_back(static_cast<double>(fp) / n_images, sens);
    }

    std::vector<double> out;
    for (const double f : fppi) {
        if (!(f >= 0.0)) {
            throw ConfigError("froc_sensitivity: operating point must be >= 0");
        }
        double best = 0.0;
        for (const auto& [rate, sens] : curve) {
            if (rate <= f) {
                best = std::max(best, sens);
            }
        }
        out.push_back(best);
    }
    return out;
}

double ap50(std::span<const DetectionRecord> records, double iou_thresh) {
    if (records.empty()) {
        throw ContractError("ap50: no detection records");
    }
    auto [flags, total_gt] = flag_predictions(records, iou_thresh);
    if (total_gt == 0) {
        throw ContractError("ap50: no ground-truth boxes");
    }
    if (flags.empty()) {
        return 0.0;
    }

    std::vector<double> precision, recall;
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) {
        tp += flags[i].tp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
    }
    // All-point interpolation: precision envelope from the right.
    for (std::size_t i = precision.size() - 1; i > 0; --i) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

MaskVolume mask_and_postprocess(const MaskVolume& liver, const MaskVolume& lesion) {
    check_same_grid(liver, lesion, "mask_and_postprocess");
    MaskVolume out = lesion;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        out.values[i] = (lesion.values[i] != 0 && liver.values[i] != 0) ? 1 : 0;
    }
    return out;
}

// ---- reports / records -----------------------------------------------------------

namespace {

std::string trim_number(double v) {
    // Stable short decimal for JSON keys like "0.5", "1", "2".
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

std::string report_to_json(const MetricsReport& report) {
    nlohmann::ordered_json j;
    j["dice_per_case"] = report.dice_per_case;
    j["dice_s"] = report.strata.dice_s ? nlohmann::json(*report.strata.dice_s)
                                       : nlohmann::json(nullptr);
    j["dice_m"] = report.strata.dice_m ? nlohmann::json(*report.strata.dice_m)
                                       : nlohmann::json(nullptr);
    j["dice_l"] = report.strata.dice_l ? nlohmann::json(*report.strata.dice_l)
                                       : nlohmann::json(nullptr);
    auto& froc = j["froc"];
    froc = nlohmann::ordered_json::object();
    for (const auto& [fppi, sens] : report.froc) {
        froc[trim_number(fppi)] = sens;
    }
    j["ap50"] = report.ap_50 ? nlohmann::json(*report.ap_50) : nlohmann::json(nullptr);
    return j.dump(2) + "\n";
}

namespace {

nlohmann::ordered_json box_to_json(const Box& b, bool with_score) {
    nlohmann::ordered_json j;
    j["box"] = {b.y0, b.x0, b.y1, b.x1};
    if (with_score) {
        j["score"] = b.score;
    }
    return j;
}

Box box_from_json(const nlohmann::json& j, bool with_score, const std::string& where,
                  std::size_t offset) {
    const auto& arr = j.at("box");
    if (!arr.is_array() || arr.size() != 4) {
        throw ParseError(where + ": box must be [y0,x0,y1,x1]", offset);
    }
    Box b;
    b.y0 = arr[0].get<double>();
    b.x0 = arr[1].get<double>();
    b.y1 = arr[2].get<double>();
    b.x1 = arr[3].get<double>();
    if (b.y1 < b.y0 || b.x1 < b.x0) {
        throw ParseError(where + ": box corners must satisfy min <= max", offset);
    }
    if (with_score) {
        b.score = j.at("score").get<double>();
        if (!(b.score >= 0.0 && b.score <= 1.0)) {
            throw ParseError(where + ": score outside [0,1]", offset);
        }
    }
    return b;
}

}  // namespace

void write_detection_records(std::span<const DetectionRecord> records, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + tmp + " for writing");
        }
        for (const DetectionRecord& rec : records) {
            nlohmann::ordered_json j;
            j["image_id"] = rec.image_id;
            auto& preds = j["predictions"];
            preds = nlohmann::ordered_json::array();
            for (const Box& b : rec.predictions) {
                preds.push_back(box_to_json(b, true));
            }
            auto& gts = j["ground_truth"];
            gts = nlohmann::ordered_json::array();
            for (const Box& b : rec.ground_truth) {
                gts.push_back(box_to_json(b, false));
            }
            out << j.dump() << "\n";
        }
        if (!out) {
            throw IoError("write failed for " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
    }
}

std::vector<DetectionRecord> read_detection_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::vector<DetectionRecord> records;
    std::string line;
    std::size_t offset = 0;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            offset += 1;
            continue;
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(path + " line " + std::to_string(line_no) + ": " +
                                 std::string(e.what()),
                             offset + e.byte);
        }
        const std::string where = path + " line " + std::to_string(line_no);
        try {
            DetectionRecord rec;
            rec.image_id = j.at("image_id").get<std::string>();
            for (const auto& b : j.at("predictions")) {
                rec.predictions.push_back(box_from_json(b, true, where, offset));
            }
            for (const auto& b : j.at("ground_truth")) {
                rec.ground_truth.push_back(box_from_json(b, false, where, offset));
            }
            records.push_back(std::move(rec));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(where + ": " + std::string(e.what()), offset);
        }
        offset += line.size() + 1;
    }
    return records;
}

}  // namespace vatt
