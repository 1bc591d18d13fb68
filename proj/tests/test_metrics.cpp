#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vatt/metrics.hpp"
#include "vatt/random.hpp"

using namespace vatt;

namespace {

MaskVolume blank_mask(std::int64_t nz, std::int64_t ny, std::int64_t nx, double dz = 1.0,
                      double dy = 1.0, double dx = 1.0) {
    return MaskVolume::create(nz, ny, nx, dz, dy, dx);
}

MaskVolume random_mask(std::uint64_t seed, std::int64_t nz, std::int64_t ny, std::int64_t nx,
                       double fg_prob) {
    MaskVolume m = blank_mask(nz, ny, nx);
    Rng rng(seed);
    for (auto& v : m.values) {
        v = rng.uniform() < fg_prob ? 1 : 0;
    }
    return m;
}

// Plain voxel-loop Dice, independent of the library implementation.
double dice_oracle(const MaskVolume& a, const MaskVolume& b) {
    std::int64_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        if (a.values[i] != 0) ++na;
        if (b.values[i] != 0) ++nb;
        if (a.values[i] != 0 && b.values[i] != 0) ++inter;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

// Breadth-first labeling with an explicit queue: an independent take on
// connected components used as the oracle for the flood-fill in the library.
std::vector<std::vector<std::int64_t>> components_oracle(const MaskVolume& m, int connectivity) {
    const std::int64_t nz = m.nz, ny = m.ny, nx = m.nx;
    std::vector<bool> seen(m.values.size(), false);
    std::vector<std::vector<std::int64_t>> comps;
    for (std::int64_t s = 0; s < m.size(); ++s) {
        if (m.values[static_cast<std::size_t>(s)] == 0 || seen[static_cast<std::size_t>(s)]) {
            continue;
        }
        std::vector<std::int64_t> comp;
        std::deque<std::int64_t> queue{s};
        seen[static_cast<std::size_t>(s)] = true;
        while (!queue.empty()) {
            const std::int64_t cur = queue.front();
            queue.pop_front();
            comp.push_back(cur);
            const std::int64_t z = cur / (ny * nx), y = (cur / nx) % ny, x = cur % nx;
            for (std::int64_t oz = -1; oz <= 1; ++oz) {
                for (std::int64_t oy = -1; oy <= 1; ++oy) {
                    for (std::int64_t ox = -1; ox <= 1; ++ox) {
                        const std::int64_t manhattan = std::abs(oz) + std::abs(oy) + std::abs(ox);
                        if (manhattan == 0) continue;
                        if (connectivity == 6 && manhattan != 1) continue;
                        const std::int64_t z2 = z + oz, y2 = y + oy, x2 = x + ox;
                        if (z2 < 0 || z2 >= nz || y2 < 0 || y2 >= ny || x2 < 0 || x2 >= nx) {
                            continue;
                        }
                        const auto n = static_cast<std::size_t>((z2 * ny + y2) * nx + x2);
                        if (m.values[n] != 0 && !seen[n]) {
                            seen[n] = true;
                            queue.push_back(static_cast<std::int64_t>(n));
                        }
                    }
                }
            }
        }
        std::sort(comp.begin(), comp.end());
        comps.push_back(std::move(comp));
    }
    std::sort(comps.begin(), comps.end());
    return comps;
}

double iou_oracle(const Box& a, const Box& b) {
    const double iy = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double ix = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double inter = iy * ix;
    const double uni = (a.y1 - a.y0) * (a.x1 - a.x0) + (b.y1 - b.y0) * (b.x1 - b.x0) - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

// Exhaustive threshold sweep: for every distinct score threshold, rebuild the
// kept prediction set from scratch, rerun greedy matching per image, and take
// the best sensitivity whose FP rate stays within the operating point.
std::vector<double> froc_oracle(const std::vector<DetectionRecord>& records,
                                const std::vector<double>& fppi, double iou_thresh) {
    std::vector<double> thresholds;
    for (const auto& rec : records) {
        for (const auto& p : rec.predictions) thresholds.push_back(p.score);
    }
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    std::vector<std::pair<double, double>> sweep{{0.0, 0.0}};  // empty prediction set
    for (const double t : thresholds) {
        std::int64_t tp = 0, fp = 0, total_gt = 0;
        for (const auto& rec : records) {
            total_gt += static_cast<std::int64_t>(rec.ground_truth.size());
            std::vector<const Box*> kept;
            for (const auto& p : rec.predictions) {
                if (p.score >= t) kept.push_back(&p);
            }
            std::stable_sort(kept.begin(), kept.end(),
                             [](const Box* a, const Box* b) { return a->score > b->score; });
            std::vector<bool> used(rec.ground_truth.size(), false);
            for (const Box* p : kept) {
                double best = 0.0;
                std::size_t best_gt = rec.ground_truth.size();
                for (std::size_t gi = 0; gi < rec.ground_truth.size(); ++gi) {
                    if (used[gi]) continue;
                    const double iou = iou_oracle(*p, rec.ground_truth[gi]);
                    if (iou > best) {
                        best = iou;
                        best_gt = gi;
                    }
                }
                if (best_gt < rec.ground_truth.size() && best >= iou_thresh) {
                    used[best_gt] = true;
                    ++tp;
                } else {
                    ++fp;
                }
            }
        }
        const double sens =
            total_gt > 0 ? static_cast<double>(tp) / static_cast<double>(total_gt) : 0.0;
        sweep.emplace_back(static_cast<double>(fp) / static_cast<double>(records.size()), sens);
    }

    std::vector<double> out;
    for (const double f : fppi) {
        double best = 0.0;
        for (const auto& [rate, sens] : sweep) {
            if (rate <= f) best = std::max(best, sens);
        }
        out.push_back(best);
    }
    return out;
}

Box unit_box(double y, double x, double score = 1.0) {
    return {y, x, y + 1.0, x + 1.0, score};
}

std::vector<DetectionRecord> random_records(std::uint64_t seed, int n_images) {
    // Boxes on a coarse grid so overlaps at IoU >= 0.5 actually occur, and
    // scores quantized to one decimal so ties cross image boundaries.
    Rng rng(seed);
    std::vector<DetectionRecord> records;
    for (int i = 0; i < n_images; ++i) {
        DetectionRecord rec;
        rec.image_id = "img" + std::to_string(i);
        const int n_gt = rng.uniform_int(0, 3);
        for (int g = 0; g < n_gt; ++g) {
            rec.ground_truth.push_back(unit_box(static_cast<double>(rng.uniform_int(0, 4)),
                                                static_cast<double>(rng.uniform_int(0, 4))));
        }
        const int n_pred = rng.uniform_int(0, 5);
        for (int p = 0; p < n_pred; ++p) {
            Box b = unit_box(static_cast<double>(rng.uniform_int(0, 4)) +
                                 0.25 * static_cast<double>(rng.uniform_int(0, 2)),
                             static_cast<double>(rng.uniform_int(0, 4)));
            b.score = 0.1 * static_cast<double>(rng.uniform_int(0, 10));
            rec.predictions.push_back(b);
        }
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace

// ---- dice ----------------------------------------------------------------------

TEST_CASE("dice handles identity, disjointness, and partial overlap") {
    MaskVolume a = blank_mask(1, 2, 4);
    a.values = {1, 1, 1, 1, 0, 0, 0, 0};
    CHECK(dice(a, a) == 1.0);

    MaskVolume b = blank_mask(1, 2, 4);
    b.values = {0, 0, 0, 0, 1, 1, 1, 1};
    CHECK(dice(a, b) == 0.0);

    // |a| = 4, |b| = 4, overlap 2 -> 2*2 / 8 = 0.5.
    MaskVolume c = blank_mask(1, 2, 4);
    c.values = {0, 0, 1, 1, 1, 1, 0, 0};
    CHECK(dice(a, c) == 0.5);

    MaskVolume empty1 = blank_mask(1, 2, 4);
    MaskVolume empty2 = blank_mask(1, 2, 4);
    CHECK(dice(empty1, empty2) == 1.0);  // empty vs empty counts as perfect
    CHECK(dice(a, empty1) == 0.0);
}

TEST_CASE("dice is symmetric and bounded on random masks") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const MaskVolume a = random_mask(derive_seed(900, "a", seed), 4, 5, 6, 0.4);
        const MaskVolume b = random_mask(derive_seed(900, "b", seed), 4, 5, 6, 0.4);
        const double d = dice(a, b);
        CHECK(d == dice(b, a));
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
        CHECK(d == dice_oracle(a, b));
        bool nonempty = false;
        for (auto v : a.values) nonempty |= v != 0;
        if (nonempty) {
            CHECK(dice(a, a) == 1.0);
        }
    }
}

TEST_CASE("dice rejects mismatched grids") {
    CHECK_THROWS_AS(dice(blank_mask(1, 2, 3), blank_mask(1, 3, 2)), DimensionError);
}

TEST_CASE("dice_per_case averages per-volume dice") {
    MaskVolume full = blank_mask(1, 2, 2);
    full.values = {1, 1, 1, 1};
    MaskVolume empty = blank_mask(1, 2, 2);

    // Case dice {1.0, 0.0} -> mean 0.5.
    std::vector<MaskVolume> pred = {full, empty};
    std::vector<MaskVolume> gt = {full, full};
    CHECK(dice_per_case(pred, gt) == 0.5);

    // Single case: its own dice.
    std::vector<MaskVolume> one_pred = {full};
    std::vector<MaskVolume> one_gt = {full};
    CHECK(dice_per_case(one_pred, one_gt) == 1.0);
}

TEST_CASE("dice_per_case matches a naive per-case loop over 10 synthetic cases") {
    std::vector<MaskVolume> pred, gt;
    for (std::uint64_t i = 0; i < 10; ++i) {
        pred.push_back(random_mask(derive_seed(901, "pred", i), 3, 4, 5, 0.35));
        gt.push_back(random_mask(derive_seed(901, "gt", i), 3, 4, 5, 0.35));
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        acc += dice_oracle(pred[i], gt[i]);
    }
    const double expected = acc / 10.0;
    CHECK(std::abs(dice_per_case(pred, gt) - expected) <= 1e-12);
}

TEST_CASE("dice_per_case rejects unpaired or empty case lists") {
    std::vector<MaskVolume> two = {blank_mask(1, 2, 2), blank_mask(1, 2, 2)};
    std::vector<MaskVolume> one = {blank_mask(1, 2, 2)};
    std::vector<MaskVolume> none;
    CHECK_THROWS_AS(dice_per_case(two, one), ContractError);
    CHECK_THROWS_AS(dice_per_case(none, none), ContractError);
}

TEST_CASE("select_label isolates a single label as a binary mask") {
    MaskVolume m = blank_mask(1, 1, 6);
    m.values = {0, 1, 2, 2, 1, 0};
    const MaskVolume liver = select_label(m, 1);
    const MaskVolume lesion = select_label(m, 2);
    CHECK(liver.values == std::vector<std::uint8_t>{0, 1, 0, 0, 1, 0});
    CHECK(lesion.values == std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0});
}

// ---- connected components --------------------------------------------------------

TEST_CASE("connected_components separates isolated voxels and honors connectivity") {
    MaskVolume m = blank_mask(3, 4, 4);
    m.at(0, 0, 0) = 1;
    m.at(2, 3, 3) = 1;
    CHECK(connected_components(m, 26).lesions.size() == 2);
    CHECK(connected_components(m, 6).lesions.size() == 2);

    // Diagonal neighbors: one component under 26-connectivity, two under 6.
    MaskVolume diag = blank_mask(1, 2, 2);
    diag.at(0, 0, 0) = 1;
    diag.at(0, 1, 1) = 1;
    CHECK(connected_components(diag, 26).lesions.size() == 1);
    CHECK(connected_components(diag, 6).lesions.size() == 2);

    // Face neighbors: one component either way.
    MaskVolume face = blank_mask(1, 1, 2);
    face.values = {1, 1};
    CHECK(connected_components(face, 26).lesions.size() == 1);
    CHECK(connected_components(face, 6).lesions.size() == 1);
}

TEST_CASE("connected_components orders components by first voxel and keeps voxels sorted") {
    MaskVolume m = blank_mask(2, 3, 3);
    m.at(1, 2, 2) = 1;  // later in scan order
    m.at(0, 0, 1) = 1;
    m.at(0, 0, 2) = 1;
    const LesionSet set = connected_components(m, 26);
    REQUIRE(set.lesions.size() == 2);
    CHECK(set.lesions[0].voxels == std::vector<std::int64_t>{1, 2});
    CHECK(set.lesions[1].voxels == std::vector<std::int64_t>{17});
    for (const Lesion& lesion : set.lesions) {
        CHECK(lesion.diameter_mm > 0.0);
        CHECK(std::is_sorted(lesion.voxels.begin(), lesion.voxels.end()));
    }
    CHECK(set.dz == m.dz);
}

TEST_CASE("connected_components matches a breadth-first oracle on random blob fields") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const MaskVolume m = random_mask(derive_seed(902, "blob", seed), 9, 11, 13, 0.35);
        for (const int connectivity : {6, 26}) {
            const LesionSet set = connected_components(m, connectivity);
            std::vector<std::vector<std::int64_t>> got;
            got.reserve(set.lesions.size());
            for (const Lesion& lesion : set.lesions) {
                got.push_back(lesion.voxels);
            }
            std::sort(got.begin(), got.end());
            CHECK(got == components_oracle(m, connectivity));
        }
    }
}

TEST_CASE("6-connectivity never yields fewer components than 26-connectivity") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const MaskVolume m = random_mask(derive_seed(903, "conn", seed), 7, 9, 8, 0.3);
        CHECK(connected_components(m, 6).lesions.size() >=
              connected_components(m, 26).lesions.size());
    }
}

TEST_CASE("connected_components components are pairwise disjoint and cover the foreground") {
    const MaskVolume m = random_mask(904, 6, 8, 10, 0.4);
    const LesionSet set = connected_components(m, 26);
    std::set<std::int64_t> all;
    std::size_t total = 0;
    for (const Lesion& lesion : set.lesions) {
        total += lesion.voxels.size();
        all.insert(lesion.voxels.begin(), lesion.voxels.end());
    }
    CHECK(all.size() == total);  // no voxel claimed twice
    std::size_t fg = 0;
    for (auto v : m.values) fg += v != 0;
    CHECK(total == fg);
}

TEST_CASE("connected_components rejects unsupported connectivity") {
    CHECK_THROWS_AS(connected_components(blank_mask(1, 1, 1), 18), ConfigError);
}

// ---- lesion diameter -------------------------------------------------------------

TEST_CASE("lesion_diameter closed forms") {
    const double pi = 3.14159265358979323846;
    // One 1 mm^3 voxel: 2*(3/(4*pi))^(1/3) ~ 1.2407 mm.
    const double d1 = lesion_diameter(1, 1.0, 1.0, 1.0);
    CHECK(std::abs(d1 - 2.0 * std::cbrt(3.0 / (4.0 * pi))) <= 1e-12);
    CHECK(std::abs(d1 - 1.2407) <= 1e-4);

    // Eight voxels: volume x8 -> diameter exactly x2.
    CHECK(std::abs(lesion_diameter(8, 1.0, 1.0, 1.0) - 2.0 * d1) <= 1e-12);

    // Anisotropic spacing enters through the voxel volume only.
    CHECK(std::abs(lesion_diameter(1, 2.0, 3.0, 4.0) - lesion_diameter(24, 1.0, 1.0, 1.0)) <=
          1e-12);
}

TEST_CASE("lesion_diameter of a rasterized 10mm-radius sphere is close to 20mm") {
    MaskVolume m = blank_mask(25, 25, 25);
    const double c = 12.0;
    for (std::int64_t z = 0; z < 25; ++z) {
        for (std::int64_t y = 0; y < 25; ++y) {
            for (std::int64_t x = 0; x < 25; ++x) {
                const double r2 = (static_cast<double>(z) - c) * (static_cast<double>(z) - c) +
                                  (static_cast<double>(y) - c) * (static_cast<double>(y) - c) +
                                  (static_cast<double>(x) - c) * (static_cast<double>(x) - c);
                if (r2 <= 100.0) m.at(z, y, x) = 1;
            }
        }
    }
    const LesionSet set = connected_components(m, 26);
    REQUIRE(set.lesions.size() == 1);
    CHECK(std::abs(set.lesions[0].diameter_mm - 20.0) <= 1.0);  // within 5%
}

TEST_CASE("lesion_diameter rejects empty components and bad spacing") {
    CHECK_THROWS_AS(lesion_diameter(0, 1.0, 1.0, 1.0), ContractError);
    CHECK_THROWS_AS(lesion_diameter(4, 0.0, 1.0, 1.0), ContractError);
}

// ---- stratified dice -------------------------------------------------------------

TEST_CASE("stratified_dice buckets by equivalent-sphere diameter at 15mm and 30mm") {
    // 10mm isotropic voxels: 1 voxel -> 12.41mm (small), 2 voxels -> 15.63mm
    // (medium), 15 voxels -> 30.60mm (large).
    MaskVolume single = blank_mask(1, 8, 40, 10.0, 10.0, 10.0);
    single.at(0, 1, 1) = 1;
    StratifiedDice s = stratified_dice(single, single);
    REQUIRE(s.dice_s.has_value());
    CHECK(*s.dice_s == 1.0);
    CHECK_FALSE(s.dice_m.has_value());
    CHECK_FALSE(s.dice_l.has_value());

    MaskVolume pair = blank_mask(1, 8, 40, 10.0, 10.0, 10.0);
    pair.at(0, 1, 10) = 1;
    pair.at(0, 1, 11) = 1;
    s = stratified_dice(pair, pair);
    CHECK_FALSE(s.dice_s.has_value());
    REQUIRE(s.dice_m.has_value());
    CHECK(*s.dice_m == 1.0);
    CHECK_FALSE(s.dice_l.has_value());

    MaskVolume big = blank_mask(1, 8, 40, 10.0, 10.0, 10.0);
    for (std::int64_t y = 4; y <= 6; ++y) {
        for (std::int64_t x = 20; x <= 24; ++x) big.at(0, y, x) = 1;  // 15 voxels
    }
    s = stratified_dice(big, big);
    CHECK_FALSE(s.dice_s.has_value());
    CHECK_FALSE(s.dice_m.has_value());
    REQUIRE(s.dice_l.has_value());
    CHECK(*s.dice_l == 1.0);
}

namespace {

// Shared 4-lesion fixture on 10mm voxels. Ground truth:
//   L1 small  (1 voxel)   at (0,1,1)
//   L2 medium (2 voxels)  at (0,1,10..11)
//   L3 large  (15 voxels) at (0,4..6,20..24)
//   L4 small  (1 voxel)   at (0,6,1)
void fill_strata_gt(MaskVolume& gt) {
    gt.at(0, 1, 1) = 1;
    gt.at(0, 1, 10) = 1;
    gt.at(0, 1, 11) = 1;
    for (std::int64_t y = 4; y <= 6; ++y) {
        for (std::int64_t x = 20; x <= 24; ++x) gt.at(0, y, x) = 1;
    }
    gt.at(0, 6, 1) = 1;
}

}  // namespace

TEST_CASE("stratified_dice scores a perfectly segmented multi-stratum case as all ones") {
    MaskVolume gt = blank_mask(1, 8, 40, 10.0, 10.0, 10.0);
    fill_strata_gt(gt);
    const StratifiedDice s = stratified_dice(gt, gt);
    REQUIRE(s.dice_s.has_value());
    REQUIRE(s.dice_m.has_value());
    REQUIRE(s.dice_l.has_value());
    CHECK(*s.dice_s == 1.0);
    CHECK(*s.dice_m == 1.0);
    CHECK(*s.dice_l == 1.0);
}

TEST_CASE("stratified_dice matches the hand-computed 4-lesion fixture") {
    MaskVolume gt = blank_mask(1, 8, 40, 10.0, 10.0, 10.0);
    fill_strata_gt(gt);

    MaskVolume pred = blank_mask(1, 8, 40, 10.0, 10.0, 10.0);
    // L1: hit its voxel plus one neighbor      -> 2*1/(2+1) = 2/3
    pred.at(0, 1, 1) = 1;
    pred.at(0, 1, 2) = 1;
    // L2: one hit, two misses in its region    -> 2*1/(3+2) = 0.4
    pred.at(0, 1, 10) = 1;
    pred.at(0, 1, 12) = 1;
    pred.at(0, 2, 10) = 1;
    // L3: 10 of its 15 voxels, nothing extra   -> 2*10/(10+15) = 0.8
    for (std::int64_t y = 4; y <= 5; ++y) {
        for (std::int64_t x = 20; x <= 24; ++x) pred.at(0, y, x) = 1;
    }
    // L4: exact                                 -> 1.0
    pred.at(0, 6, 1) = 1;
    // Stray false positive more than 2 voxels from every lesion: attributed
    // to none of them, so it must not perturb any stratum.
    pred.at(0, 1, 35) = 1;

    const StratifiedDice s = stratified_dice(pred, gt);
    REQUIRE(s.dice_s.has_value());
    REQUIRE(s.dice_m.has_value());
    REQUIRE(s.dice_l.has_value());
    CHECK(std::abs(*s.dice_s - (2.0 / 3.0 + 1.0) / 2.0) <= 1e-12);  // mean of L1, L4
    CHECK(std::abs(*s.dice_m - 0.4) <= 1e-12);
    CHECK(std::abs(*s.dice_l - 0.8) <= 1e-12);
}

TEST_CASE("stratified_dice reports empty strata as absent") {
    MaskVolume gt = blank_mask(2, 4, 4);
    const StratifiedDice none = stratified_dice(gt, gt);  // no lesions at all
    CHECK_FALSE(none.dice_s.has_value());
    CHECK_FALSE(none.dice_m.has_value());
    CHECK_FALSE(none.dice_l.has_value());

    gt.at(0, 0, 0) = 1;  // one small lesion (1mm voxels)
    MaskVolume pred = blank_mask(2, 4, 4);
    const StratifiedDice s = stratified_dice(pred, gt);
    REQUIRE(s.dice_s.has_value());
    CHECK(*s.dice_s == 0.0);  // present but missed
    CHECK_FALSE(s.dice_m.has_value());
    CHECK_FALSE(s.dice_l.has_value());
}

TEST_CASE("stratified_dice rejects mismatched grids") {
    CHECK_THROWS_AS(stratified_dice(blank_mask(1, 2, 2), blank_mask(2, 2, 2)), DimensionError);
}

// ---- boxes and detection ----------------------------------------------------------

TEST_CASE("box_iou identity, disjointness, and hand-computed overlap") {
    const Box a{0.0, 0.0, 1.0, 1.0, 1.0};
    CHECK(box_iou(a, a) == 1.0);
    CHECK(box_iou(a, Box{5.0, 5.0, 6.0, 6.0, 1.0}) == 0.0);

    // Unit squares shifted by half: intersection 0.5, union 1.5 -> 1/3.
    const Box b{0.0, 0.5, 1.0, 1.5, 1.0};
    CHECK(std::abs(box_iou(a, b) - 1.0 / 3.0) <= 1e-15);

    // Degenerate zero-area boxes produce 0, not NaN.
    const Box point{2.0, 2.0, 2.0, 2.0, 1.0};
    CHECK(box_iou(point, point) == 0.0);

    CHECK_THROWS_AS(box_iou(Box{1.0, 0.0, 0.0, 1.0, 1.0}, a), ContractError);
}

TEST_CASE("slice_boxes finds per-slice component bounds") {
    MaskVolume m = blank_mask(2, 8, 8);
    for (std::int64_t y = 1; y < 4; ++y) {
        for (std::int64_t x = 2; x < 5; ++x) {
            m.at(0, y, x) = 1;
        }
    }
    m.at(0, 6, 6) = 1;
    m.at(1, 0, 7) = 2;  // any nonzero label is foreground

    const std::vector<Box> z0 = slice_boxes(m, 0);
    REQUIRE(z0.size() == 2);
    CHECK(z0[0].y0 == 1.0);
    CHECK(z0[0].x0 == 2.0);
    CHECK(z0[0].y1 == 4.0);
    CHECK(z0[0].x1 == 5.0);
    CHECK(z0[1].y0 == 6.0);
    CHECK(z0[1].x1 == 7.0);

    const std::vector<Box> z1 = slice_boxes(m, 1);
    REQUIRE(z1.size() == 1);
    CHECK(z1[0].x0 == 7.0);
    CHECK(slice_boxes(m, 0).size() == 2);  // pure: repeated calls agree

    CHECK_THROWS_AS(slice_boxes(m, 2), ContractError);
    CHECK_THROWS_AS(slice_boxes(m, -1), ContractError);
}

TEST_CASE("froc_sensitivity saturates for a perfect detector") {
    std::vector<DetectionRecord> records;
    for (int i = 0; i < 4; ++i) {
        DetectionRecord rec;
        rec.image_id = "case" + std::to_string(i);
        rec.ground_truth = {unit_box(0.0, 0.0), unit_box(3.0, 3.0)};
        rec.predictions = rec.ground_truth;  // scores default to 1.0
        records.push_back(std::move(rec));
    }
    const std::vector<double> fppi = {0.0, 0.5, 1.0, 2.0};
    const std::vector<double> out = froc_sensitivity(records, fppi);
    for (const double s : out) {
        CHECK(s == 1.0);
    }
}

TEST_CASE("froc_sensitivity matches the threshold-sweep oracle on a 4-image fixture") {
    // Six scored predictions over four images, three GT boxes total. Sorted by
    // score: TP(0.9), FP(0.8), FP(0.7), FP(0.7) tie, TP(0.5), FP(0.4).
    std::vector<DetectionRecord> records(4);
    records[0].image_id = "a";
    records[0].ground_truth = {unit_box(0.0, 0.0)};
    records[0].predictions = {unit_box(0.0, 0.0, 0.9), unit_box(5.0, 5.0, 0.8)};
    records[1].image_id = "b";
    records[1].ground_truth = {unit_box(2.0, 2.0)};
    records[1].predictions = {unit_box(6.0, 6.0, 0.7), unit_box(2.0, 2.0, 0.5)};
    records[2].image_id = "c";
    records[2].ground_truth = {unit_box(1.0, 1.0)};  // never found
    records[2].predictions = {unit_box(7.0, 7.0, 0.7)};
    records[3].image_id = "d";
    records[3].predictions = {unit_box(4.0, 4.0, 0.4)};

    // Hand sweep: prefix FP counts/4 give FPPI 0, .25, .75, .75, 1; the TP at
    // score 0.5 lands after three FPs, so sensitivity 2/3 needs FPPI 0.75.
    const std::vector<double> fppi = {0.5, 1.0, 2.0};
    const std::vector<double> out = froc_sensitivity(records, fppi);
    REQUIRE(out.size() == 3);
    CHECK(out[0] == 1.0 / 3.0);
    CHECK(out[1] == 2.0 / 3.0);
    CHECK(out[2] == 2.0 / 3.0);

    const std::vector<double> grid = {0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 8.0};
    CHECK(froc_sensitivity(records, grid) == froc_oracle(records, grid, 0.5));
}

TEST_CASE("froc_sensitivity matches the threshold-sweep oracle on random record sets") {
    const std::vector<double> grid = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0};
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        const std::vector<DetectionRecord> records = random_records(derive_seed(905, "froc", seed), 6);
        bool any_gt = false;
        for (const auto& rec : records) any_gt |= !rec.ground_truth.empty();
        if (!any_gt) continue;
        CHECK(froc_sensitivity(records, grid) == froc_oracle(records, grid, 0.5));
    }
}

TEST_CASE("froc_sensitivity is nondecreasing in the operating point") {
    const std::vector<double> grid = {0.0, 0.25, 0.5, 0.75, 1.0, 2.0, 4.0, 8.0};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const std::vector<DetectionRecord> records = random_records(derive_seed(906, "mono", seed), 5);
        const std::vector<double> out = froc_sensitivity(records, grid);
        for (std::size_t i = 1; i < out.size(); ++i) {
            CHECK(out[i - 1] <= out[i]);
        }
    }
}

TEST_CASE("froc_sensitivity rejects empty records and negative operating points") {
    std::vector<DetectionRecord> none;
    const std::vector<double> fppi = {1.0};
    CHECK_THROWS_AS(froc_sensitivity(none, fppi), ContractError);

    std::vector<DetectionRecord> one(1);
    one[0].image_id = "x";
    one[0].ground_truth = {unit_box(0.0, 0.0)};
    const std::vector<double> bad = {-1.0};
    CHECK_THROWS_AS(froc_sensitivity(one, bad), ConfigError);
}

TEST_CASE("ap50 trivial detectors") {
    std::vector<DetectionRecord> perfect(2);
    perfect[0].image_id = "a";
    perfect[0].ground_truth = {unit_box(0.0, 0.0), unit_box(3.0, 0.0)};
    perfect[0].predictions = perfect[0].ground_truth;
    perfect[1].image_id = "b";
    perfect[1].ground_truth = {unit_box(1.0, 1.0)};
    perfect[1].predictions = perfect[1].ground_truth;
    CHECK(ap50(perfect) == 1.0);

    std::vector<DetectionRecord> useless = perfect;
    useless[0].predictions = {unit_box(7.0, 7.0, 0.9)};
    useless[1].predictions = {unit_box(7.0, 7.0, 0.8)};
    CHECK(ap50(useless) == 0.0);
}

TEST_CASE("ap50 matches the hand-computed 5-box PR staircase") {
    // Three GT boxes, five predictions in score order:
    //   0.95 TP  r=1/3 p=1
    //   0.90 FP  r=1/3 p=1/2
    //   0.80 TP  r=2/3 p=2/3
    //   0.70 FP  r=2/3 p=2/4
    //   0.60 TP  r=1   p=3/5
    // Envelope from the right: 1, 2/3, 2/3, 3/5, 3/5.
    // AP = (1/3)*1 + (1/3)*(2/3) + (1/3)*(3/5) = 34/45.
    std::vector<DetectionRecord> records(2);
    records[0].image_id = "a";
    records[0].ground_truth = {unit_box(0.0, 0.0), unit_box(4.0, 4.0)};
    records[0].predictions = {unit_box(0.0, 0.0, 0.95), unit_box(8.0, 8.0, 0.9),
                              unit_box(4.0, 4.0, 0.6)};
    records[1].image_id = "b";
    records[1].ground_truth = {unit_box(2.0, 2.0)};
    records[1].predictions = {unit_box(2.0, 2.0, 0.8), unit_box(8.0, 0.0, 0.7)};

    CHECK(std::abs(ap50(records) - 34.0 / 45.0) <= 1e-12);

    // Uniform positive score rescaling must not change the result.
    for (const double scale : {0.5, 0.001}) {
        std::vector<DetectionRecord> scaled = records;
        for (auto& rec : scaled) {
            for (auto& p : rec.predictions) p.score *= scale;
        }
        CHECK(ap50(scaled) == ap50(records));
    }
}

TEST_CASE("ap50 rejects record sets with no ground truth") {
    std::vector<DetectionRecord> none;
    CHECK_THROWS_AS(ap50(none), ContractError);

    std::vector<DetectionRecord> no_gt(2);
    no_gt[0].image_id = "a";
    no_gt[0].predictions = {unit_box(0.0, 0.0, 0.5)};
    no_gt[1].image_id = "b";
    CHECK_THROWS_AS(ap50(no_gt), ContractError);
}

// ---- postprocess -------------------------------------------------------------

TEST_CASE("mask_and_postprocess gates lesions by the liver mask") {
    MaskVolume liver = blank_mask(1, 4, 4);
    for (std::int64_t y = 0; y < 3; ++y) {
        for (std::int64_t x = 0; x < 3; ++x) liver.at(0, y, x) = 1;
    }
    MaskVolume inside = blank_mask(1, 4, 4);
    inside.at(0, 1, 1) = 1;
    CHECK(mask_and_postprocess(liver, inside).values == inside.values);

    MaskVolume outside = blank_mask(1, 4, 4);
    outside.at(0, 3, 3) = 1;
    const MaskVolume gated = mask_and_postprocess(liver, outside);
    for (auto v : gated.values) {
        CHECK(v == 0);
    }

    CHECK_THROWS_AS(mask_and_postprocess(liver, blank_mask(1, 4, 5)), DimensionError);
}

TEST_CASE("mask_and_postprocess equals the voxel-loop oracle on random masks") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const MaskVolume liver = random_mask(derive_seed(907, "liver", seed), 4, 5, 6, 0.5);
        const MaskVolume lesion = random_mask(derive_seed(907, "lesion", seed), 4, 5, 6, 0.5);
        const MaskVolume out = mask_and_postprocess(liver, lesion);
        for (std::size_t i = 0; i < out.values.size(); ++i) {
            const std::uint8_t expected = liver.values[i] != 0 && lesion.values[i] != 0 ? 1 : 0;
            CHECK(out.values[i] == expected);
        }
    }
}

TEST_CASE("liver gating never lowers dice against ground truth inside the liver") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const MaskVolume liver = random_mask(derive_seed(908, "liver", seed), 4, 6, 6, 0.6);
        MaskVolume gt = random_mask(derive_seed(908, "gt", seed), 4, 6, 6, 0.4);
        for (std::size_t i = 0; i < gt.values.size(); ++i) {
            gt.values[i] = gt.values[i] != 0 && liver.values[i] != 0 ? 1 : 0;  // gt inside liver
        }
        const MaskVolume pred = random_mask(derive_seed(908, "pred", seed), 4, 6, 6, 0.4);
        const MaskVolume gated = mask_and_postprocess(liver, pred);
        CHECK(dice(gated, gt) + 1e-15 >= dice(pred, gt));
    }
}

// ---- report / records -------------------------------------------------------------

TEST_CASE("report_to_json emits ordered fields with null for absent strata") {
    MetricsReport report;
    report.dice_per_case = 0.5;
    report.strata.dice_s = 0.25;
    report.strata.dice_l = 0.75;  // medium stratum absent
    report.froc = {{0.5, 0.2}, {1.0, 0.4}, {2.0, 0.8}};
    report.ap_50 = 0.9;

    const std::string text = report_to_json(report);
    CHECK(text.back() == '\n');
    const nlohmann::json j = nlohmann::json::parse(text);
    CHECK(j.at("dice_per_case").get<double>() == 0.5);
    CHECK(j.at("dice_s").get<double>() == 0.25);
    CHECK(j.at("dice_m").is_null());
    CHECK(j.at("dice_l").get<double>() == 0.75);
    CHECK(j.at("froc").at("0.5").get<double>() == 0.2);
    CHECK(j.at("froc").at("1").get<double>() == 0.4);
    CHECK(j.at("froc").at("2").get<double>() == 0.8);
    CHECK(j.at("ap50").get<double>() == 0.9);

    // Stable key order, so byte-identical reports across runs are meaningful.
    const std::vector<std::string> keys = {"dice_per_case", "dice_s", "dice_m",
                                           "dice_l",        "froc",   "ap50"};
    std::size_t pos = 0;
    for (const std::string& key : keys) {
        const std::size_t at = text.find("\"" + key + "\"", pos);
        REQUIRE(at != std::string::npos);
        pos = at;
    }

    MetricsReport bare;
    const nlohmann::json j2 = nlohmann::json::parse(report_to_json(bare));
    CHECK(j2.at("ap50").is_null());
    CHECK(j2.at("froc").is_object());
    CHECK(j2.at("froc").empty());
}

TEST_CASE("detection records survive a JSONL round trip") {
    std::vector<DetectionRecord> records(3);
    records[0].image_id = "case-1";
    records[0].ground_truth = {Box{1.0, 2.0, 3.5, 4.25, 1.0}};
    records[0].predictions = {Box{1.0, 2.0, 3.0, 4.0, 0.875}, Box{0.0, 0.0, 0.5, 0.5, 0.125}};
    records[1].image_id = "case-2";  // empty predictions and GT
    records[2].image_id = "case-3";
    records[2].predictions = {Box{0.25, 0.5, 1.0, 1.5, 0.5}};

    const std::string path = "det_roundtrip.jsonl";
    write_detection_records(records, path);

    std::ifstream in(path);
    REQUIRE(in);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        ++lines;
        CHECK_NOTHROW(nlohmann::json::parse(line));  // one JSON object per line
    }
    CHECK(lines == 3);

    const std::vector<DetectionRecord> back = read_detection_records(path);
    REQUIRE(back.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(back[i].image_id == records[i].image_id);
        REQUIRE(back[i].predictions.size() == records[i].predictions.size());
        REQUIRE(back[i].ground_truth.size() == records[i].ground_truth.size());
        for (std::size_t p = 0; p < records[i].predictions.size(); ++p) {
            CHECK(back[i].predictions[p].y0 == records[i].predictions[p].y0);
            CHECK(back[i].predictions[p].x0 == records[i].predictions[p].x0);
            CHECK(back[i].predictions[p].y1 == records[i].predictions[p].y1);
            CHECK(back[i].predictions[p].x1 == records[i].predictions[p].x1);
            CHECK(back[i].predictions[p].score == records[i].predictions[p].score);
        }
        for (std::size_t g = 0; g < records[i].ground_truth.size(); ++g) {
            CHECK(back[i].ground_truth[g].y0 == records[i].ground_truth[g].y0);
            CHECK(back[i].ground_truth[g].x1 == records[i].ground_truth[g].x1);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("read_detection_records reports precise failures") {
    CHECK_THROWS_AS(read_detection_records("missing_dir/none.jsonl"), IoError);

    const std::string path = "det_bad.jsonl";
    const std::string line1 =
        R"({"image_id":"ok","predictions":[],"ground_truth":[]})";

    {
        std::ofstream out(path);
        out << line1 << "\n" << "{not json\n";
    }
    try {
        read_detection_records(path);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(e.byte_offset() > line1.size());  // inside line 2
    }

    {
        std::ofstream out(path);
        out << R"({"image_id":"x","predictions":[{"box":[0,0,1,1],"score":1.5}],"ground_truth":[]})"
            << "\n";
    }
    CHECK_THROWS_AS(read_detection_records(path), ParseError);  // score outside [0,1]

    {
        std::ofstream out(path);
        out << R"({"image_id":"x","predictions":[],"ground_truth":[{"box":[2,0,1,1]}]})" << "\n";
    }
    CHECK_THROWS_AS(read_detection_records(path), ParseError);  // reversed corners

    {
        std::ofstream out(path);
        out << R"({"image_id":"x","predictions":[{"box":[0,0,1],"score":0.5}],"ground_truth":[]})"
            << "\n";
    }
    CHECK_THROWS_AS(read_detection_records(path), ParseError);  // box arity

    {
        std::ofstream out(path);
        out << R"({"predictions":[],"ground_truth":[]})" << "\n";
    }
    CHECK_THROWS_AS(read_detection_records(path), ParseError);  // missing image_id

    std::remove(path.c_str());
}
