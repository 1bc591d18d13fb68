#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "vatt/metrics.hpp"
#include "vatt/phantom.hpp"
#include "vatt/preprocess.hpp"
#include "vatt/tensor.hpp"
#include "vatt/va.hpp"

namespace vatt {

inline constexpr int kToyChannels = 16;
inline constexpr int kToyTrainHw = 32;   // training/inference resolution
inline constexpr int kToyVaReduction = 4;  // r=16 would collapse 16 channels to 1
inline constexpr int kToySpatialK = 5;  // spatial embed kernel at 32x32 maps
inline constexpr double kToyInputShift = 0.5;   // centers unit-space intensities
inline constexpr double kToyScoreSmooth = 0.02;  // slice-score label smoothing
inline constexpr double kToySegWeight = 0.7;     // seg vs score loss mix
inline constexpr double kToyScoreWeight = 0.3;
// Lesion pixels are a few percent of a slice; reweighting keeps the sparse
// positive gradient competitive with the background term.
inline constexpr double kToySegPosWeight = 4.0;

// Small 2.5D segmenter: three k=3 convs (3->16->16->16) into one feature
// level, a 1x1 segmentation head, a pooled slice-score head, and (optionally)
// volumetric attention gating between the backbone and the heads. Without VA
// it is a pure per-slab predictor.
struct ToyModel {
    Tensor w1, b1, w2, b2, w3, b3;  // backbone convs
    Tensor w_seg, b_seg;            // [1,16,1,1], [1]
    Tensor w_score, b_score;        // [1,16], [1,1]
    AttnMode mode = AttnMode::none;
    BagSpec bag;
    std::optional<VaParams> va;

    static ToyModel create(AttnMode mode, int bag_size = 9);
    void init_params(std::uint64_t seed);
    std::vector<Tensor> parameters() const;

    Tensor features(const Tensor& slab) const;  // [3,h,w] -> [16,h,w]
};

struct SliceOutput {
    Tensor seg_logits;   // [1,h,w]
    Tensor score_logit;  // [1,1]
};

// Prediction for target slice z from one precomputed feature map per slice;
// bag members reuse those shared maps, clamped at the volume boundary.
SliceOutput predict_slice(const ToyModel& m, std::span<const Tensor> feats, std::int64_t z);

struct TrainResult {
    std::vector<double> loss_curve;  // one entry per epoch
    bool trend_ok = true;            // windowed trend over window 10
};

// Deterministic full-batch gradient descent: initializes the model from
// `seed`, then optimizes 0.5*seg BCE + 0.5*score BCE over every slice of
// every phantom with a fixed learning rate. Non-finite numerics surface as
// NumericError naming the epoch and seed.
TrainResult train_toy(ToyModel& m, std::span<const Phantom> data, int epochs, double lr,
                      std::uint64_t seed);

struct PredictedCase {
    Volume prob;                      // full-resolution probabilities in [0,1]
    std::vector<double> slice_score;  // per-slice score in [0,1]
};

PredictedCase predict_case(const ToyModel& m, const Phantom& ph);

struct EvalResult {
    MetricsReport report;
    std::vector<double> per_case_dice;
    std::vector<DetectionRecord> records;  // one image per (case, slice)
};

// Threshold probabilities at 0.5, gate by the reference liver mask, then
// score: Dice per case, strata, FROC at {0.5,1,2} FPs/image over slices,
// AP50. Split out from eval_toy so oracle predictions can be scored too.
EvalResult evaluate_predictions(std::span<const PredictedCase> preds,
                                std::span<const Phantom> phantoms);

EvalResult eval_toy(const ToyModel& m, std::span<const Phantom> phantoms);

// Means of disjoint windows never increase by more than 2%.
bool loss_trend_ok(std::span<const double> curve, int window = 10);

}  // namespace vatt
