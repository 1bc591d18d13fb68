#include "vatt/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vatt/errors.hpp"
#include "vatt/random.hpp"

namespace vatt {

namespace {

double fan_limit(std::int64_t fan_in, std::int64_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

// Kaiming-uniform limit (gain sqrt(2)) so relu layers preserve activation
// variance; Glorot limits shrink it ~2x per layer and stall the heads.
double relu_fan_limit(std::int64_t fan_in) {
    return std::sqrt(6.0 / static_cast<double>(fan_in));
}

Tensor slice_tensor(const Volume& v, std::int64_t z) {
    std::vector<double> data(static_cast<std::size_t>(v.ny * v.nx));
    const auto base = static_cast<std::size_t>(z * v.ny * v.nx);
    std::copy_n(v.values.begin() + static_cast<std::ptrdiff_t>(base), data.size(), data.begin());
    return Tensor::from_data({v.ny, v.nx}, std::move(data));
}

// In-plane downsample of every slice to hw x hw (z count unchanged).
Volume downsample_case(const Volume& v, int hw) {
    if (v.ny == hw && v.nx == hw) {
        return v;
    }
    Volume out = Volume::create(v.nz, hw, hw, v.dz, v.dy, v.dx, v.intensity);
    for (std::int64_t z = 0; z < v.nz; ++z) {
        const Tensor small = rescale_xy(slice_tensor(v, z), hw);
        const auto vals = small.values();
        std::copy(vals.begin(), vals.end(),
                  out.values.begin() + static_cast<std::ptrdiff_t>(z) * hw * hw);
    }
    return out;
}

struct CasePrep {
    std::vector<Tensor> slabs;          // [3,hw,hw] per slice, untracked
    std::vector<Tensor> seg_targets;    // [1,hw,hw] soft masks in [0,1]
    std::vector<Tensor> score_targets;  // [1,1] slice-has-lesion flags
};

CasePrep prepare_case(const Phantom& ph) {
    if (ph.vol.ny != ph.vol.nx) {
        throw ContractError("toy model expects square in-plane grids, got " +
                            std::to_string(ph.vol.ny) + "x" + std::to_string(ph.vol.nx));
    }
    CasePrep prep;
    const Volume small = downsample_case(ph.vol, kToyTrainHw);

    Volume lesion_f = Volume::create(ph.mask.nz, ph.mask.ny, ph.mask.nx, 1.0, 1.0, 1.0,
                                     IntensitySpace::unit);
    for (std::size_t i = 0; i < ph.mask.values.size(); ++i) {
        lesion_f.values[i] = ph.mask.values[i] == 2 ? 1.0 : 0.0;
    }
    const Volume small_gt = downsample_case(lesion_f, kToyTrainHw);

    for (std::int64_t z = 0; z < small.nz; ++z) {
        prep.slabs.push_back(stack_25d(small, z).channels);
        Tensor t = slice_tensor(small_gt, z);
        prep.seg_targets.push_back(reshape(t, {1, kToyTrainHw, kToyTrainHw}));
        bool has = false;
        for (std::int64_t y = 0; y < ph.mask.ny && !has; ++y) {
            for (std::int64_t x = 0; x < ph.mask.nx; ++x) {
                if (ph.mask.at(z, y, x) == 2) {
                    has = true;
                    break;
                }
            }
        }
        // Smoothed targets keep the optimum finite, so fixed-lr GD settles
        // instead of chasing unbounded logits.
        prep.score_targets.push_back(
            Tensor::full({1, 1}, has ? 1.0 - kToyScoreSmooth : kToyScoreSmooth));
    }
    return prep;
}

}  // namespace

ToyModel ToyModel::create(AttnMode mode, int bag_size) {
    ToyModel m;
    m.mode = mode;
    m.bag.n_images = bag_size;
    m.bag.validate();
    m.init_params(0);
    return m;
}

void ToyModel::init_params(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "toy-params"));
    const int c = kToyChannels;
    const double a1 = relu_fan_limit(3 * 9);
    w1 = Tensor::uniform({c, 3, 3, 3}, -a1, a1, rng, true);
    b1 = Tensor::zeros({c}, true);
    const double a2 = relu_fan_limit(c * 9);
    w2 = Tensor::uniform({c, c, 3, 3}, -a2, a2, rng, true);
    b2 = Tensor::zeros({c}, true);
    w3 = Tensor::uniform({c, c, 3, 3}, -a2, a2, rng, true);
    b3 = Tensor::zeros({c}, true);
    const double a_head = 0.5 * fan_limit(c, 1);
    w_seg = Tensor::uniform({1, c, 1, 1}, -a_head, a_head, rng, true);
    b_seg = Tensor::zeros({1}, true);
    w_score = Tensor::uniform({1, c}, -a_head, a_head, rng, true);
    b_score = Tensor::zeros({1, 1}, true);
    if (mode != AttnMode::none) {
        Rng va_rng(derive_seed(seed, "toy-va"));
        va = VaParams::init(c, kToyVaReduction, kToySpatialK, 1, bag.n_images, 1, va_rng);
    } else {
        va.reset();
    }
}

std::vector<Tensor> ToyModel::parameters() const {
    std::vector<Tensor> out = {w1, b1, w2, b2, w3, b3, w_seg, b_seg, w_score, b_score};
    if (va) {
        const std::vector<Tensor> vp = va->parameters();
        out.insert(out.end(), vp.begin(), vp.end());
    }
    return out;
}

Tensor ToyModel::features(const Tensor& slab) const {
    // Center unit-space intensities so the DC component does not dominate.
    const Tensor centered = add(slab, Tensor::full(slab.shape(), -kToyInputShift));
    Tensor h = relu(add_channel_bias(conv2d(centered, w1, 1), b1));
    h = relu(add_channel_bias(conv2d(h, w2, 1), b2));
    return relu(add_channel_bias(conv2d(h, w3, 1), b3));
}

SliceOutput predict_slice(const ToyModel& m, std::span<const Tensor> feats, std::int64_t z) {
    const auto n_z = static_cast<std::int64_t>(feats.size());
    TargetFeature tgt{feats[static_cast<std::size_t>(z)], 0};
    Tensor gated = tgt.map;
    if (m.mode != AttnMode::none) {
        const std::vector<int> offsets = m.bag.offsets();
        std::vector<Tensor> members;
        members.reserve(offsets.size());
        for (const int o : offsets) {
            const std::int64_t zi = std::clamp<std::int64_t>(z + o, 0, n_z - 1);
            members.push_back(feats[static_cast<std::size_t>(zi)]);
        }
        const FeatureBag bag = bag_features(members, offsets);
        gated = va_forward(tgt, bag, m.va->channel[0], m.va->spatial[0], m.mode).out;
    }
    SliceOutput out;
    out.seg_logits = add_channel_bias(conv2d(gated, m.w_seg, 0), m.b_seg);
    // Max pooling keeps the presence signal undiluted by lesion area.
    const Tensor pooled = reshape(global_max_pool(gated), {kToyChannels, 1});
    out.score_logit = add(matmul(m.w_score, pooled), m.b_score);
    return out;
}

bool loss_trend_ok(std::span<const double> curve, int window) {
    if (window < 1 || curve.size() < 2 * static_cast<std::size_t>(window)) {
        return true;
    }
    double prev = -1.0;
    bool first = true;
    for (std::size_t start = 0; start + static_cast<std::size_t>(window) <= curve.size();
         start += static_cast<std::size_t>(window)) {
        double mean = 0.0;
        for (int i = 0; i < window; ++i) {
            mean += curve[start + static_cast<std::size_t>(i)];
        }
        mean /= static_cast<double>(window);
        if (!first && mean > prev * 1.02) {
            return false;
        }
        prev = mean;
        first = false;
    }
    return true;
}

TrainResult train_toy(ToyModel& m, std::span<const Phantom> data, int epochs, double lr,
                      std::uint64_t seed) {
    if (data.empty()) {
        throw ContractError("train_toy: no training phantoms");
    }
    if (epochs < 0) {
        throw ConfigError("train_toy: epochs must be >= 0");
    }
    m.init_params(derive_seed(seed, "toy-init"));

    std::vector<CasePrep> prep;
    prep.reserve(data.size());
    for (const Phantom& ph : data) {
        prep.push_back(prepare_case(ph));
    }

    std::vector<Tensor> params = m.parameters();
    TrainResult result;
    result.loss_curve.reserve(static_cast<std::size_t>(epochs));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        try {
            Tape tape;
            TapeScope scope(tape);
            Tensor total = Tensor::zeros({1});
            std::int64_t count = 0;
            for (const CasePrep& cp : prep) {
                std::vector<Tensor> feats;
                feats.reserve(cp.slabs.size());
                for (const Tensor& slab : cp.slabs) {
                    feats.push_back(m.features(slab));
                }
                for (std::size_t z = 0; z < cp.slabs.size(); ++z) {
                    const SliceOutput so =
                        predict_slice(m, feats, static_cast<std::int64_t>(z));
                    const Tensor seg_loss = bce_with_logits_mean(
                        so.seg_logits, cp.seg_targets[z], kToySegPosWeight);
                    const Tensor score_loss = bce_with_logits_mean(so.score_logit,
                                                                   cp.score_targets[z]);
                    total = add(total, add(scale(seg_loss, kToySegWeight),
                                           scale(score_loss, kToyScoreWeight)));
                    ++count;
                }
            }
            const Tensor loss = scale(total, 1.0 / static_cast<double>(count));
            const double value = loss.item();
            if (!std::isfinite(value)) {
                throw NumericError("non-finite loss");
            }
            tape.backward(loss);
            if (lr != 0.0) {
                for (Tensor& p : params) {
                    const auto vals = p.values();
                    const auto grads = p.grad();
                    for (std::size_t i = 0; i < vals.size(); ++i) {
                        vals[i] -= lr * grads[i];
                    }
                }
            }
            for (Tensor& p : params) {
                p.zero_grad();
            }
            result.loss_curve.push_back(value);
        } catch (const NumericError& e) {
            throw NumericError("train_toy: epoch " + std::to_string(epoch) + " (seed " +
                               std::to_string(seed) + "): " + e.what());
        }
    }
    result.trend_ok = loss_trend_ok(result.loss_curve, 10);
    return result;
}

PredictedCase predict_case(const ToyModel& m, const Phantom& ph) {
    if (ph.vol.ny != ph.vol.nx) {
        throw ContractError("toy model expects square in-plane grids, got " +
                            std::to_string(ph.vol.ny) + "x" + std::to_string(ph.vol.nx));
    }
    const CasePrep prep = [&] {
        CasePrep p;
        const Volume small = downsample_case(ph.vol, kToyTrainHw);
        for (std::int64_t z = 0; z < small.nz; ++z) {
            p.slabs.push_back(stack_25d(small, z).channels);
        }
        return p;
    }();

    PredictedCase out;
    out.prob = Volume::create(ph.vol.nz, ph.vol.ny, ph.vol.nx, ph.vol.dz, ph.vol.dy, ph.vol.dx,
                              IntensitySpace::unit);
    out.slice_score.resize(static_cast<std::size_t>(ph.vol.nz), 0.0);

    std::vector<Tensor> feats;
    feats.reserve(prep.slabs.size());
    for (const Tensor& slab : prep.slabs) {
        feats.push_back(m.features(slab));
    }
    for (std::int64_t z = 0; z < ph.vol.nz; ++z) {
        const SliceOutput so = predict_slice(m, feats, z);
        const Tensor prob_small = sigmoid(so.seg_logits);
        const Tensor full =
            rescale_xy(reshape(prob_small, {kToyTrainHw, kToyTrainHw}),
                       static_cast<int>(ph.vol.ny));
        const auto vals = full.values();
        std::copy(vals.begin(), vals.end(),
                  out.prob.values.begin() +
                      static_cast<std::ptrdiff_t>(z * ph.vol.ny * ph.vol.nx));
        out.slice_score[static_cast<std::size_t>(z)] = sigmoid(so.score_logit).item();
    }
    return out;
}

namespace {

struct SliceComponent {
    Box box;  // half-open pixel coordinates
    std::vector<std::int64_t> voxels;
};

// 2D components of one slice via the 3D labeler on a single-slice mask
// (26-connectivity restricted to one slice is 8-connectivity).
std::vector<SliceComponent> slice_components(const MaskVolume& volume_mask, std::int64_t z) {
    MaskVolume slice = MaskVolume::create(1, volume_mask.ny, volume_mask.nx, 1.0, 1.0, 1.0);
    const auto base = static_cast<std::size_t>(z * volume_mask.ny * volume_mask.nx);
    std::copy_n(volume_mask.values.begin() + static_cast<std::ptrdiff_t>(base),
                slice.values.size(), slice.values.begin());
    std::vector<SliceComponent> out;
    for (Lesion& comp : connected_components(slice, 26).lesions) {
        SliceComponent sc;
        sc.box.y0 = static_cast<double>(volume_mask.ny);
        sc.box.x0 = static_cast<double>(volume_mask.nx);
        sc.box.y1 = 0.0;
        sc.box.x1 = 0.0;
        for (const std::int64_t v : comp.voxels) {
            const double y = static_cast<double>((v / volume_mask.nx) % volume_mask.ny);
            const double x = static_cast<double>(v % volume_mask.nx);
            sc.box.y0 = std::min(sc.box.y0, y);
            sc.box.x0 = std::min(sc.box.x0, x);
            sc.box.y1 = std::max(sc.box.y1, y + 1.0);
            sc.box.x1 = std::max(sc.box.x1, x + 1.0);
        }
        sc.voxels = std::move(comp.voxels);
        out.push_back(std::move(sc));
    }
    return out;
}

double mean_prob_over(const Volume& prob, std::int64_t z,
                      const std::vector<std::int64_t>& voxels) {
    double acc = 0.0;
    const std::int64_t base = z * prob.ny * prob.nx;
    for (const std::int64_t v : voxels) {
        acc += prob.values[static_cast<std::size_t>(base + v)];
    }
    return voxels.empty() ? 0.0 : acc / static_cast<double>(voxels.size());
}

}  // namespace

EvalResult evaluate_predictions(std::span<const PredictedCase> preds,
                                std::span<const Phantom> phantoms) {
    if (preds.size() != phantoms.size()) {
        throw ContractError("evaluate_predictions: " + std::to_string(preds.size()) +
                            " predictions vs " + std::to_string(phantoms.size()) + " phantoms");
    }
    if (preds.empty()) {
        throw ContractError("evaluate_predictions: no cases");
    }

    EvalResult result;
    std::vector<MaskVolume> pred_masks, gt_masks;
    std::vector<double> strata_s, strata_m, strata_l;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const Phantom& ph = phantoms[i];
        const Volume& prob = preds[i].prob;
        if (prob.nz != ph.mask.nz || prob.ny != ph.mask.ny || prob.nx != ph.mask.nx) {
            throw ContractError("evaluate_predictions: prediction grid mismatch at case " +
                                std::to_string(i));
        }
        MaskVolume raw = MaskVolume::create(prob.nz, prob.ny, prob.nx, ph.mask.dz, ph.mask.dy,
                                            ph.mask.dx);
        for (std::size_t v = 0; v < raw.values.size(); ++v) {
            raw.values[v] = prob.values[v] >= 0.5 ? 1 : 0;
        }
        MaskVolume liver = ph.mask;  // labels 1 and 2 are both liver tissue
        for (auto& v : liver.values) {
            v = v != 0 ? 1 : 0;
        }
        const MaskVolume gated = mask_and_postprocess(liver, raw);
        const MaskVolume gt = select_label(ph.mask, 2);

        const StratifiedDice strata = stratified_dice(gated, gt);
        if (strata.dice_s) strata_s.push_back(*strata.dice_s);
        if (strata.dice_m) strata_m.push_back(*strata.dice_m);
        if (strata.dice_l) strata_l.push_back(*strata.dice_l);

        for (std::int64_t z = 0; z < prob.nz; ++z) {
            DetectionRecord rec;
            rec.image_id = "case" + std::to_string(i) + "-z" + std::to_string(z);
            for (const SliceComponent& sc : slice_components(gt, z)) {
                rec.ground_truth.push_back(sc.box);
            }
            for (const SliceComponent& sc : slice_components(gated, z)) {
                Box b = sc.box;
                b.score = std::clamp(mean_prob_over(prob, z, sc.voxels) *
                                         preds[i].slice_score[static_cast<std::size_t>(z)],
                                     0.0, 1.0);
                rec.predictions.push_back(b);
            }
            result.records.push_back(std::move(rec));
        }

        result.per_case_dice.push_back(dice(gated, gt));
        pred_masks.push_back(std::move(gated));
        gt_masks.push_back(std::move(gt));
    }

    result.report.dice_per_case = dice_per_case(pred_masks, gt_masks);
    const auto mean_of = [](const std::vector<double>& xs) {
        double acc = 0.0;
        for (const double x : xs) acc += x;
        return acc / static_cast<double>(xs.size());
    };
    if (!strata_s.empty()) result.report.strata.dice_s = mean_of(strata_s);
    if (!strata_m.empty()) result.report.strata.dice_m = mean_of(strata_m);
    if (!strata_l.empty()) result.report.strata.dice_l = mean_of(strata_l);

    std::int64_t total_gt = 0;
    for (const DetectionRecord& rec : result.records) {
        total_gt += static_cast<std::int64_t>(rec.ground_truth.size());
    }
    if (total_gt > 0) {
        const std::vector<double> fppi = {0.5, 1.0, 2.0};
        const std::vector<double> sens = froc_sensitivity(result.records, fppi);
        for (std::size_t i = 0; i < fppi.size(); ++i) {
            result.report.froc.emplace_back(fppi[i], sens[i]);
        }
        result.report.ap_50 = ap50(result.records);
    }
    return result;
}

EvalResult eval_toy(const ToyModel& m, std::span<const Phantom> phantoms) {
    std::vector<PredictedCase> preds;
    preds.reserve(phantoms.size());
    for (const Phantom& ph : phantoms) {
        preds.push_back(predict_case(m, ph));
    }
    return evaluate_predictions(preds, phantoms);
}

}  // namespace vatt
