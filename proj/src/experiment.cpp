#include "vatt/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vatt/errors.hpp"
#include "vatt/random.hpp"

namespace vatt {

namespace {

using ordered_json = nlohmann::ordered_json;

// Shortest round-trip decimal form, deterministic for identical bits.
std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    double parsed = 0.0;
    std::sscanf(buf, "%lf", &parsed);
    if (parsed == v) {
        for (int prec = 1; prec < 17; ++prec) {
            char probe[32];
            std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
            std::sscanf(probe, "%lf", &parsed);
            if (parsed == v) {
                return probe;
            }
        }
    }
    return buf;
}

std::optional<double> median_present(const std::vector<std::optional<double>>& vals) {
    std::vector<double> present;
    for (const auto& v : vals) {
        if (v) {
            present.push_back(*v);
        }
    }
    if (present.empty()) {
        return std::nullopt;
    }
    return median(std::move(present));
}

ordered_json config_json(const ExperimentConfig& cfg) {
    ordered_json j;
    j["mode"] = to_string(cfg.mode);
    j["bag"] = cfg.bag_size;
    j["seeds"] = cfg.seeds;
    j["base_seed"] = cfg.base_seed;
    j["epochs"] = cfg.epochs;
    j["lr"] = cfg.lr;
    j["train_cases"] = cfg.train_cases;
    j["eval_cases"] = cfg.eval_cases;
    ordered_json p;
    p["nz"] = cfg.phantom.nz;
    p["ny"] = cfg.phantom.ny;
    p["nx"] = cfg.phantom.nx;
    p["n_lesions"] = cfg.phantom.n_lesions;
    p["radius_lo_mm"] = cfg.phantom.radius_lo_mm;
    p["radius_hi_mm"] = cfg.phantom.radius_hi_mm;
    p["distractor_rate"] = cfg.phantom.distractor_rate;
    p["noise_sigma"] = cfg.phantom.noise_sigma;
    j["phantom"] = p;
    return j;
}

ordered_json outcome_json(const SeedOutcome& o) {
    ordered_json j;
    j["seed"] = o.seed_index;
    j["dice"] = o.dice;
    j["trend_ok"] = o.trend_ok;
    j["report"] = ordered_json::parse(report_to_json(o.report));
    j["final_loss"] = o.loss_curve.empty() ? ordered_json() : ordered_json(o.loss_curve.back());
    return j;
}

ordered_json result_json(const ExperimentResult& r) {
    ordered_json j;
    j["schema"] = 1;
    j["config"] = config_json(r.config);
    j["seeds"] = ordered_json::array();
    for (const SeedOutcome& o : r.outcomes) {
        j["seeds"].push_back(outcome_json(o));
    }
    j["median_dice"] = r.median_dice;
    return j;
}

}  // namespace

void ExperimentConfig::validate() const {
    if (seeds < 1) {
        throw ConfigError("experiment: seeds must be >= 1, got " + std::to_string(seeds));
    }
    if (epochs < 0) {
        throw ConfigError("experiment: epochs must be >= 0, got " + std::to_string(epochs));
    }
    if (!std::isfinite(lr) || lr < 0.0) {
        throw ConfigError("experiment: lr must be finite and >= 0");
    }
    if (train_cases < 1 || eval_cases < 1) {
        throw ConfigError("experiment: train_cases and eval_cases must be >= 1");
    }
    BagSpec spec;
    spec.n_images = bag_size;
    spec.validate();
    phantom.validate();
}

double median(std::vector<double> values) {
    if (values.empty()) {
        throw ContractError("median: empty input");
    }
    std::sort(values.begin(), values.end());
    return values[(values.size() - 1) / 2];
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    ExperimentResult result;
    result.config = cfg;
    for (int k = 0; k < cfg.seeds; ++k) {
        std::vector<Phantom> train_set;
        for (int j = 0; j < cfg.train_cases; ++j) {
            PhantomConfig pc = cfg.phantom;
            pc.seed = derive_seed(cfg.base_seed, "train-phantom",
                                  static_cast<std::uint64_t>(k) * cfg.train_cases + j);
            train_set.push_back(gen_phantom(pc));
        }
        std::vector<Phantom> eval_set;
        for (int j = 0; j < cfg.eval_cases; ++j) {
            PhantomConfig pc = cfg.phantom;
            pc.seed = derive_seed(cfg.base_seed, "eval-phantom",
                                  static_cast<std::uint64_t>(k) * cfg.eval_cases + j);
            eval_set.push_back(gen_phantom(pc));
        }
        ToyModel model = ToyModel::create(cfg.mode, cfg.bag_size);
        SeedOutcome outcome;
        outcome.seed_index = k;
        try {
            const TrainResult tr = train_toy(model, train_set, cfg.epochs, cfg.lr,
                                             derive_seed(cfg.base_seed, "train", k));
            outcome.trend_ok = tr.trend_ok;
            outcome.loss_curve = tr.loss_curve;
        } catch (const NumericError& e) {
            throw NumericError("run_experiment: seed " + std::to_string(k) + ": " + e.what());
        }
        const EvalResult er = eval_toy(model, eval_set);
        outcome.dice = er.report.dice_per_case;
        outcome.report = er.report;
        result.outcomes.push_back(std::move(outcome));
    }
    std::vector<double> dices;
    for (const SeedOutcome& o : result.outcomes) {
        dices.push_back(o.dice);
    }
    result.median_dice = median(std::move(dices));
    return result;
}

AblationTable ablate_modes(const ExperimentConfig& base, const std::vector<AttnMode>& modes) {
    if (modes.empty()) {
        throw ConfigError("ablate_modes: empty axis");
    }
    AblationTable table;
    table.axis = "attention_mode";
    for (const AttnMode mode : modes) {
        ExperimentConfig cfg = base;
        cfg.mode = mode;
        table.labels.push_back(to_string(mode));
        table.rows.push_back(run_experiment(cfg));
    }
    return table;
}

AblationTable ablate_bags(const ExperimentConfig& base, const std::vector<int>& bags) {
    if (bags.empty()) {
        throw ConfigError("ablate_bags: empty axis");
    }
    AblationTable table;
    table.axis = "bag_size";
    for (const int bag : bags) {
        ExperimentConfig cfg = base;
        cfg.bag_size = bag;
        table.labels.push_back(std::to_string(bag));
        table.rows.push_back(run_experiment(cfg));
    }
    return table;
}

std::string experiment_to_json(const ExperimentResult& r) {
    return result_json(r).dump(2) + "\n";
}

std::string ablation_to_json(const AblationTable& t) {
    ordered_json j;
    j["schema"] = 1;
    j["axis"] = t.axis;
    j["rows"] = ordered_json::array();
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        ordered_json row;
        row["label"] = t.labels[i];
        row["result"] = result_json(t.rows[i]);
        j["rows"].push_back(row);
    }
    return j.dump(2) + "\n";
}

std::string ablation_to_csv(const AblationTable& t) {
    std::string out = t.axis +
                      ",median_dice,dice_small,dice_medium,dice_large,"
                      "froc_0.5,froc_1,froc_2,ap50\n";
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const ExperimentResult& r = t.rows[i];
        std::vector<std::optional<double>> s, m, l, ap;
        std::vector<std::vector<double>> froc_sens(3);
        for (const SeedOutcome& o : r.outcomes) {
            s.push_back(o.report.strata.dice_s);
            m.push_back(o.report.strata.dice_m);
            l.push_back(o.report.strata.dice_l);
            ap.push_back(o.report.ap_50);
            for (std::size_t f = 0; f < o.report.froc.size() && f < 3; ++f) {
                froc_sens[f].push_back(o.report.froc[f].second);
            }
        }
        out += t.labels[i] + "," + fmt_double(r.median_dice);
        for (const auto& stratum : {median_present(s), median_present(m), median_present(l)}) {
            out += ",";
            if (stratum) {
                out += fmt_double(*stratum);
            }
        }
        for (const std::vector<double>& sens : froc_sens) {
            out += ",";
            if (!sens.empty()) {
                out += fmt_double(median(sens));
            }
        }
        out += ",";
        if (const auto ap_med = median_present(ap)) {
            out += fmt_double(*ap_med);
        }
        out += "\n";
    }
    return out;
}

std::string loss_curves_to_csv(const ExperimentResult& r) {
    std::string out = "seed,epoch,loss\n";
    for (const SeedOutcome& o : r.outcomes) {
        for (std::size_t e = 0; e < o.loss_curve.size(); ++e) {
            out += std::to_string(o.seed_index) + "," + std::to_string(e) + "," +
                   fmt_double(o.loss_curve[e]) + "\n";
        }
    }
    return out;
}

std::string froc_to_csv(const ExperimentResult& r) {
    std::string out = "seed,fppi,sensitivity\n";
    for (const SeedOutcome& o : r.outcomes) {
        for (const auto& [fppi, sens] : o.report.froc) {
            out += std::to_string(o.seed_index) + "," + fmt_double(fppi) + "," +
                   fmt_double(sens) + "\n";
        }
    }
    return out;
}

}  // namespace vatt
