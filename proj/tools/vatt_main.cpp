#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vatt/errors.hpp"
#include "vatt/experiment.hpp"
#include "vatt/gradcheck_suite.hpp"
#include "vatt/metrics.hpp"
#include "vatt/phantom.hpp"
#include "vatt/preprocess.hpp"
#include "vatt/va.hpp"
#include "vatt/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vatt;

namespace {

void write_text_atomic(const fs::path& path, const std::string& text) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + tmp.string() + " for writing");
        }
        out << text;
        if (!out.flush()) {
            throw IoError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
    }
}

// Config files mirror the echoed effective config: {"schema": 1, optional
// "command", then the subcommand's own keys}. Unknown keys are rejected so a
// typo cannot silently fall back to a default.
json load_config_file(const std::string& path, const std::string& command,
                      const std::set<std::string>& allowed) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open config " + path);
    }
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("config " + path + ": " + e.what(), e.byte);
    }
    if (!cfg.is_object()) {
        throw ConfigError("config " + path + ": expected a JSON object");
    }
    if (!cfg.contains("schema") || cfg.at("schema") != 1) {
        throw ConfigError("config " + path + ": requires \"schema\": 1");
    }
    if (cfg.contains("command") && cfg.at("command") != command) {
        throw ConfigError("config " + path + ": command mismatch (expected '" + command + "')");
    }
    for (const auto& [key, value] : cfg.items()) {
        (void)value;
        if (key != "schema" && key != "command" && !allowed.contains(key)) {
            throw ConfigError("config " + path + ": unknown key '" + key + "'");
        }
    }
    return cfg;
}

// Flags win over config-file values; defaults fill the rest.
template <class T>
void merge(const CLI::Option* opt, const json& cfg, const char* key, T& var) {
    if (opt != nullptr && opt->count() > 0) {
        return;
    }
    if (!cfg.contains(key)) {
        return;
    }
    try {
        var = cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

void echo_config(const json& j) { std::cout << "config: " << j.dump() << "\n"; }

Tensor slice_tensor(const Volume& v, std::int64_t z) {
    std::vector<double> data(static_cast<std::size_t>(v.ny * v.nx));
    const auto base = static_cast<std::size_t>(z * v.ny * v.nx);
    std::copy_n(v.values.begin() + static_cast<std::ptrdiff_t>(base), data.size(), data.begin());
    return Tensor::from_data({v.ny, v.nx}, std::move(data));
}

// ---- preprocess ------------------------------------------------------------------

struct PreprocessArgs {
    std::string config, in_path, out_dir;
    std::string clamp;
    double dz = 1.5;
    int size = 0;
    std::uint64_t seed = 12;
    CLI::Option *o_in = nullptr, *o_out = nullptr, *o_clamp = nullptr, *o_dz = nullptr,
                *o_size = nullptr, *o_seed = nullptr;
};

int run_preprocess(PreprocessArgs& a) {
    json cfg = json::object();
    if (!a.config.empty()) {
        cfg = load_config_file(a.config, "preprocess",
                               {"in", "out", "clamp_lo", "clamp_hi", "dz", "size", "seed"});
    }
    double clamp_lo = -200.0, clamp_hi = 300.0;
    if (a.o_clamp->count() > 0) {
        const auto comma = a.clamp.find(',');
        try {
            std::size_t used_lo = 0, used_hi = 0;
            if (comma == std::string::npos) {
                throw std::invalid_argument("no comma");
            }
            const std::string lo_s = a.clamp.substr(0, comma);
            const std::string hi_s = a.clamp.substr(comma + 1);
            clamp_lo = std::stod(lo_s, &used_lo);
            clamp_hi = std::stod(hi_s, &used_hi);
            if (used_lo != lo_s.size() || used_hi != hi_s.size()) {
                throw std::invalid_argument("trailing characters");
            }
        } catch (const std::exception&) {
            throw ConfigError("--clamp expects 'lo,hi', got '" + a.clamp + "'");
        }
    } else {
        merge<double>(nullptr, cfg, "clamp_lo", clamp_lo);
        merge<double>(nullptr, cfg, "clamp_hi", clamp_hi);
    }
    merge(a.o_in, cfg, "in", a.in_path);
    merge(a.o_out, cfg, "out", a.out_dir);
    merge(a.o_dz, cfg, "dz", a.dz);
    merge(a.o_size, cfg, "size", a.size);
    merge(a.o_seed, cfg, "seed", a.seed);
    if (a.in_path.empty()) {
        throw ConfigError("preprocess: --in is required");
    }
    if (a.out_dir.empty()) {
        throw ConfigError("preprocess: --out is required");
    }
    if (a.size < 0) {
        throw ConfigError("preprocess: --size must be >= 0");
    }

    echo_config(json{{"command", "preprocess"},
                     {"schema", 1},
                     {"seed", a.seed},
                     {"in", a.in_path},
                     {"out", a.out_dir},
                     {"clamp_lo", clamp_lo},
                     {"clamp_hi", clamp_hi},
                     {"dz", a.dz},
                     {"size", a.size}});

    const Volume v = read_volume(a.in_path);
    Volume u = v.intensity == IntensitySpace::hu ? clamp_normalize(v, clamp_lo, clamp_hi) : v;
    u = resample_z(u, a.dz);
    if (a.size > 0 && (u.ny != a.size || u.nx != a.size)) {
        Volume resized = Volume::create(
            u.nz, a.size, a.size, u.dz,
            u.dy * static_cast<double>(u.ny) / static_cast<double>(a.size),
            u.dx * static_cast<double>(u.nx) / static_cast<double>(a.size), u.intensity);
        for (std::int64_t z = 0; z < u.nz; ++z) {
            const Tensor small = rescale_xy(slice_tensor(u, z), a.size);
            const auto vals = small.values();
            std::copy(vals.begin(), vals.end(),
                      resized.values.begin() +
                          static_cast<std::ptrdiff_t>(z) * a.size * a.size);
        }
        u = std::move(resized);
    }

    fs::create_directories(a.out_dir);
    const std::string stem = fs::path(a.in_path).stem().string();
    const fs::path vol_path = fs::path(a.out_dir) / (stem + ".vol");
    write_volume(u, vol_path.string());

    json slabs = json::array();
    for (std::int64_t z = 0; z < u.nz; ++z) {
        slabs.push_back(json{{"z", z},
                             {"channels",
                              {std::max<std::int64_t>(0, z - 1), z,
                               std::min<std::int64_t>(u.nz - 1, z + 1)}}});
    }
    const json manifest = {{"schema", 1},
                           {"volume", stem + ".vol"},
                           {"dims", {u.nz, u.ny, u.nx}},
                           {"spacing_mm", {u.dz, u.dy, u.dx}},
                           {"slabs", slabs}};
    const fs::path man_path = fs::path(a.out_dir) / (stem + ".slabs.json");
    write_text_atomic(man_path, manifest.dump(2) + "\n");

    std::cout << "wrote " << vol_path.string() << " (" << u.nz << "x" << u.ny << "x" << u.nx
              << ")\n";
    std::cout << "wrote " << man_path.string() << " (" << u.nz << " slabs)\n";
    return 0;
}

// ---- gradcheck -------------------------------------------------------------------

struct GradcheckArgs {
    std::string config;
    std::uint64_t seed = 12;
    double tol = 1e-4;
    int points = 25;
    CLI::Option *o_seed = nullptr, *o_tol = nullptr, *o_points = nullptr;
};

int run_gradcheck(GradcheckArgs& a) {
    json cfg = json::object();
    if (!a.config.empty()) {
        cfg = load_config_file(a.config, "gradcheck", {"seed", "tol", "points"});
    }
    merge(a.o_seed, cfg, "seed", a.seed);
    merge(a.o_tol, cfg, "tol", a.tol);
    merge(a.o_points, cfg, "points", a.points);

    echo_config(json{{"command", "gradcheck"},
                     {"schema", 1},
                     {"seed", a.seed},
                     {"tol", a.tol},
                     {"points", a.points}});

    const GradcheckReport report = run_gradcheck_suite(a.seed, a.tol, a.points);
    std::cout << gradcheck_report_text(report);
    return report.all_pass ? 0 : 1;
}

// ---- experiment ------------------------------------------------------------------

struct ExperimentArgs {
    std::string config;
    std::string mode = "both";
    int bag = 9;
    int seeds = 5;
    int epochs = kExperimentEpochs;
    double lr = kExperimentLr;
    int train_cases = 1;
    int eval_cases = 2;
    std::string out_dir = ".";
    std::uint64_t seed = 12;
    CLI::Option *o_mode = nullptr, *o_bag = nullptr, *o_seeds = nullptr, *o_epochs = nullptr,
                *o_lr = nullptr, *o_train = nullptr, *o_eval = nullptr, *o_out = nullptr,
                *o_seed = nullptr;
};

json phantom_to_json(const PhantomConfig& p) {
    return json{{"nz", p.nz},
                {"ny", p.ny},
                {"nx", p.nx},
                {"n_lesions", p.n_lesions},
                {"radius_lo_mm", p.radius_lo_mm},
                {"radius_hi_mm", p.radius_hi_mm},
                {"distractor_rate", p.distractor_rate},
                {"noise_sigma", p.noise_sigma}};
}

void merge_phantom(const json& cfg, PhantomConfig& p) {
    if (!cfg.contains("phantom")) {
        return;
    }
    const json& pj = cfg.at("phantom");
    if (!pj.is_object()) {
        throw ConfigError("config key 'phantom': expected an object");
    }
    const std::set<std::string> keys = {"nz",           "ny",
                                        "nx",           "n_lesions",
                                        "radius_lo_mm", "radius_hi_mm",
                                        "distractor_rate", "noise_sigma"};
    for (const auto& [key, value] : pj.items()) {
        (void)value;
        if (!keys.contains(key)) {
            throw ConfigError("config key 'phantom." + key + "': unknown key");
        }
    }
    try {
        p.nz = pj.value("nz", p.nz);
        p.ny = pj.value("ny", p.ny);
        p.nx = pj.value("nx", p.nx);
        p.n_lesions = pj.value("n_lesions", p.n_lesions);
        p.radius_lo_mm = pj.value("radius_lo_mm", p.radius_lo_mm);
        p.radius_hi_mm = pj.value("radius_hi_mm", p.radius_hi_mm);
        p.distractor_rate = pj.value("distractor_rate", p.distractor_rate);
        p.noise_sigma = pj.value("noise_sigma", p.noise_sigma);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key 'phantom': ") + e.what());
    }
}

int run_experiment_cmd(ExperimentArgs& a) {
    json cfg = json::object();
    if (!a.config.empty()) {
        cfg = load_config_file(a.config, "experiment",
                               {"mode", "bag", "seeds", "epochs", "lr", "train_cases",
                                "eval_cases", "out", "seed", "phantom"});
    }
    merge(a.o_mode, cfg, "mode", a.mode);
    merge(a.o_bag, cfg, "bag", a.bag);
    merge(a.o_seeds, cfg, "seeds", a.seeds);
    merge(a.o_epochs, cfg, "epochs", a.epochs);
    merge(a.o_lr, cfg, "lr", a.lr);
    merge(a.o_train, cfg, "train_cases", a.train_cases);
    merge(a.o_eval, cfg, "eval_cases", a.eval_cases);
    merge(a.o_out, cfg, "out", a.out_dir);
    merge(a.o_seed, cfg, "seed", a.seed);

    ExperimentConfig ec;
    ec.mode = attn_mode_from_string(a.mode);
    ec.bag_size = a.bag;
    ec.seeds = a.seeds;
    ec.base_seed = a.seed;
    ec.epochs = a.epochs;
    ec.lr = a.lr;
    ec.train_cases = a.train_cases;
    ec.eval_cases = a.eval_cases;
    merge_phantom(cfg, ec.phantom);
    ec.validate();

    echo_config(json{{"command", "experiment"},
                     {"schema", 1},
                     {"seed", a.seed},
                     {"mode", a.mode},
                     {"bag", a.bag},
                     {"seeds", a.seeds},
                     {"epochs", a.epochs},
                     {"lr", a.lr},
                     {"train_cases", a.train_cases},
                     {"eval_cases", a.eval_cases},
                     {"out", a.out_dir},
                     {"phantom", phantom_to_json(ec.phantom)}});

    const ExperimentResult result = run_experiment(ec);

    fs::create_directories(a.out_dir);
    const fs::path exp_path = fs::path(a.out_dir) / "experiment.json";
    const fs::path loss_path = fs::path(a.out_dir) / "loss_curves.csv";
    const fs::path froc_path = fs::path(a.out_dir) / "froc.csv";
    write_text_atomic(exp_path, experiment_to_json(result));
    write_text_atomic(loss_path, loss_curves_to_csv(result));
    write_text_atomic(froc_path, froc_to_csv(result));

    for (const SeedOutcome& o : result.outcomes) {
        std::printf("seed %d: dice=%.4f trend=%s\n", o.seed_index, o.dice,
                    o.trend_ok ? "ok" : "fail");
    }
    std::printf("median_dice=%.4f\n", result.median_dice);
    std::cout << "wrote " << exp_path.string() << "\n";
    std::cout << "wrote " << loss_path.string() << "\n";
    std::cout << "wrote " << froc_path.string() << "\n";
    return 0;
}

// ---- eval ------------------------------------------------------------------------

struct EvalArgs {
    std::string config, pred_dir, gt_dir, out_file;
    std::uint64_t seed = 12;
    CLI::Option *o_pred = nullptr, *o_gt = nullptr, *o_out = nullptr, *o_seed = nullptr;
};

std::vector<std::string> list_mask_stems(const std::string& dir) {
    if (!fs::is_directory(dir)) {
        throw IoError("not a directory: " + dir);
    }
    std::vector<std::string> stems;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".msk") {
            stems.push_back(entry.path().stem().string());
        }
    }
    std::sort(stems.begin(), stems.end());
    return stems;
}

int run_eval(EvalArgs& a) {
    json cfg = json::object();
    if (!a.config.empty()) {
        cfg = load_config_file(a.config, "eval", {"pred", "gt", "out", "seed"});
    }
    merge(a.o_pred, cfg, "pred", a.pred_dir);
    merge(a.o_gt, cfg, "gt", a.gt_dir);
    merge(a.o_out, cfg, "out", a.out_file);
    merge(a.o_seed, cfg, "seed", a.seed);
    if (a.pred_dir.empty()) {
        throw ConfigError("eval: --pred is required");
    }
    if (a.gt_dir.empty()) {
        throw ConfigError("eval: --gt is required");
    }

    echo_config(json{{"command", "eval"},
                     {"schema", 1},
                     {"seed", a.seed},
                     {"pred", a.pred_dir},
                     {"gt", a.gt_dir},
                     {"out", a.out_file}});

    const std::vector<std::string> pred_stems = list_mask_stems(a.pred_dir);
    const std::vector<std::string> gt_stems = list_mask_stems(a.gt_dir);
    if (pred_stems.empty()) {
        throw ContractError("eval: no .msk files in " + a.pred_dir);
    }
    std::vector<std::string> pred_only, gt_only;
    std::set_difference(pred_stems.begin(), pred_stems.end(), gt_stems.begin(), gt_stems.end(),
                        std::back_inserter(pred_only));
    std::set_difference(gt_stems.begin(), gt_stems.end(), pred_stems.begin(), pred_stems.end(),
                        std::back_inserter(gt_only));
    if (!pred_only.empty() || !gt_only.empty()) {
        std::string msg = "eval: unpaired files:";
        for (const std::string& s : pred_only) {
            msg += " pred-only " + s + ".msk";
        }
        for (const std::string& s : gt_only) {
            msg += " gt-only " + s + ".msk";
        }
        throw ContractError(msg);
    }

    std::vector<MaskVolume> preds, gts;
    std::vector<double> strata_s, strata_m, strata_l;
    std::vector<DetectionRecord> records;
    for (const std::string& stem : pred_stems) {
        MaskVolume p = read_mask((fs::path(a.pred_dir) / (stem + ".msk")).string());
        MaskVolume g = read_mask((fs::path(a.gt_dir) / (stem + ".msk")).string());
        if (p.nz != g.nz || p.ny != g.ny || p.nx != g.nx) {
            throw ContractError("eval: grid mismatch for " + stem + ".msk");
        }
        for (auto& v : p.values) {
            v = v != 0 ? 1 : 0;
        }
        for (auto& v : g.values) {
            v = v != 0 ? 1 : 0;
        }

        const StratifiedDice strata = stratified_dice(p, g);
        if (strata.dice_s) strata_s.push_back(*strata.dice_s);
        if (strata.dice_m) strata_m.push_back(*strata.dice_m);
        if (strata.dice_l) strata_l.push_back(*strata.dice_l);

        for (std::int64_t z = 0; z < p.nz; ++z) {
            DetectionRecord rec;
            rec.image_id = stem + "-z" + std::to_string(z);
            rec.predictions = slice_boxes(p, z);
            rec.ground_truth = slice_boxes(g, z);
            records.push_back(std::move(rec));
        }
        preds.push_back(std::move(p));
        gts.push_back(std::move(g));
    }

    MetricsReport report;
    report.dice_per_case = dice_per_case(preds, gts);
    const auto mean_of = [](const std::vector<double>& xs) {
        double acc = 0.0;
        for (const double x : xs) acc += x;
        return acc / static_cast<double>(xs.size());
    };
    if (!strata_s.empty()) report.strata.dice_s = mean_of(strata_s);
    if (!strata_m.empty()) report.strata.dice_m = mean_of(strata_m);
    if (!strata_l.empty()) report.strata.dice_l = mean_of(strata_l);

    std::int64_t total_gt = 0;
    for (const DetectionRecord& rec : records) {
        total_gt += static_cast<std::int64_t>(rec.ground_truth.size());
    }
    if (total_gt > 0) {
        const std::vector<double> fppi = {0.5, 1.0, 2.0};
        const std::vector<double> sens = froc_sensitivity(records, fppi);
        for (std::size_t i = 0; i < fppi.size(); ++i) {
            report.froc.emplace_back(fppi[i], sens[i]);
        }
        report.ap_50 = ap50(records);
    }

    const std::string text = report_to_json(report);
    std::cout << text;
    if (!a.out_file.empty()) {
        write_text_atomic(a.out_file, text);
        std::cout << "wrote " << a.out_file << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"volumetric attention engine"};
    app.require_subcommand(1);
    app.footer("Environment: VA_ENGINE_THREADS caps internal parallelism.");

    PreprocessArgs P;
    CLI::App* pre = app.add_subcommand(
        "preprocess", "clamp-normalize and resample a volume, write a slab manifest");
    pre->add_option("--config", P.config, "JSON config file (flags override)");
    P.o_in = pre->add_option("--in", P.in_path, "input .vol file");
    P.o_out = pre->add_option("--out", P.out_dir, "output directory");
    P.o_clamp = pre->add_option("--clamp", P.clamp, "intensity window 'lo,hi' (default -200,300)");
    P.o_dz = pre->add_option("--dz", P.dz, "target z spacing in mm (default 1.5)");
    P.o_size = pre->add_option("--size", P.size, "in-plane size in px (0 keeps input size)");
    P.o_seed = pre->add_option("--seed", P.seed, "seed echoed for reproducibility (default 12)");

    GradcheckArgs G;
    CLI::App* gc =
        app.add_subcommand("gradcheck", "finite-difference gradient checks over every op");
    gc->add_option("--config", G.config, "JSON config file (flags override)");
    G.o_seed = gc->add_option("--seed", G.seed, "probe seed (default 12)");
    G.o_tol = gc->add_option("--tol", G.tol, "max relative error (default 1e-4)");
    G.o_points = gc->add_option("--points", G.points, "probe points per op (default 25)");

    ExperimentArgs E;
    CLI::App* exp = app.add_subcommand(
        "experiment", "train and evaluate the toy phantom model over paired seeds");
    exp->add_option("--config", E.config, "JSON config file (flags override)");
    E.o_mode = exp->add_option("--mode", E.mode, "attention mode (default both)")
                   ->check(CLI::IsMember({"none", "channel", "spatial", "both"}));
    E.o_bag = exp->add_option("--bag", E.bag, "bag size N, odd (default 9)");
    E.o_seeds = exp->add_option("--seeds", E.seeds, "number of paired seeds (default 5)");
    E.o_epochs = exp->add_option("--epochs", E.epochs, "training epochs");
    E.o_lr = exp->add_option("--lr", E.lr, "learning rate");
    E.o_train = exp->add_option("--train-cases", E.train_cases, "training phantoms per seed");
    E.o_eval = exp->add_option("--eval-cases", E.eval_cases, "evaluation phantoms per seed");
    E.o_out = exp->add_option("--out", E.out_dir, "output directory (default .)");
    E.o_seed = exp->add_option("--seed", E.seed, "base seed (default 12)");

    EvalArgs V;
    CLI::App* ev =
        app.add_subcommand("eval", "segmentation metrics over paired mask directories");
    ev->add_option("--config", V.config, "JSON config file (flags override)");
    V.o_pred = ev->add_option("--pred", V.pred_dir, "directory of predicted .msk files");
    V.o_gt = ev->add_option("--gt", V.gt_dir, "directory of ground-truth .msk files");
    V.o_out = ev->add_option("--out", V.out_file, "write the metrics JSON here too");
    V.o_seed = ev->add_option("--seed", V.seed, "seed echoed for reproducibility (default 12)");

    try {
        app.parse(argc, argv);
        if (pre->parsed()) return run_preprocess(P);
        if (gc->parsed()) return run_gradcheck(G);
        if (exp->parsed()) return run_experiment_cmd(E);
        if (ev->parsed()) return run_eval(V);
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
