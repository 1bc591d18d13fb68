#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <nlohmann/json.hpp>

#include "vatt/volume.hpp"

using namespace vatt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(static_cast<bool>(in));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Runs the installed binary with `args`, cwd = dir; captures streams to files.
CliResult run_cli(const std::string& args, const fs::path& dir) {
    const std::string cmd = "cd '" + dir.string() + "' && '" + VATT_BIN + "' " + args +
                            " > cli_out.txt 2> cli_err.txt";
    const int rc = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(dir / "cli_out.txt");
    r.err = slurp(dir / "cli_err.txt");
    return r;
}

// Fresh scratch directory per test case.
struct Scratch {
    fs::path dir;
    explicit Scratch(const std::string& name) {
        dir = fs::temp_directory_path() / ("vatt-cli-" + name);
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Scratch() { fs::remove_all(dir); }
};

Volume hu_volume() {
    Volume v = Volume::create(4, 6, 6, 3.0, 1.0, 1.0, IntensitySpace::hu);
    for (std::int64_t i = 0; i < v.size(); ++i) {
        v.values[static_cast<std::size_t>(i)] = static_cast<double>((i * 37) % 500) - 200.0;
    }
    return v;
}

MaskVolume cube_mask(std::int64_t z0, std::int64_t z1, std::int64_t lo, std::int64_t hi) {
    MaskVolume m = MaskVolume::create(4, 12, 12, 1.0, 1.0, 1.0);
    for (std::int64_t z = z0; z < z1; ++z) {
        for (std::int64_t y = lo; y < hi; ++y) {
            for (std::int64_t x = lo; x < hi; ++x) {
                m.at(z, y, x) = 1;
            }
        }
    }
    return m;
}

json echoed_config(const std::string& out) {
    const std::string prefix = "config: ";
    REQUIRE(out.rfind(prefix, 0) == 0);
    const auto end = out.find('\n');
    REQUIRE(end != std::string::npos);
    return json::parse(out.substr(prefix.size(), end - prefix.size()));
}

std::string tiny_experiment_json(const std::string& mode, int epochs, double lr) {
    json j = {{"schema", 1},
              {"command", "experiment"},
              {"mode", mode},
              {"bag", 3},
              {"seeds", 1},
              {"epochs", epochs},
              {"lr", lr},
              {"train_cases", 1},
              {"eval_cases", 1},
              {"phantom",
               {{"nz", 14},
                {"ny", 32},
                {"nx", 32},
                {"n_lesions", 1},
                {"radius_lo_mm", 4.0},
                {"radius_hi_mm", 6.0},
                {"distractor_rate", 0.5},
                {"noise_sigma", 0.08}}}};
    return j.dump(2) + "\n";
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    REQUIRE(static_cast<bool>(out));
    out << text;
}

}  // namespace

TEST_CASE("running without a subcommand is a usage error") {
    Scratch s("noargs");
    CHECK(run_cli("", s.dir).exit_code == 2);
    CHECK(run_cli("frobnicate", s.dir).exit_code == 2);
}

TEST_CASE("gradcheck: exit code tracks pass/fail and the report is reproducible") {
    Scratch s("gradcheck");
    const CliResult ok = run_cli("gradcheck --points 2 --seed 7", s.dir);
    CHECK(ok.exit_code == 0);
    CHECK(ok.out.find("result: PASS") != std::string::npos);
    CHECK(ok.out.find("va_forward") != std::string::npos);
    const json cfg = echoed_config(ok.out);
    CHECK(cfg.at("seed") == 7);
    CHECK(cfg.at("tol") == 1e-4);

    const CliResult again = run_cli("gradcheck --points 2 --seed 7", s.dir);
    CHECK(again.out == ok.out);  // fixed seed: identical report text

    const CliResult tight = run_cli("gradcheck --points 2 --seed 7 --tol 1e-12", s.dir);
    CHECK(tight.exit_code == 1);
    CHECK(tight.out.find("FAIL") != std::string::npos);
}

TEST_CASE("preprocess: resamples, writes a slab manifest, and is idempotent") {
    Scratch s("preprocess");
    write_volume(hu_volume(), (s.dir / "case.vol").string());

    const CliResult r = run_cli("preprocess --in case.vol --out o --dz 1.5", s.dir);
    CHECK(r.exit_code == 0);

    const Volume u = read_volume((s.dir / "o" / "case.vol").string());
    CHECK(u.nz == 7);  // 4 slices at 3mm -> 1.5mm
    CHECK(u.intensity == IntensitySpace::unit);
    for (const double v : u.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    const json manifest = json::parse(slurp(s.dir / "o" / "case.slabs.json"));
    CHECK(manifest.at("schema") == 1);
    CHECK(manifest.at("dims") == json({7, 6, 6}));
    REQUIRE(manifest.at("slabs").size() == 7);
    CHECK(manifest.at("slabs")[0].at("channels") == json({0, 0, 1}));
    CHECK(manifest.at("slabs")[6].at("channels") == json({5, 6, 6}));

    // A unit-space volume already on the target spacing passes through intact.
    const CliResult r2 = run_cli("preprocess --in o/case.vol --out o2 --dz 1.5", s.dir);
    CHECK(r2.exit_code == 0);
    CHECK(slurp(s.dir / "o" / "case.vol") == slurp(s.dir / "o2" / "case.vol"));
}

TEST_CASE("preprocess: malformed input exits 2 with a byte offset") {
    Scratch s("badvol");
    write_text(s.dir / "bad.vol", "{\"dims\":[4,6");
    const CliResult r = run_cli("preprocess --in bad.vol --out o", s.dir);
    CHECK(r.exit_code == 2);
    CHECK(r.err.find("byte offset") != std::string::npos);
}

TEST_CASE("config file values apply unless a flag overrides them") {
    Scratch s("cfgmerge");
    write_text(s.dir / "cfg.json",
               json{{"schema", 1}, {"clamp_lo", 0.0}, {"clamp_hi", 100.0}}.dump());
    write_volume(hu_volume(), (s.dir / "case.vol").string());

    const CliResult from_file =
        run_cli("preprocess --config cfg.json --in case.vol --out a", s.dir);
    CHECK(from_file.exit_code == 0);
    CHECK(echoed_config(from_file.out).at("clamp_lo") == 0.0);

    const CliResult flag_wins =
        run_cli("preprocess --config cfg.json --in case.vol --out b --clamp -200,300", s.dir);
    CHECK(flag_wins.exit_code == 0);
    CHECK(echoed_config(flag_wins.out).at("clamp_lo") == -200.0);
}

TEST_CASE("config files without schema 1 or with unknown keys are rejected") {
    Scratch s("cfgbad");
    write_text(s.dir / "noschema.json", "{}");
    const CliResult r1 = run_cli("gradcheck --config noschema.json", s.dir);
    CHECK(r1.exit_code == 2);
    CHECK(r1.err.find("schema") != std::string::npos);

    write_text(s.dir / "unknown.json", json{{"schema", 1}, {"bogus", 3}}.dump());
    const CliResult r2 = run_cli("gradcheck --config unknown.json", s.dir);
    CHECK(r2.exit_code == 2);
    CHECK(r2.err.find("unknown key 'bogus'") != std::string::npos);

    write_text(s.dir / "wrongcmd.json", json{{"schema", 1}, {"command", "eval"}}.dump());
    const CliResult r3 = run_cli("gradcheck --config wrongcmd.json", s.dir);
    CHECK(r3.exit_code == 2);
    CHECK(r3.err.find("command mismatch") != std::string::npos);
}

TEST_CASE("experiment: outputs are byte-identical when re-run from the echoed config") {
    Scratch s("exprepro");
    write_text(s.dir / "exp.json", tiny_experiment_json("none", 2, 0.3));

    const CliResult first = run_cli("experiment --config exp.json --out run1", s.dir);
    CHECK(first.exit_code == 0);
    CHECK(first.out.find("median_dice=") != std::string::npos);

    // Feed the echoed effective config back in, unchanged except the out dir.
    json echoed = echoed_config(first.out);
    echoed["out"] = "run2";
    write_text(s.dir / "echoed.json", echoed.dump());
    const CliResult second = run_cli("experiment --config echoed.json", s.dir);
    CHECK(second.exit_code == 0);

    CHECK(slurp(s.dir / "run1" / "experiment.json") ==
          slurp(s.dir / "run2" / "experiment.json"));
    CHECK(slurp(s.dir / "run1" / "loss_curves.csv") ==
          slurp(s.dir / "run2" / "loss_curves.csv"));
    CHECK(slurp(s.dir / "run1" / "froc.csv") == slurp(s.dir / "run2" / "froc.csv"));

    // seeds * epochs data rows + header
    std::istringstream lines(slurp(s.dir / "run1" / "loss_curves.csv"));
    int count = 0;
    std::string line;
    while (std::getline(lines, line)) {
        ++count;
    }
    CHECK(count == 1 + 1 * 2);
}

TEST_CASE("experiment: non-finite loss names the seed and exits 3") {
    Scratch s("expnan");
    write_text(s.dir / "exp.json", tiny_experiment_json("none", 2, 0.3));
    const CliResult r = run_cli("experiment --config exp.json --out run --lr 1e300", s.dir);
    CHECK(r.exit_code == 3);
    CHECK(r.err.find("seed 0") != std::string::npos);
}

TEST_CASE("eval: identical masks score dice 1.0; orphans exit 2 and are named") {
    Scratch s("eval");
    fs::create_directories(s.dir / "gt");
    fs::create_directories(s.dir / "pr");
    write_mask(cube_mask(1, 3, 2, 6), (s.dir / "gt" / "a.msk").string());
    write_mask(cube_mask(1, 3, 2, 6), (s.dir / "pr" / "a.msk").string());
    write_mask(cube_mask(0, 2, 4, 9), (s.dir / "gt" / "b.msk").string());
    write_mask(cube_mask(0, 2, 4, 9), (s.dir / "pr" / "b.msk").string());

    const CliResult r = run_cli("eval --pred pr --gt gt --out m.json", s.dir);
    CHECK(r.exit_code == 0);
    const auto body = r.out.substr(r.out.find('\n') + 1);  // skip the config echo
    const json metrics = json::parse(body.substr(0, body.rfind("wrote")));
    CHECK(metrics.at("dice_per_case") == 1.0);
    CHECK(metrics.at("ap50") == 1.0);
    CHECK(json::parse(slurp(s.dir / "m.json")) == metrics);

    write_mask(cube_mask(1, 2, 3, 5), (s.dir / "pr" / "orphan.msk").string());
    const CliResult r2 = run_cli("eval --pred pr --gt gt", s.dir);
    CHECK(r2.exit_code == 2);
    CHECK(r2.err.find("orphan.msk") != std::string::npos);

    fs::create_directories(s.dir / "empty");
    const CliResult r3 = run_cli("eval --pred empty --gt gt", s.dir);
    CHECK(r3.exit_code == 2);
}
