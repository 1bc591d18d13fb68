#include "vatt/gradcheck_suite.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "vatt/errors.hpp"
#include "vatt/random.hpp"
#include "vatt/tensor.hpp"
#include "vatt/va.hpp"

namespace vatt {

namespace {

Tensor draw(const Shape& shape, Rng& rng) {
    return Tensor::uniform(shape, -1.0, 1.0, rng);
}

// Draw with every element kept away from 0, so kinked ops (relu, max picks)
// see no sign flip or argmax tie within the finite-difference step.
Tensor draw_away(const Shape& shape, Rng& rng) {
    Tensor t = Tensor::uniform(shape, -1.0, 1.0, rng);
    for (double& v : t.values()) {
        if (std::abs(v) < 0.05) {
            v += v >= 0.0 ? 0.1 : -0.1;
        }
    }
    return t;
}

// Finite differences step across relu kinks and argmax ties, so probes for
// kinked compositions redraw until every comparison has margin >> eps.
constexpr double kKinkMargin = 1e-3;

// Smallest |element| of a tensor.
double min_abs(const Tensor& t) {
    double best = std::numeric_limits<double>::infinity();
    for (const double v : t.values()) {
        best = std::min(best, std::abs(v));
    }
    return best;
}

// Smallest winner-vs-runner-up gap of the per-pixel channel max ([C,H,W]).
double min_channel_gap(const Tensor& x) {
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    const auto vals = x.values();
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t p = 0; p < hw; ++p) {
        double top = -std::numeric_limits<double>::infinity(), second = top;
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const double v = vals[static_cast<std::size_t>(ci * hw + p)];
            if (v > top) {
                second = top;
                top = v;
            } else if (v > second) {
                second = v;
            }
        }
        best = std::min(best, top - second);
    }
    return best;
}

// Smallest winner-vs-runner-up gap of the per-channel spatial max ([C,H,W]).
double min_plane_gap(const Tensor& x) {
    const std::int64_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
    const auto vals = x.values();
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t ci = 0; ci < c; ++ci) {
        double top = -std::numeric_limits<double>::infinity(), second = top;
        for (std::int64_t p = 0; p < hw; ++p) {
            const double v = vals[static_cast<std::size_t>(ci * hw + p)];
            if (v > top) {
                second = top;
                top = v;
            } else if (v > second) {
                second = v;
            }
        }
        best = std::min(best, top - second);
    }
    return best;
}

// One op under test: draws fresh inputs for a point index and returns the
// scalar-valued function plus its checked inputs.
struct Probe {
    std::vector<Tensor> inputs;
    TensorFn fn;
};

using ProbeFactory = std::function<Probe(Rng&, int)>;

// Fixed random cotangent, so the check exercises mixed output elements.
TensorFn contract_with(const Tensor& r, std::function<Tensor(const std::vector<Tensor>&)> op) {
    return [r, op = std::move(op)](const std::vector<Tensor>& in) { return dot(op(in), r); };
}

std::vector<std::pair<std::string, ProbeFactory>> probe_table() {
    std::vector<std::pair<std::string, ProbeFactory>> table;

    table.emplace_back("matmul", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4}, rng), draw({4, 2}, rng)};
        const Tensor r = draw({3, 2}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); });
        return p;
    });

    table.emplace_back("conv2d", [](Rng& rng, int point) {
        Probe p;
        const int k = point % 2 == 0 ? 3 : 1;
        p.inputs = {draw({3, 5, 5}, rng), draw({4, 3, k, k}, rng)};
        const Tensor r = draw({4, 5, 5}, rng);
        p.fn = contract_with(r, [k](const std::vector<Tensor>& in) {
            return conv2d(in[0], in[1], (k - 1) / 2);
        });
        return p;
    });

    table.emplace_back("global_avg_pool", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({4, 3, 3}, rng)};
        const Tensor r = draw({4}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) { return global_avg_pool(in[0]); });
        return p;
    });

    table.emplace_back("global_max_pool", [](Rng& rng, int) {
        Probe p;
        Tensor x = draw({4, 3, 3}, rng);
        while (min_plane_gap(x) < kKinkMargin) {
            x = draw({4, 3, 3}, rng);
        }
        p.inputs = {x};
        const Tensor r = draw({4}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) { return global_max_pool(in[0]); });
        return p;
    });

    table.emplace_back("channel_pool", [](Rng& rng, int) {
        Probe p;
        Tensor x = draw({4, 3, 3}, rng);
        while (min_channel_gap(x) < kKinkMargin) {
            x = draw({4, 3, 3}, rng);
        }
        p.inputs = {x};
        const Tensor r = draw({2, 3, 3}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) { return channel_pool(in[0]); });
        return p;
    });

    table.emplace_back("softmax", [](Rng& rng, int point) {
        Probe p;
        const int axis = point % 2;
        p.inputs = {draw({3, 5}, rng)};
        const Tensor r = draw({3, 5}, rng);
        p.fn = contract_with(r, [axis](const std::vector<Tensor>& in) { return softmax(in[0], axis); });
        return p;
    });

    table.emplace_back("relu", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw_away({3, 4, 4}, rng)};
        const Tensor r = draw({3, 4, 4}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) { return relu(in[0]); });
        return p;
    });

    table.emplace_back("sigmoid", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4}, rng)};
        const Tensor r = draw({3, 4}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) { return sigmoid(in[0]); });
        return p;
    });

    table.emplace_back("mul_broadcast", [](Rng& rng, int point) {
        Probe p;
        const bool channel_gate = point % 2 == 0;
        p.inputs = {draw({3, 4, 4}, rng),
                    channel_gate ? draw({3, 1, 1}, rng) : draw({1, 4, 4}, rng)};
        const Tensor r = draw({3, 4, 4}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) {
            return mul_broadcast(in[0], in[1]);
        });
        return p;
    });

    table.emplace_back("add", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4}, rng), draw({3, 4}, rng)};
        const Tensor r = draw({3, 4}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) { return add(in[0], in[1]); });
        return p;
    });

    table.emplace_back("add_channel_bias", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4, 4}, rng), draw({3}, rng)};
        const Tensor r = draw({3, 4, 4}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) {
            return add_channel_bias(in[0], in[1]);
        });
        return p;
    });

    table.emplace_back("stack", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({2, 3}, rng), draw({2, 3}, rng), draw({2, 3}, rng)};
        const Tensor r = draw({3, 2, 3}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) {
            return stack(std::span<const Tensor>(in.data(), in.size()));
        });
        return p;
    });

    table.emplace_back("reshape", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4}, rng)};
        const Tensor r = draw({2, 6}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) {
            return reshape(in[0], {2, 6});
        });
        return p;
    });

    table.emplace_back("scale", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4}, rng)};
        const double factor = rng.uniform(0.5, 2.0) * (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0);
        const Tensor r = draw({3, 4}, rng);
        p.fn = contract_with(r, [factor](const std::vector<Tensor>& in) {
            return scale(in[0], factor);
        });
        return p;
    });

    table.emplace_back("sum_all", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4}, rng)};
        p.fn = [](const std::vector<Tensor>& in) { return sum_all(in[0]); };
        return p;
    });

    table.emplace_back("mean_all", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({3, 4}, rng)};
        p.fn = [](const std::vector<Tensor>& in) { return mean_all(in[0]); };
        return p;
    });

    table.emplace_back("dot", [](Rng& rng, int) {
        Probe p;
        p.inputs = {draw({2, 3}, rng), draw({2, 3}, rng)};
        p.fn = [](const std::vector<Tensor>& in) { return dot(in[0], in[1]); };
        return p;
    });

    table.emplace_back("bce_with_logits_mean", [](Rng& rng, int point) {
        Probe p;
        p.inputs = {draw({2, 3, 3}, rng)};
        const Tensor targets = Tensor::uniform({2, 3, 3}, 0.0, 1.0, rng);
        const double pos_weight = point % 2 == 0 ? 1.0 : 3.0;
        p.fn = [targets, pos_weight](const std::vector<Tensor>& in) {
            return bce_with_logits_mean(in[0], targets, pos_weight);
        };
        return p;
    });

    // End to end through both attention branches: gradients w.r.t. the
    // target map, all three bag members, the squeeze-excite weights, both
    // gate convs and biases, and the spatial embedding conv.
    table.emplace_back("va_forward", [](Rng& rng, int) {
        constexpr int c = 8, red = 2, k = 3, c_s = 2, hw = 5;
        Probe p;
        for (int attempt = 0; attempt < 1000 && p.inputs.empty(); ++attempt) {
            std::vector<Tensor> in = {
                draw({c, hw, hw}, rng),     // 0: X_tgt
                draw({c, hw, hw}, rng),     // 1..3: bag members
                draw({c, hw, hw}, rng),
                draw({c, hw, hw}, rng),
                draw({c / red, c}, rng),    // 4: W1
                draw({c, c / red}, rng),    // 5: W2
                draw({c, c, 1, 1}, rng),    // 6: channel gate conv
                draw({c}, rng),             // 7: channel gate bias
                draw({c_s, 2, k, k}, rng),  // 8: spatial embed conv
                draw({1, c_s, 1, 1}, rng),  // 9: spatial gate conv
                draw({1}, rng),             // 10: spatial gate bias
            };
            // Replay the kinked intermediates and insist on wide margins.
            const auto span3 = [](const std::vector<Tensor>& v) {
                return std::span<const Tensor>(v.data(), v.size());
            };
            bool ok = true;
            std::vector<Tensor> ch_embeds;
            Tensor ch_tgt;
            for (int i = 0; i < 4 && ok; ++i) {
                const Tensor u = matmul(in[4], reshape(global_avg_pool(in[i]), {c, 1}));
                ok = min_abs(u) >= kKinkMargin && min_channel_gap(in[i]) >= kKinkMargin;
                Tensor e = reshape(matmul(in[5], relu(u)), {c});
                if (i == 0) {
                    ch_tgt = std::move(e);
                } else {
                    ch_embeds.push_back(std::move(e));
                }
            }
            if (ok) {
                std::vector<Tensor> scores;
                for (const Tensor& e : ch_embeds) {
                    scores.push_back(dot(ch_tgt, e));
                }
                const Tensor w = softmax(reshape(stack(span3(scores)), {1, 3}), 1);
                ok = min_abs(matmul(w, stack(span3(ch_embeds)))) >= kKinkMargin;
            }
            if (ok) {
                std::vector<Tensor> sp_embeds;
                Tensor sp_tgt;
                for (int i = 0; i < 4; ++i) {
                    Tensor e = reshape(conv2d(channel_pool(in[i]), in[8], (k - 1) / 2),
                                       {c_s * hw * hw});
                    if (i == 0) {
                        sp_tgt = std::move(e);
                    } else {
                        sp_embeds.push_back(std::move(e));
                    }
                }
                std::vector<Tensor> scores;
                for (const Tensor& e : sp_embeds) {
                    scores.push_back(dot(sp_tgt, e));
                }
                const Tensor w = softmax(reshape(stack(span3(scores)), {1, 3}), 1);
                ok = min_abs(matmul(w, stack(span3(sp_embeds)))) >= kKinkMargin;
            }
            if (ok) {
                p.inputs = std::move(in);
            }
        }
        if (p.inputs.empty()) {
            throw ContractError("va_forward probe: no kink-safe draw found");
        }
        const Tensor r = draw({c, hw, hw}, rng);
        p.fn = contract_with(r, [](const std::vector<Tensor>& in) {
            const TargetFeature tgt{in[0], 0};
            const std::vector<Tensor> members = {in[1], in[2], in[3]};
            const std::vector<int> offsets = {-1, 0, 1};
            const FeatureBag bag = bag_features(members, offsets);
            ChannelAttnParams cp;
            cp.r = red;
            cp.w1 = in[4];
            cp.w2 = in[5];
            cp.gate_conv = in[6];
            cp.gate_bias = in[7];
            SpatialAttnParams sp;
            sp.k = k;
            sp.c_s = c_s;
            sp.embed_conv = in[8];
            sp.gate_conv = in[9];
            sp.gate_bias = in[10];
            return va_forward(tgt, bag, cp, sp, AttnMode::both).out;
        });
        return p;
    });

    return table;
}

}  // namespace

GradcheckReport run_gradcheck_suite(std::uint64_t seed, double tol, int points) {
    if (points < 1) {
        throw ConfigError("gradcheck suite: points must be >= 1");
    }
    if (!(tol > 0.0)) {
        throw ConfigError("gradcheck suite: tol must be positive");
    }
    GradcheckReport report;
    report.seed = seed;
    report.tol = tol;
    report.points_per_op = points;
    report.all_pass = true;
    for (const auto& [name, factory] : probe_table()) {
        GradcheckEntry entry;
        entry.op = name;
        entry.points = points;
        for (int point = 0; point < points; ++point) {
            Rng rng(derive_seed(seed, name, static_cast<std::uint64_t>(point)));
            const Probe probe = factory(rng, point);
            const GradcheckResult res = gradcheck(probe.fn, probe.inputs, 1e-4, tol);
            entry.max_rel_err = std::max(entry.max_rel_err, res.max_rel_err);
        }
        entry.pass = entry.max_rel_err <= tol;
        report.all_pass = report.all_pass && entry.pass;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

std::string gradcheck_report_text(const GradcheckReport& report) {
    char line[128];
    std::snprintf(line, sizeof(line), "gradcheck suite: seed=%llu tol=%g points=%d\n",
                  static_cast<unsigned long long>(report.seed), report.tol,
                  report.points_per_op);
    std::string out = line;
    int passed = 0;
    for (const GradcheckEntry& e : report.entries) {
        std::snprintf(line, sizeof(line), "%-22s max_rel_err=%.6e %s\n", e.op.c_str(),
                      e.max_rel_err, e.pass ? "pass" : "FAIL");
        out += line;
        passed += e.pass ? 1 : 0;
    }
    std::snprintf(line, sizeof(line), "result: %s %d/%d\n", report.all_pass ? "PASS" : "FAIL",
                  passed, static_cast<int>(report.entries.size()));
    out += line;
    return out;
}

}  // namespace vatt
