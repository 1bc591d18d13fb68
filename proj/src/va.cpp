#include "vatt/va.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "vatt/endian.hpp"

namespace vatt {

namespace {

double fan_limit(std::int64_t fan_in, std::int64_t fan_out) {
    return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void check_bag(const FeatureBag& bag, const TargetFeature& tgt, const char* op) {
    if (bag.n() < 1) {
        throw ContractError(std::string(op) + ": empty bag");
    }
    if (!tgt.map.defined() || tgt.map.rank() != 3) {
        throw DimensionError(std::string(op) + ": target map must be [C,H,W]");
    }
    for (const Tensor& m : bag.members) {
        if (!m.same_shape(tgt.map)) {
            throw DimensionError(std::string(op) + ": bag member shape " + shape_str(m.shape()) +
                                 " does not match target " + shape_str(tgt.map.shape()));
        }
    }
}

}  // namespace

int FeatureBag::target_index() const {
    for (std::size_t i = 0; i < z_index.size(); ++i) {
        if (z_index[i] == 0) {
            return static_cast<int>(i);
        }
    }
    throw ContractError("feature bag: offset 0 (the target) is missing");
}

FeatureBag bag_features(std::span<const Tensor> per_image_maps, std::span<const int> offsets) {
    if (per_image_maps.empty()) {
        throw ContractError("bag_features: need at least one map");
    }
    if (per_image_maps.size() != offsets.size()) {
        throw ContractError("bag_features: " + std::to_string(per_image_maps.size()) + " maps vs " +
                            std::to_string(offsets.size()) + " offsets");
    }
    const Shape& base = per_image_maps[0].shape();
    if (base.size() != 3) {
        throw DimensionError("bag_features: maps must be [C,H,W], got " + shape_str(base));
    }
    for (const Tensor& m : per_image_maps) {
        if (m.shape() != base) {
            throw DimensionError("bag_features: map shape " + shape_str(m.shape()) +
                                 " differs from " + shape_str(base));
        }
    }

    std::vector<std::size_t> order(offsets.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return offsets[a] < offsets[b]; });
    for (std::size_t i = 1; i < order.size(); ++i) {
        if (offsets[order[i]] == offsets[order[i - 1]]) {
            throw ContractError("bag_features: duplicate offset " +
                                std::to_string(offsets[order[i]]));
        }
    }

    FeatureBag bag;
    bag.members.reserve(order.size());
    bag.z_index.reserve(order.size());
    for (std::size_t idx : order) {
        bag.members.push_back(per_image_maps[idx]);  // alias, shares storage
        bag.z_index.push_back(offsets[idx]);
    }
    if (std::find(bag.z_index.begin(), bag.z_index.end(), 0) == bag.z_index.end()) {
        throw ContractError("bag_features: offset 0 (the target) is missing");
    }

    // Stacked copy, deliberately outside any tape.
    const std::int64_t stride = shape_size(base);
    Shape stacked{static_cast<std::int64_t>(bag.members.size())};
    stacked.insert(stacked.end(), base.begin(), base.end());
    bag.maps = Tensor::zeros(stacked);
    for (std::size_t i = 0; i < bag.members.size(); ++i) {
        std::memcpy(bag.maps.values().data() + static_cast<std::int64_t>(i) * stride,
                    bag.members[i].values().data(),
                    static_cast<std::size_t>(stride) * sizeof(double));
    }
    return bag;
}

AttnMode attn_mode_from_string(const std::string& name) {
    if (name == "none") return AttnMode::none;
    if (name == "channel") return AttnMode::channel;
    if (name == "spatial") return AttnMode::spatial;
    if (name == "both") return AttnMode::both;
    throw ConfigError("unknown attention mode '" + name + "' (none|channel|spatial|both)");
}

std::string to_string(AttnMode mode) {
    switch (mode) {
        case AttnMode::none: return "none";
        case AttnMode::channel: return "channel";
        case AttnMode::spatial: return "spatial";
        case AttnMode::both: return "both";
    }
    throw ConfigError("invalid attention mode value");
}

// ---- channel branch ----------------------------------------------------------

ChannelAttnParams ChannelAttnParams::init(int c, int r, Rng& rng) {
    if (c < 1 || r < 1) {
        throw ConfigError("channel attention: need C >= 1 and r >= 1");
    }
    if (c % r != 0) {
        throw ConfigError("channel attention: reduction " + std::to_string(r) +
                          " does not divide C=" + std::to_string(c));
    }
    const std::int64_t cr = c / r;
    ChannelAttnParams p;
    p.r = r;
    const double a_embed = fan_limit(c, cr);
    p.w1 = Tensor::uniform({cr, c}, -a_embed, a_embed, rng, true);
    p.w2 = Tensor::uniform({c, cr}, -a_embed, a_embed, rng, true);
    const double a_gate = fan_limit(c, c);
    p.gate_conv = Tensor::uniform({c, c, 1, 1}, -a_gate, a_gate, rng, true);
    p.gate_bias = Tensor::full({c}, kGateBiasInit, true);
    return p;
}

std::vector<Tensor> ChannelAttnParams::parameters() const {
    return {w1, w2, gate_conv, gate_bias};
}

Tensor channel_embed(const Tensor& x, const ChannelAttnParams& p) {
    if (x.rank() != 3) {
        throw DimensionError("channel_embed: expected [C,H,W], got " + shape_str(x.shape()));
    }
    const std::int64_t c = x.dim(0);
    if (p.r < 1 || c % p.r != 0) {
        throw ConfigError("channel_embed: reduction " + std::to_string(p.r) +
                          " does not divide C=" + std::to_string(c));
    }
    if (p.w1.dim(1) != c || p.w1.dim(0) != c / p.r || p.w2.dim(0) != c ||
        p.w2.dim(1) != c / p.r) {
        throw DimensionError("channel_embed: weights " + shape_str(p.w1.shape()) + "/" +
                             shape_str(p.w2.shape()) + " do not fit input " +
                             shape_str(x.shape()));
    }
    Tensor avg = reshape(global_avg_pool(x), {c, 1});
    Tensor hidden = relu(matmul(p.w1, avg));
    return reshape(matmul(p.w2, hidden), {c});
}

std::pair<Tensor, Tensor> channel_attention(const TargetFeature& tgt, const FeatureBag& bag,
                                            const ChannelAttnParams& p) {
    check_bag(bag, tgt, "channel_attention");
    const std::int64_t c = tgt.map.dim(0);
    const int n = bag.n();

    Tensor e_tgt = channel_embed(tgt.map, p);
    std::vector<Tensor> embeds;
    std::vector<Tensor> scores;
    embeds.reserve(static_cast<std::size_t>(n));
    scores.reserve(static_cast<std::size_t>(n));
    for (const Tensor& member : bag.members) {
        Tensor e = channel_embed(member, p);
        scores.push_back(dot(e_tgt, e));
        embeds.push_back(std::move(e));
    }

    Tensor slices = softmax(reshape(stack(scores), {1, n}), 1);
    Tensor bag_embeds = stack(embeds);                    // [N, C]
    Tensor mixed = matmul(slices, bag_embeds);            // [1, C]
    Tensor pre = reshape(relu(mixed), {c, 1, 1});
    pre = add_channel_bias(conv2d(pre, p.gate_conv, 0), p.gate_bias);
    return {sigmoid(pre), slices};
}

// ---- spatial branch ----------------------------------------------------------

SpatialAttnParams SpatialAttnParams::init(int c_s, int k, Rng& rng) {
    if (c_s < 1) {
        throw ConfigError("spatial attention: need C_s >= 1");
    }
    if (k < 1 || k % 2 == 0) {
        throw ConfigError("spatial attention: kernel size must be odd, got " + std::to_string(k));
    }
    SpatialAttnParams p;
    p.k = k;
    p.c_s = c_s;
    const double a_embed = fan_limit(2 * k * k, static_cast<std::int64_t>(c_s) * k * k);
    p.embed_conv = Tensor::uniform({c_s, 2, k, k}, -a_embed, a_embed, rng, true);
    const double a_gate = fan_limit(c_s, 1);
    p.gate_conv = Tensor::uniform({1, c_s, 1, 1}, -a_gate, a_gate, rng, true);
    p.gate_bias = Tensor::full({1}, kGateBiasInit, true);
    return p;
}

std::vector<Tensor> SpatialAttnParams::parameters() const {
    return {embed_conv, gate_conv, gate_bias};
}

Tensor spatial_embed(const Tensor& x, const SpatialAttnParams& p) {
    if (x.rank() != 3) {
        throw DimensionError("spatial_embed: expected [C,H,W], got " + shape_str(x.shape()));
    }
    if (p.embed_conv.rank() != 4 || p.embed_conv.dim(1) != 2) {
        throw DimensionError("spatial_embed: embed weights must be [C_s,2,k,k], got " +
                             shape_str(p.embed_conv.shape()));
    }
    const int pad = static_cast<int>((p.embed_conv.dim(2) - 1) / 2);
    return conv2d(channel_pool(x), p.embed_conv, pad);
}

std::pair<Tensor, Tensor> spatial_attention(const TargetFeature& tgt, const FeatureBag& bag,
                                            const SpatialAttnParams& p) {
    check_bag(bag, tgt, "spatial_attention");
    const int n = bag.n();

    Tensor e_tgt = spatial_embed(tgt.map, p);
    const std::int64_t flat = e_tgt.size();
    const Shape embed_shape = e_tgt.shape();
    Tensor e_tgt_flat = reshape(e_tgt, {flat});

    std::vector<Tensor> embeds;
    std::vector<Tensor> scores;
    embeds.reserve(static_cast<std::size_t>(n));
    scores.reserve(static_cast<std::size_t>(n));
    for (const Tensor& member : bag.members) {
        Tensor e = reshape(spatial_embed(member, p), {flat});
        scores.push_back(dot(e_tgt_flat, e));
        embeds.push_back(std::move(e));
    }

    Tensor slices = softmax(reshape(stack(scores), {1, n}), 1);
    Tensor bag_embeds = stack(embeds);          // [N, C_s*H*W]
    Tensor mixed = matmul(slices, bag_embeds);  // [1, C_s*H*W]
    Tensor pre = relu(reshape(mixed, embed_shape));
    pre = add_channel_bias(conv2d(pre, p.gate_conv, 0), p.gate_bias);
    return {sigmoid(pre), slices};
}

// ---- composition ---------------------------------------------------------------

VaOutput va_forward(const TargetFeature& tgt, const FeatureBag& bag, const ChannelAttnParams& cp,
                    const SpatialAttnParams& sp, AttnMode mode) {
    VaOutput result;
    const bool use_channel = mode == AttnMode::channel || mode == AttnMode::both;
    const bool use_spatial = mode == AttnMode::spatial || mode == AttnMode::both;

    // Gates are derived from the original, un-gated features.
    if (use_channel) {
        auto [gate, slices] = channel_attention(tgt, bag, cp);
        result.weights.channel_gate = gate;
        result.weights.channel_slices = slices;
    }
    if (use_spatial) {
        auto [gate, slices] = spatial_attention(tgt, bag, sp);
        result.weights.spatial_gate = gate;
        result.weights.spatial_slices = slices;
    }

    Tensor out = tgt.map;
    if (use_channel) {
        out = mul_broadcast(out, result.weights.channel_gate);
    }
    if (use_spatial) {
        out = mul_broadcast(out, result.weights.spatial_gate);
    }
    result.out = out;
    return result;
}

// ---- parameter sets / checkpoints ----------------------------------------------

VaParams VaParams::init(int c, int r, int k, int c_s, int n_default, int levels, Rng& rng) {
    if (levels < 1) {
        throw ConfigError("va params: need at least one pyramid level");
    }
    if (n_default < 1) {
        throw ConfigError("va params: default bag size must be >= 1");
    }
    VaParams params;
    params.c = c;
    params.r = r;
    params.k = k;
    params.c_s = c_s;
    params.n_default = n_default;
    params.channel.reserve(static_cast<std::size_t>(levels));
    params.spatial.reserve(static_cast<std::size_t>(levels));
    for (int i = 0; i < levels; ++i) {
        params.channel.push_back(ChannelAttnParams::init(c, r, rng));
        params.spatial.push_back(SpatialAttnParams::init(c_s, k, rng));
    }
    return params;
}

std::vector<Tensor> VaParams::parameters() const {
    std::vector<Tensor> all;
    for (std::size_t i = 0; i < channel.size(); ++i) {
        const auto cp = channel[i].parameters();
        const auto sp = spatial[i].parameters();
        all.insert(all.end(), cp.begin(), cp.end());
        all.insert(all.end(), sp.begin(), sp.end());
    }
    return all;
}

namespace {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

std::vector<NamedTensor> manifest_order(const VaParams& p) {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < p.channel.size(); ++i) {
        const std::string prefix = "level" + std::to_string(i) + ".";
        out.push_back({prefix + "channel.w1", p.channel[i].w1});
        out.push_back({prefix + "channel.w2", p.channel[i].w2});
        out.push_back({prefix + "channel.gate_conv", p.channel[i].gate_conv});
        out.push_back({prefix + "channel.gate_bias", p.channel[i].gate_bias});
        out.push_back({prefix + "spatial.embed_conv", p.spatial[i].embed_conv});
        out.push_back({prefix + "spatial.gate_conv", p.spatial[i].gate_conv});
        out.push_back({prefix + "spatial.gate_bias", p.spatial[i].gate_bias});
    }
    return out;
}

}  // namespace

void save_va_params(const VaParams& params, const std::string& path) {
    if (params.channel.size() != params.spatial.size()) {
        throw ContractError("save_va_params: channel/spatial level counts differ");
    }
    const auto named = manifest_order(params);

    nlohmann::ordered_json manifest;
    manifest["module"] = "va-attention";
    manifest["C"] = params.c;
    manifest["r"] = params.r;
    manifest["k"] = params.k;
    manifest["C_s"] = params.c_s;
    manifest["N_default"] = params.n_default;
    manifest["level_count"] = params.level_count();
    auto& tensors = manifest["tensors"];
    tensors = nlohmann::ordered_json::array();
    for (const auto& nt : named) {
        tensors.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("save_va_params: cannot open " + path);
    }
    out << manifest.dump() << "\n";
    for (const auto& nt : named) {
        std::vector<double> payload(nt.tensor.values().begin(), nt.tensor.values().end());
        detail::swap_le_inplace(payload.data(), payload.size());
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size() * sizeof(double)));
    }
    if (!out) {
        throw IoError("save_va_params: write failed for " + path);
    }
}

VaParams load_va_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("load_va_params: cannot open " + path);
    }
    std::string header;
    if (!std::getline(in, header)) {
        throw ParseError("load_va_params: missing manifest line", 0);
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(header);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("load_va_params: bad manifest JSON: " + std::string(e.what()), e.byte);
    }
    if (manifest.value("module", "") != "va-attention") {
        throw ParseError("load_va_params: manifest module is not va-attention", 0);
    }

    VaParams params;
    params.c = manifest.at("C").get<int>();
    params.r = manifest.at("r").get<int>();
    params.k = manifest.at("k").get<int>();
    params.c_s = manifest.at("C_s").get<int>();
    params.n_default = manifest.at("N_default").get<int>();
    const int levels = manifest.at("level_count").get<int>();
    if (levels < 1 || params.c < 1 || params.r < 1 || params.c % params.r != 0) {
        throw ParseError("load_va_params: inconsistent manifest dimensions", 0);
    }

    // A throwaway rng: values are overwritten by the payload below.
    Rng scratch(0);
    VaParams expect = VaParams::init(params.c, params.r, params.k, params.c_s, params.n_default,
                                     levels, scratch);
    auto named = manifest_order(expect);
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != named.size()) {
        throw ParseError("load_va_params: manifest lists " + std::to_string(tensors.size()) +
                             " tensors, expected " + std::to_string(named.size()),
                         0);
    }

    std::size_t offset = header.size() + 1;
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto shape = tensors[i].at("shape").get<Shape>();
        if (shape != named[i].tensor.shape()) {
            throw ParseError("load_va_params: tensor " + named[i].name + " has shape " +
                                 shape_str(shape) + ", expected " +
                                 shape_str(named[i].tensor.shape()),
                             offset);
        }
        auto span = named[i].tensor.values();
        in.read(reinterpret_cast<char*>(span.data()),
                static_cast<std::streamsize>(span.size() * sizeof(double)));
        if (static_cast<std::size_t>(in.gcount()) != span.size() * sizeof(double)) {
            throw ParseError("load_va_params: truncated payload at tensor " + named[i].name,
                             offset + static_cast<std::size_t>(in.gcount()));
        }
        detail::swap_le_inplace(span.data(), span.size());
        offset += span.size() * sizeof(double);
    }
    return expect;
}

}  // namespace vatt
