#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vatt/tensor.hpp"

namespace vatt {

// Bag of long-range features around one target slice: the per-image maps
// sorted by their signed z offset. `members` are aliases of the caller's
// tensors (shared storage), so gradients reach them; `maps` is a stacked
// [N,C,H,W] copy for inspection and serialization, not tape-connected.
struct FeatureBag {
    std::vector<Tensor> members;  // z-ascending, each [C,H,W]
    std::vector<int> z_index;     // strictly increasing signed offsets, contains 0
    Tensor maps;                  // [N,C,H,W]

    int n() const { return static_cast<int>(members.size()); }
    int target_index() const;  // position of offset 0
};

FeatureBag bag_features(std::span<const Tensor> per_image_maps, std::span<const int> offsets);

struct TargetFeature {
    Tensor map;  // [C,H,W]
    int pyramid_level = 0;
};

// Fresh gates start mostly open (sigmoid(2) ~ 0.88) so an attention-gated
// model begins near its ungated counterpart and learns what to suppress.
inline constexpr double kGateBiasInit = 2.0;

// Channel branch: squeeze-excite style embedding with reduction r plus a
// 1x1 gate conv.
struct ChannelAttnParams {
    Tensor w1;         // [C/r, C]
    Tensor w2;         // [C, C/r]
    Tensor gate_conv;  // [C, C, 1, 1]
    Tensor gate_bias;  // [C]
    int r = 16;

    static ChannelAttnParams init(int c, int r, Rng& rng);
    std::vector<Tensor> parameters() const;
    int channels() const { return static_cast<int>(w2.dim(0)); }
};

// Spatial branch: embed the 2-plane channel pool with a kxk conv, then a
// 1x1 gate conv down to a single plane.
struct SpatialAttnParams {
    Tensor embed_conv;  // [C_s, 2, k, k]
    Tensor gate_conv;   // [1, C_s, 1, 1]
    Tensor gate_bias;   // [1]
    int k = 7;
    int c_s = 1;

    static SpatialAttnParams init(int c_s, int k, Rng& rng);
    std::vector<Tensor> parameters() const;
};

struct AttnWeights {
    Tensor channel_slices;  // [1,N]
    Tensor spatial_slices;  // [1,N]
    Tensor channel_gate;    // [C,1,1]
    Tensor spatial_gate;    // [1,H,W]
};

enum class AttnMode { none, channel, spatial, both };

AttnMode attn_mode_from_string(const std::string& name);
std::string to_string(AttnMode mode);

// w2 . relu(w1 . global_avg_pool(x)); shared across target and bag members.
Tensor channel_embed(const Tensor& x, const ChannelAttnParams& p);

// Returns (gate [C,1,1], slices [1,N]).
std::pair<Tensor, Tensor> channel_attention(const TargetFeature& tgt, const FeatureBag& bag,
                                            const ChannelAttnParams& p);

// embed_conv applied (pad (k-1)/2) to the [max, avg] channel pool of x.
Tensor spatial_embed(const Tensor& x, const SpatialAttnParams& p);

// Returns (gate [1,H,W], slices [1,N]); scores are flattened inner products.
std::pair<Tensor, Tensor> spatial_attention(const TargetFeature& tgt, const FeatureBag& bag,
                                            const SpatialAttnParams& p);

struct VaOutput {
    Tensor out;  // [C,H,W]
    AttnWeights weights;
};

// Both gates are computed from the ORIGINAL features and applied
// sequentially (channel, then spatial). The mode selects which gates are
// applied; weights fields for disabled branches are left default-constructed.
VaOutput va_forward(const TargetFeature& tgt, const FeatureBag& bag, const ChannelAttnParams& cp,
                    const SpatialAttnParams& sp, AttnMode mode);

// One parameter set per pyramid level; levels are independent.
struct VaParams {
    int c = 0;
    int r = 16;
    int k = 7;
    int c_s = 1;
    int n_default = 9;
    std::vector<ChannelAttnParams> channel;  // size = level_count
    std::vector<SpatialAttnParams> spatial;  // size = level_count

    int level_count() const { return static_cast<int>(channel.size()); }
    static VaParams init(int c, int r, int k, int c_s, int n_default, int levels, Rng& rng);
    std::vector<Tensor> parameters() const;
};

// Single-file checkpoint: one-line JSON manifest, then the tensors as raw
// little-endian f64 in manifest order.
void save_va_params(const VaParams& params, const std::string& path);
VaParams load_va_params(const std::string& path);

}  // namespace vatt
