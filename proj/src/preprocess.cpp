#include "vatt/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace vatt {

std::vector<int> BagSpec::offsets() const {
    validate();
    std::vector<int> out;
    const int half = (n_images - 1) / 2;
    for (int o = -half; o <= half; ++o) {
        out.push_back(o);
    }
    return out;
}

void BagSpec::validate() const {
    if (n_images < 1 || n_images % 2 == 0) {
        throw ConfigError("bag spec: n_images must be odd and >= 1, got " +
                          std::to_string(n_images));
    }
}

Volume clamp_normalize(const Volume& v, double lo, double hi) {
    if (!(lo < hi)) {
        throw ConfigError("clamp_normalize: need lo < hi, got [" + std::to_string(lo) + "," +
                          std::to_string(hi) + "]");
    }
    if (v.intensity != IntensitySpace::hu) {
        throw ContractError("clamp_normalize: input must be in HU space");
    }
    Volume out = v;
    out.intensity = IntensitySpace::unit;
    const double inv = 1.0 / (hi - lo);
    for (double& x : out.values) {
        x = (std::clamp(x, lo, hi) - lo) * inv;
    }
    return out;
}

Volume resample_z(const Volume& v, double target_dz) {
    if (!(target_dz > 0.0)) {
        throw ConfigError("resample_z: target spacing must be > 0");
    }
    if (v.nz < 2) {
        throw ContractError("resample_z: need at least 2 slices, got " + std::to_string(v.nz));
    }
    if (target_dz == v.dz) {
        return v;
    }
    const std::int64_t new_nz =
        static_cast<std::int64_t>(std::floor(static_cast<double>(v.nz - 1) * v.dz / target_dz)) + 1;
    Volume out = Volume::create(new_nz, v.ny, v.nx, target_dz, v.dy, v.dx, v.intensity);
    const std::int64_t plane = v.ny * v.nx;
    for (std::int64_t zi = 0; zi < new_nz; ++zi) {
        const double s = static_cast<double>(zi) * target_dz / v.dz;
        std::int64_t k = static_cast<std::int64_t>(std::floor(s));
        k = std::clamp<std::int64_t>(k, 0, v.nz - 1);
        const std::int64_t k1 = std::min<std::int64_t>(k + 1, v.nz - 1);
        const double t = s - static_cast<double>(k);
        const double* a = v.values.data() + k * plane;
        const double* b = v.values.data() + k1 * plane;
        double* o = out.values.data() + zi * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
            o[i] = a[i] + t * (b[i] - a[i]);  // preserves constants exactly
        }
    }
    return out;
}

Tensor rescale_xy(const Tensor& slice, int target) {
    if (slice.rank() != 2) {
        throw DimensionError("rescale_xy: expected [H,W], got " + shape_str(slice.shape()));
    }
    if (target < 2) {
        throw ConfigError("rescale_xy: target must be >= 2");
    }
    const std::int64_t h = slice.dim(0), w = slice.dim(1);
    if (h < 2 || w < 2) {
        throw ContractError("rescale_xy: degenerate input " + shape_str(slice.shape()));
    }
    if (h == target && w == target) {
        return slice.clone();
    }
    Tensor out = Tensor::zeros({target, target});
    const double sy = static_cast<double>(h - 1) / static_cast<double>(target - 1);
    const double sx = static_cast<double>(w - 1) / static_cast<double>(target - 1);
    for (std::int64_t i = 0; i < target; ++i) {
        const double fy = static_cast<double>(i) * sy;
        const std::int64_t y0 = std::min<std::int64_t>(static_cast<std::int64_t>(fy), h - 2);
        const double ty = fy - static_cast<double>(y0);
        for (std::int64_t j = 0; j < target; ++j) {
            const double fx = static_cast<double>(j) * sx;
            const std::int64_t x0 = std::min<std::int64_t>(static_cast<std::int64_t>(fx), w - 2);
            const double tx = fx - static_cast<double>(x0);
            const double v00 = slice.at({y0, x0});
            const double v01 = slice.at({y0, x0 + 1});
            const double v10 = slice.at({y0 + 1, x0});
            const double v11 = slice.at({y0 + 1, x0 + 1});
            const double top = v00 + tx * (v01 - v00);
            const double bottom = v10 + tx * (v11 - v10);
            out.at({i, j}) = top + ty * (bottom - top);
        }
    }
    return out;
}

Slab25D stack_25d(const Volume& v, std::int64_t z) {
    if (z < 0 || z >= v.nz) {
        throw ContractError("stack_25d: slice " + std::to_string(z) + " outside [0," +
                            std::to_string(v.nz - 1) + "]");
    }
    Slab25D slab;
    slab.center_z = z;
    slab.channels = Tensor::zeros({3, v.ny, v.nx});
    const std::int64_t plane = v.ny * v.nx;
    const std::int64_t zs[3] = {std::max<std::int64_t>(z - 1, 0), z,
                                std::min<std::int64_t>(z + 1, v.nz - 1)};
    for (int c = 0; c < 3; ++c) {
        const double* src = v.values.data() + zs[c] * plane;
        double* dst = slab.channels.values().data() + c * plane;
        std::copy(src, src + plane, dst);
    }
    return slab;
}

std::vector<std::int64_t> make_bag_indices(std::int64_t z, const BagSpec& spec, std::int64_t n_z) {
    spec.validate();
    if (n_z < 1) {
        throw ContractError("make_bag_indices: empty volume");
    }
    if (z < 0 || z >= n_z) {
        throw ContractError("make_bag_indices: slice " + std::to_string(z) + " outside [0," +
                            std::to_string(n_z - 1) + "]");
    }
    std::vector<std::int64_t> centers;
    for (int o : spec.offsets()) {
        centers.push_back(std::clamp<std::int64_t>(z + o, 0, n_z - 1));
    }
    return centers;
}

}  // namespace vatt
