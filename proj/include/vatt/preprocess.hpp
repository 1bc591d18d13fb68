#pragma once

#include <vector>

#include "vatt/tensor.hpp"
#include "vatt/volume.hpp"

namespace vatt {

// 3-channel image of adjacent axial slices (z-1, z, z+1), boundary-replicated.
struct Slab25D {
    Tensor channels;  // [3,H,W]
    std::int64_t center_z = 0;
};

// Symmetric bag of slice windows around a target slice.
struct BagSpec {
    int n_images = 9;  // odd
    std::vector<int> offsets() const;  // {-(N-1)/2, ..., +(N-1)/2}
    void validate() const;
};

// (clip(v, lo, hi) - lo) / (hi - lo); HU in, unit space out.
Volume clamp_normalize(const Volume& v, double lo = -200.0, double hi = 300.0);

// Linear interpolation along z onto spacing target_dz; origin at slice 0 and
// new Z = floor((Z-1)*dz/target_dz) + 1. A volume already at target_dz is
// returned unchanged.
Volume resample_z(const Volume& v, double target_dz = 1.5);

// Bilinear (corner-aligned) resample of one slice to target x target.
Tensor rescale_xy(const Tensor& slice, int target);

Slab25D stack_25d(const Volume& v, std::int64_t z);

// Bag member center slices: z+offset clamped to [0, Z-1], ascending.
std::vector<std::int64_t> make_bag_indices(std::int64_t z, const BagSpec& spec, std::int64_t n_z);

}  // namespace vatt
