#pragma once

#include <cstdint>
#include <vector>

#include "vatt/volume.hpp"

namespace vatt {

// Rendering levels: background, liver offset, blob contrast. Blobs (lesion
// cross-sections and distractors) share one contrast, and distractors persist
// exactly as many slices as a 2.5D slab spans — so no single slab separates
// the kinds; only z-context wider than a slab (a slice bag) can.
inline constexpr double kPhantomBase = 0.28;
inline constexpr double kPhantomLiverDelta = 0.10;
inline constexpr double kPhantomContrast = 0.18;
inline constexpr std::int64_t kLesionMinSlices = 5;
inline constexpr std::int64_t kDistractorSlices = 3;

struct PhantomConfig {
    std::int64_t nz = 32, ny = 64, nx = 64;
    int n_lesions = 3;
    double radius_lo_mm = 5.0, radius_hi_mm = 8.0;  // in-plane semi-axis range
    double distractor_rate = 1.0;                   // per-slice Poisson rate
    double noise_sigma = 0.10;
    std::uint64_t seed = 12;

    void validate() const;  // ConfigError on impossible geometry
};

enum class BlobKind { lesion, distractor };

struct BlobInfo {
    BlobKind kind = BlobKind::lesion;
    double zc = 0.0, yc = 0.0, xc = 0.0;  // center in voxel coordinates
    double rz = 0.0, ry = 0.0, rx = 0.0;  // semi-axes (rz in slices)
    std::int64_t z_lo = 0, z_hi = 0;      // inclusive slice extent
    std::int64_t voxel_count = 0;

    std::int64_t persistence() const { return z_hi - z_lo + 1; }
};

struct Phantom {
    Volume vol;       // unit-space intensities in [0,1]
    MaskVolume mask;  // 0 background, 1 liver, 2 lesion
    std::vector<BlobInfo> blobs;
};

// Deterministic synthetic case: ellipsoidal lesions persisting >= 5 slices
// and slab-width (3-slice) distractor blobs, both inside a cylindrical liver,
// plus i.i.d. Gaussian noise. Identical config (seed included) gives
// bit-identical output.
Phantom gen_phantom(const PhantomConfig& cfg);

}  // namespace vatt
