#include "vatt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vatt/errors.hpp"
#include "vatt/random.hpp"

namespace vatt {

namespace {

constexpr double kLesionRzLo = 2.6;  // slices; keeps the z-extent >= 5
constexpr double kLesionRzHi = 4.4;
constexpr int kMaxPlacementTries = 2000;

double liver_radius(const PhantomConfig& cfg) {
    return 0.40 * static_cast<double>(std::min(cfg.ny, cfg.nx));
}

bool inside_liver(const PhantomConfig& cfg, double y, double x, double margin) {
    const double cy = 0.5 * static_cast<double>(cfg.ny - 1);
    const double cx = 0.5 * static_cast<double>(cfg.nx - 1);
    const double r = liver_radius(cfg) - margin;
    return (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
}

// Rasterize one ellipsoid; returns the voxels inside and the realized slice
// extent. Does not touch the mask.
struct Footprint {
    std::vector<std::int64_t> voxels;
    std::int64_t z_lo = 0, z_hi = -1;
};

Footprint rasterize(const PhantomConfig& cfg, const BlobInfo& b) {
    Footprint fp;
    const auto z0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(b.zc - b.rz)));
    const auto z1 =
        std::min<std::int64_t>(cfg.nz - 1, static_cast<std::int64_t>(std::ceil(b.zc + b.rz)));
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(b.yc - b.ry)));
    const auto y1 =
        std::min<std::int64_t>(cfg.ny - 1, static_cast<std::int64_t>(std::ceil(b.yc + b.ry)));
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(b.xc - b.rx)));
    const auto x1 =
        std::min<std::int64_t>(cfg.nx - 1, static_cast<std::int64_t>(std::ceil(b.xc + b.rx)));
    for (std::int64_t z = z0; z <= z1; ++z) {
        for (std::int64_t y = y0; y <= y1; ++y) {
            for (std::int64_t x = x0; x <= x1; ++x) {
                const double fz = (static_cast<double>(z) - b.zc) / b.rz;
                const double fy = (static_cast<double>(y) - b.yc) / b.ry;
                const double fx = (static_cast<double>(x) - b.xc) / b.rx;
                if (fz * fz + fy * fy + fx * fx <= 1.0) {
                    fp.voxels.push_back((z * cfg.ny + y) * cfg.nx + x);
                }
            }
        }
    }
    // Voxels are generated z-major, so the slice extent reads off the ends.
    if (!fp.voxels.empty()) {
        fp.z_lo = fp.voxels.front() / (cfg.ny * cfg.nx);
        fp.z_hi = fp.voxels.back() / (cfg.ny * cfg.nx);
    }
    return fp;
}

bool lesions_too_close(const BlobInfo& a, const BlobInfo& b) {
    const bool z_near = std::abs(a.zc - b.zc) <= a.rz + b.rz + 1.0;
    const double dy = a.yc - b.yc, dx = a.xc - b.xc;
    const double planar = std::sqrt(dy * dy + dx * dx);
    const bool plane_near = planar <= std::max(a.ry, a.rx) + std::max(b.ry, b.rx) + 3.0;
    return z_near && plane_near;
}

}  // namespace

void PhantomConfig::validate() const {
    if (nz < 1 || ny < 1 || nx < 1) {
        throw ConfigError("phantom: grid dims must be >= 1");
    }
    if (n_lesions < 0) {
        throw ConfigError("phantom: n_lesions must be >= 0");
    }
    if (!(radius_lo_mm > 0.0) || !(radius_hi_mm >= radius_lo_mm)) {
        throw ConfigError("phantom: lesion radius range must be positive and ordered");
    }
    if (!(distractor_rate >= 0.0)) {
        throw ConfigError("phantom: distractor_rate must be >= 0");
    }
    if (!(noise_sigma >= 0.0)) {
        throw ConfigError("phantom: noise_sigma must be >= 0");
    }
    if (n_lesions > 0) {
        if (static_cast<double>(nz) < 2.0 * kLesionRzHi + 4.0) {
            throw ConfigError("phantom: grid too shallow for a " +
                              std::to_string(kLesionMinSlices) + "-slice lesion");
        }
        if (radius_hi_mm + 4.0 > liver_radius(*this)) {
            throw ConfigError("phantom: lesion radius " + std::to_string(radius_hi_mm) +
                              "mm cannot fit inside the liver region");
        }
    }
}

Phantom gen_phantom(const PhantomConfig& cfg) {
    cfg.validate();

    Phantom out;
    out.vol = Volume::create(cfg.nz, cfg.ny, cfg.nx, 1.0, 1.0, 1.0, IntensitySpace::unit);
    out.mask = MaskVolume::create(cfg.nz, cfg.ny, cfg.nx, 1.0, 1.0, 1.0);

    const double cy = 0.5 * static_cast<double>(cfg.ny - 1);
    const double cx = 0.5 * static_cast<double>(cfg.nx - 1);

    // Liver: a cylinder through all slices.
    for (std::int64_t z = 0; z < cfg.nz; ++z) {
        for (std::int64_t y = 0; y < cfg.ny; ++y) {
            for (std::int64_t x = 0; x < cfg.nx; ++x) {
                if (inside_liver(cfg, static_cast<double>(y), static_cast<double>(x), 0.0)) {
                    out.mask.at(z, y, x) = 1;
                }
            }
        }
    }

    // Lesions: rejection-sampled ellipsoids, re-drawn until they persist for
    // at least kLesionMinSlices slices and keep clear of each other.
    Rng rng_lesion(derive_seed(cfg.seed, "phantom-lesions"));
    std::vector<Footprint> lesion_fp;
    for (int i = 0; i < cfg.n_lesions; ++i) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxPlacementTries && !placed; ++attempt) {
            BlobInfo b;
            b.kind = BlobKind::lesion;
            b.ry = rng_lesion.uniform(cfg.radius_lo_mm, cfg.radius_hi_mm);
            b.rx = rng_lesion.uniform(cfg.radius_lo_mm, cfg.radius_hi_mm);
            b.rz = rng_lesion.uniform(kLesionRzLo, kLesionRzHi);
            b.zc = rng_lesion.uniform(b.rz + 0.5, static_cast<double>(cfg.nz - 1) - b.rz - 0.5);
            const double reach = std::max(b.ry, b.rx);
            b.yc = rng_lesion.uniform(cy - liver_radius(cfg), cy + liver_radius(cfg));
            b.xc = rng_lesion.uniform(cx - liver_radius(cfg), cx + liver_radius(cfg));
            if (!inside_liver(cfg, b.yc, b.xc, reach + 2.0)) {
                continue;
            }
            bool clash = false;
            for (const BlobInfo& other : out.blobs) {
                if (lesions_too_close(b, other)) {
                    clash = true;
                    break;
                }
            }
            if (clash) {
                continue;
            }
            Footprint fp = rasterize(cfg, b);
            if (fp.voxels.empty() || fp.z_hi - fp.z_lo + 1 < kLesionMinSlices) {
                continue;
            }
            b.z_lo = fp.z_lo;
            b.z_hi = fp.z_hi;
            b.voxel_count = static_cast<std::int64_t>(fp.voxels.size());
            for (const std::int64_t v : fp.voxels) {
                out.mask.values[static_cast<std::size_t>(v)] = 2;
            }
            out.blobs.push_back(b);
            lesion_fp.push_back(std::move(fp));
            placed = true;
        }
        if (!placed) {
            throw ConfigError("phantom: could not place lesion " + std::to_string(i) +
                              " after " + std::to_string(kMaxPlacementTries) + " attempts");
        }
    }

    // Distractors: lens-shaped blobs spanning exactly kDistractorSlices
    // slices — the width of one 2.5D slab — with the same radius family and
    // the same contrast as lesion cross-sections, kept clear of lesion
    // footprints. They are liver tissue in the mask (label 1) — never ground
    // truth.
    Rng rng_distract(derive_seed(cfg.seed, "phantom-distractors"));
    std::vector<std::int64_t> distractor_voxels;
    for (std::int64_t z = 1; z + 1 < cfg.nz; ++z) {
        const int count = cfg.distractor_rate > 0.0 ? rng_distract.poisson(cfg.distractor_rate)
                                                    : 0;
        for (int k = 0; k < count; ++k) {
            for (int attempt = 0; attempt < 100; ++attempt) {
                BlobInfo b;
                b.kind = BlobKind::distractor;
                const double r = rng_distract.uniform(cfg.radius_lo_mm, cfg.radius_hi_mm);
                b.ry = r;
                b.rx = r;
                b.rz = 1.3;  // covers z-1..z+1 and no further
                b.zc = static_cast<double>(z);
                b.yc = rng_distract.uniform(cy - liver_radius(cfg), cy + liver_radius(cfg));
                b.xc = rng_distract.uniform(cx - liver_radius(cfg), cx + liver_radius(cfg));
                if (!inside_liver(cfg, b.yc, b.xc, r + 2.0)) {
                    continue;
                }
                bool clash = false;
                for (const BlobInfo& other : out.blobs) {
                    if (other.kind != BlobKind::lesion) continue;
                    const bool z_near =
                        std::abs(b.zc - other.zc) <= other.rz + 2.0;
                    const double dy = b.yc - other.yc, dx = b.xc - other.xc;
                    const bool plane_near = std::sqrt(dy * dy + dx * dx) <=
                                            r + std::max(other.ry, other.rx) + 2.0;
                    if (z_near && plane_near) {
                        clash = true;
                        break;
                    }
                }
                if (clash) {
                    continue;
                }
                Footprint fp = rasterize(cfg, b);
                if (fp.voxels.empty()) {
                    continue;
                }
                b.z_lo = fp.z_lo;
                b.z_hi = fp.z_hi;
                b.voxel_count = static_cast<std::int64_t>(fp.voxels.size());
                distractor_voxels.insert(distractor_voxels.end(), fp.voxels.begin(),
                                         fp.voxels.end());
                out.blobs.push_back(b);
                break;
            }
        }
    }

    // Render: base + liver offset + shared blob contrast + noise, clamped to
    // the unit interval.
    for (std::int64_t i = 0; i < out.vol.size(); ++i) {
        const auto ui = static_cast<std::size_t>(i);
        double v = kPhantomBase;
        if (out.mask.values[ui] != 0) v += kPhantomLiverDelta;
        if (out.mask.values[ui] == 2) v += kPhantomContrast;
        out.vol.values[ui] = v;
    }
    std::sort(distractor_voxels.begin(), distractor_voxels.end());
    distractor_voxels.erase(std::unique(distractor_voxels.begin(), distractor_voxels.end()),
                            distractor_voxels.end());
    for (const std::int64_t v : distractor_voxels) {
        out.vol.values[static_cast<std::size_t>(v)] += kPhantomContrast;
    }
    if (cfg.noise_sigma > 0.0) {
        Rng rng_noise(derive_seed(cfg.seed, "phantom-noise"));
        for (auto& v : out.vol.values) {
            v += cfg.noise_sigma * rng_noise.normal();
        }
    }
    for (auto& v : out.vol.values) {
        v = std::clamp(v, 0.0, 1.0);
    }
    return out;
}

}  // namespace vatt
