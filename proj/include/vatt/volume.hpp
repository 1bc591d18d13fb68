#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vatt/errors.hpp"

namespace vatt {

enum class IntensitySpace { hu, unit };

// Scalar 3D grid, z-major in memory (index = (z*ny + y)*nx + x). Values are
// held in f64 for numeric work; the on-disk `.vol` payload is f32.
struct Volume {
    std::int64_t nz = 0, ny = 0, nx = 0;
    double dz = 1.0, dy = 1.0, dx = 1.0;  // spacing in mm
    IntensitySpace intensity = IntensitySpace::hu;
    std::vector<double> values;

    std::int64_t size() const { return nz * ny * nx; }
    double& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return values[static_cast<std::size_t>((z * ny + y) * nx + x)];
    }
    double at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return values[static_cast<std::size_t>((z * ny + y) * nx + x)];
    }
    static Volume create(std::int64_t nz, std::int64_t ny, std::int64_t nx, double dz, double dy,
                         double dx, IntensitySpace intensity);
};

// Label grid with the same geometry; labels: 0 background, 1 liver, 2 lesion.
struct MaskVolume {
    std::int64_t nz = 0, ny = 0, nx = 0;
    double dz = 1.0, dy = 1.0, dx = 1.0;
    std::vector<std::uint8_t> values;

    std::int64_t size() const { return nz * ny * nx; }
    std::uint8_t& at(std::int64_t z, std::int64_t y, std::int64_t x) {
        return values[static_cast<std::size_t>((z * ny + y) * nx + x)];
    }
    std::uint8_t at(std::int64_t z, std::int64_t y, std::int64_t x) const {
        return values[static_cast<std::size_t>((z * ny + y) * nx + x)];
    }
    static MaskVolume create(std::int64_t nz, std::int64_t ny, std::int64_t nx, double dz,
                             double dy, double dx);
};

// `.vol`: one-line JSON header {dims:[Z,Y,X], spacing_mm:[dz,dy,dx],
// dtype:"f32", intensity:"HU"|"unit"} + '\n' + little-endian raw voxels,
// z-major. `.msk`: same header with dtype:"u8". Writes are atomic
// (temp file + rename).
void write_volume(const Volume& v, const std::string& path);
Volume read_volume(const std::string& path);
void write_mask(const MaskVolume& m, const std::string& path);
MaskVolume read_mask(const std::string& path);

}  // namespace vatt
