#include "vatt/volume.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "vatt/endian.hpp"

namespace vatt {

namespace {

void check_geometry(std::int64_t nz, std::int64_t ny, std::int64_t nx, double dz, double dy,
                    double dx) {
    if (nz < 1 || ny < 1 || nx < 1) {
        throw DimensionError("volume: dims must be positive, got [" + std::to_string(nz) + "," +
                             std::to_string(ny) + "," + std::to_string(nx) + "]");
    }
    if (!(dz > 0.0) || !(dy > 0.0) || !(dx > 0.0)) {
        throw ContractError("volume: spacing components must be > 0");
    }
}

std::string intensity_name(IntensitySpace space) {
    return space == IntensitySpace::hu ? "HU" : "unit";
}

struct Header {
    std::int64_t nz, ny, nx;
    double dz, dy, dx;
    std::string dtype;
    std::string intensity;
    std::size_t payload_offset;
};

Header read_header(std::ifstream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError(path + ": missing header line", 0);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path + ": malformed header: " + std::string(e.what()), e.byte);
    }
    Header h;
    try {
        const auto dims = j.at("dims");
        const auto spacing = j.at("spacing_mm");
        if (!dims.is_array() || dims.size() != 3 || !spacing.is_array() || spacing.size() != 3) {
            throw ParseError(path + ": dims and spacing_mm must be 3-element arrays", 0);
        }
        h.nz = dims[0].get<std::int64_t>();
        h.ny = dims[1].get<std::int64_t>();
        h.nx = dims[2].get<std::int64_t>();
        h.dz = spacing[0].get<double>();
        h.dy = spacing[1].get<double>();
        h.dx = spacing[2].get<double>();
        h.dtype = j.at("dtype").get<std::string>();
        h.intensity = j.value("intensity", "HU");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": bad header field: " + std::string(e.what()), 0);
    }
    check_geometry(h.nz, h.ny, h.nx, h.dz, h.dy, h.dx);
    h.payload_offset = line.size() + 1;
    return h;
}

// Writes header+payload to a sibling temp file, then renames into place.
template <typename WritePayload>
void atomic_write(const std::string& path, const nlohmann::ordered_json& header,
                  WritePayload&& write_payload) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + tmp + " for writing");
        }
        out << header.dump() << "\n";
        write_payload(out);
        if (!out) {
            throw IoError("write failed for " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::remove(tmp.c_str());
        throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
    }
}

}  // namespace

Volume Volume::create(std::int64_t nz, std::int64_t ny, std::int64_t nx, double dz, double dy,
                      double dx, IntensitySpace intensity) {
    check_geometry(nz, ny, nx, dz, dy, dx);
    Volume v;
    v.nz = nz;
    v.ny = ny;
    v.nx = nx;
    v.dz = dz;
    v.dy = dy;
    v.dx = dx;
    v.intensity = intensity;
    v.values.assign(static_cast<std::size_t>(nz * ny * nx), 0.0);
    return v;
}

MaskVolume MaskVolume::create(std::int64_t nz, std::int64_t ny, std::int64_t nx, double dz,
                              double dy, double dx) {
    check_geometry(nz, ny, nx, dz, dy, dx);
    MaskVolume m;
    m.nz = nz;
    m.ny = ny;
    m.nx = nx;
    m.dz = dz;
    m.dy = dy;
    m.dx = dx;
    m.values.assign(static_cast<std::size_t>(nz * ny * nx), 0);
    return m;
}

void write_volume(const Volume& v, const std::string& path) {
    check_geometry(v.nz, v.ny, v.nx, v.dz, v.dy, v.dx);
    if (static_cast<std::int64_t>(v.values.size()) != v.size()) {
        throw ContractError("write_volume: value count does not match dims");
    }
    nlohmann::ordered_json header;
    header["dims"] = {v.nz, v.ny, v.nx};
    header["spacing_mm"] = {v.dz, v.dy, v.dx};
    header["dtype"] = "f32";
    header["intensity"] = intensity_name(v.intensity);

    atomic_write(path, header, [&](std::ofstream& out) {
        std::vector<float> payload(v.values.begin(), v.values.end());
        detail::swap_le_inplace(payload.data(), payload.size());
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size() * sizeof(float)));
    });
}

Volume read_volume(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    Header h = read_header(in, path);
    if (h.dtype != "f32") {
        throw ParseError(path + ": dtype '" + h.dtype + "' is not f32", 0);
    }
    IntensitySpace space;
    if (h.intensity == "HU") {
        space = IntensitySpace::hu;
    } else if (h.intensity == "unit") {
        space = IntensitySpace::unit;
    } else {
        throw ParseError(path + ": intensity '" + h.intensity + "' is not HU|unit", 0);
    }

    Volume v = Volume::create(h.nz, h.ny, h.nx, h.dz, h.dy, h.dx, space);
    std::vector<float> payload(static_cast<std::size_t>(v.size()));
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != payload.size() * sizeof(float)) {
        throw ParseError(path + ": truncated voxel payload",
                         h.payload_offset + static_cast<std::size_t>(in.gcount()));
    }
    detail::swap_le_inplace(payload.data(), payload.size());
    for (std::size_t i = 0; i < payload.size(); ++i) {
        const float f = payload[i];
        if (!std::isfinite(f)) {
            throw ParseError(path + ": non-finite voxel", h.payload_offset + i * sizeof(float));
        }
        if (space == IntensitySpace::unit && (f < 0.0f || f > 1.0f)) {
            throw ParseError(path + ": unit-space voxel outside [0,1]",
                             h.payload_offset + i * sizeof(float));
        }
        v.values[i] = static_cast<double>(f);
    }
    return v;
}

void write_mask(const MaskVolume& m, const std::string& path) {
    check_geometry(m.nz, m.ny, m.nx, m.dz, m.dy, m.dx);
    if (static_cast<std::int64_t>(m.values.size()) != m.size()) {
        throw ContractError("write_mask: value count does not match dims");
    }
    nlohmann::ordered_json header;
    header["dims"] = {m.nz, m.ny, m.nx};
    header["spacing_mm"] = {m.dz, m.dy, m.dx};
    header["dtype"] = "u8";

    atomic_write(path, header, [&](std::ofstream& out) {
        out.write(reinterpret_cast<const char*>(m.values.data()),
                  static_cast<std::streamsize>(m.values.size()));
    });
}

MaskVolume read_mask(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    Header h = read_header(in, path);
    if (h.dtype != "u8") {
        throw ParseError(path + ": dtype '" + h.dtype + "' is not u8", 0);
    }
    MaskVolume m = MaskVolume::create(h.nz, h.ny, h.nx, h.dz, h.dy, h.dx);
    in.read(reinterpret_cast<char*>(m.values.data()),
            static_cast<std::streamsize>(m.values.size()));
    if (static_cast<std::size_t>(in.gcount()) != m.values.size()) {
        throw ParseError(path + ": truncated label payload",
                         h.payload_offset + static_cast<std::size_t>(in.gcount()));
    }
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        if (m.values[i] > 2) {
            throw ParseError(path + ": label " + std::to_string(int(m.values[i])) +
                                 " outside {0:background,1:liver,2:lesion}",
                             h.payload_offset + i);
        }
    }
    return m;
}

}  // namespace vatt
