#include "mthg/grid_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace mthg {

namespace {

constexpr char kMagic[4] = {'G', 'R', 'D', '1'};

static_assert(std::endian::native == std::endian::little,
              "grd1 reader assumes a little-endian host");

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

}  // namespace

void save_grid(const std::filesystem::path& path, const LayerGrid& grid) {
    grid.validate("save_grid(" + path.string() + ")");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("save_grid: cannot open '" + path.string() + "' for writing");
    }
    out.write(kMagic, 4);
    write_u32(out, static_cast<std::uint32_t>(grid.width));
    write_u32(out, static_cast<std::uint32_t>(grid.height));
    std::vector<float> row(grid.values.size());
    for (std::size_t i = 0; i < grid.values.size(); ++i) {
        row[i] = grid.mask[i] ? static_cast<float>(grid.values[i])
                              : std::numeric_limits<float>::quiet_NaN();
    }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!out) {
        throw FormatError("save_grid: write failed for '" + path.string() + "'");
    }
}

LayerGrid load_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("load_grid: cannot open '" + path.string() + "'");
    }
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("load_grid: bad magic at byte 0 in '" + path.string() + "'");
    }
    std::uint32_t w = 0, h = 0;
    in.read(reinterpret_cast<char*>(&w), sizeof(w));
    in.read(reinterpret_cast<char*>(&h), sizeof(h));
    if (!in) {
        throw FormatError("load_grid: truncated header at byte 4 in '" + path.string() + "'");
    }
    const std::size_t count = static_cast<std::size_t>(w) * h;
    std::vector<float> raw(count);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float)) {
        const std::size_t offset = 12 + static_cast<std::size_t>(in.gcount());
        throw FormatError("load_grid: truncated payload at byte " + std::to_string(offset) +
                          " in '" + path.string() + "'");
    }
    LayerGrid grid(static_cast<int>(w), static_cast<int>(h));
    for (std::size_t i = 0; i < count; ++i) {
        if (std::isnan(raw[i])) {
            grid.values[i] = 0.0;
            grid.mask[i] = 0;
        } else {
            grid.values[i] = static_cast<double>(raw[i]);
            grid.mask[i] = 1;
        }
    }
    return grid;
}

}  // namespace mthg
