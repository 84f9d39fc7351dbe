#include "mthg/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mthg {

namespace {

constexpr char kMagic[4] = {'H', 'G', 'M', '1'};

static_assert(std::endian::native == std::endian::little,
              "model container assumes a little-endian host");

void write_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ofstream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_string(std::ofstream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t read_u32(std::ifstream& in, const std::string& path) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw FormatError("load_model: truncated file '" + path + "'");
    return v;
}

std::uint64_t read_u64(std::ifstream& in, const std::string& path) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw FormatError("load_model: truncated file '" + path + "'");
    return v;
}

std::string read_string(std::ifstream& in, const std::string& path) {
    const std::uint32_t len = read_u32(in, path);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw FormatError("load_model: truncated string in '" + path + "'");
    return s;
}

}  // namespace

void save_model(const std::filesystem::path& path, const ModelBlob& blob) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("save_model: cannot open '" + path.string() + "'");
    out.write(kMagic, 4);
    write_u32(out, 1);
    write_string(out, blob.kind);
    write_string(out, blob.hyper_json);
    write_u32(out, static_cast<std::uint32_t>(blob.channel_order.size()));
    for (const auto& name : blob.channel_order) write_string(out, name);
    write_u64(out, blob.params.size());
    out.write(reinterpret_cast<const char*>(blob.params.data()),
              static_cast<std::streamsize>(blob.params.size() * sizeof(double)));
    if (!out) throw FormatError("save_model: write failed for '" + path.string() + "'");
}

ModelBlob load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("load_model: cannot open '" + path.string() + "'");
    char magic[4] = {};
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("load_model: bad magic in '" + path.string() + "'");
    }
    const std::uint32_t version = read_u32(in, path.string());
    if (version != 1) {
        throw FormatError("load_model: unsupported version " + std::to_string(version));
    }
    ModelBlob blob;
    blob.kind = read_string(in, path.string());
    blob.hyper_json = read_string(in, path.string());
    const std::uint32_t channels = read_u32(in, path.string());
    blob.channel_order.reserve(channels);
    for (std::uint32_t i = 0; i < channels; ++i) {
        blob.channel_order.push_back(read_string(in, path.string()));
    }
    const std::uint64_t count = read_u64(in, path.string());
    blob.params.resize(count);
    in.read(reinterpret_cast<char*>(blob.params.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (static_cast<std::uint64_t>(in.gcount()) != count * sizeof(double)) {
        throw FormatError("load_model: truncated parameter array in '" + path.string() + "'");
    }
    return blob;
}

}  // namespace mthg
