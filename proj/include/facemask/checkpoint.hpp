#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "facemask/vae.hpp"

namespace facemask {

// Checkpoint layout (all integers and reals little-endian):
//   8 bytes  magic "FMVAECKP"
//   u32      format version
//   u32      architecture field count, then that many i32:
//            resolution, latent_dim, in_channels, enc[3], dec[3], hypothesis id
//   u32      tensor count, then per tensor:
//            u32 name length, name bytes, u32 rank, u32 dims[rank],
//            u64 payload bytes, payload as f32

inline constexpr char kCheckpointMagic[8] = {'F', 'M', 'V', 'A', 'E', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    VaeParams<float> params;
    int hypothesis_id = 0;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline std::uint32_t get_u32(std::istream& is, const std::string& where) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw DataError("checkpoint truncated: " + where);
    return v;
}
inline std::uint64_t get_u64(std::istream& is, const std::string& where) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw DataError("checkpoint truncated: " + where);
    return v;
}

inline std::vector<std::int32_t> architecture_fields(const Architecture& a, int hypothesis_id) {
    return {a.resolution,          a.latent_dim,          a.in_channels,
            a.encoder_channels[0], a.encoder_channels[1], a.encoder_channels[2],
            a.decoder_channels[0], a.decoder_channels[1], a.decoder_channels[2],
            hypothesis_id};
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const VaeParams<float>& params, int hypothesis_id) {
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(os, kCheckpointVersion);
    const auto fields = detail::architecture_fields(params.architecture(), hypothesis_id);
    detail::put_u32(os, static_cast<std::uint32_t>(fields.size()));
    for (auto f : fields) detail::put_u32(os, static_cast<std::uint32_t>(f));
    detail::put_u32(os, static_cast<std::uint32_t>(params.tensors().size()));
    for (const auto& t : params.tensors()) {
        detail::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
        os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
        const std::uint64_t bytes = static_cast<std::uint64_t>(t.value.size()) * sizeof(float);
        detail::put_u64(os, bytes);
        os.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(bytes));
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const VaeParams<float>& params, int hypothesis_id) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw DataError("cannot write checkpoint " + tmp.string());
        write_checkpoint(os, params, hypothesis_id);
        if (!os) throw DataError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

/// Reads and validates a checkpoint: every tensor name and shape must match
/// what the stored architecture implies.
inline Checkpoint read_checkpoint(std::istream& is, const std::string& where = "<stream>") {
    char magic[8] = {};
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
        throw DataError("not a checkpoint file: " + where);
    }
    const auto version = detail::get_u32(is, where);
    if (version != kCheckpointVersion) {
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + where);
    }
    const auto nfields = detail::get_u32(is, where);
    if (nfields != 10) throw DataError("unexpected architecture block size in " + where);
    std::vector<std::int32_t> f(nfields);
    for (auto& v : f) v = static_cast<std::int32_t>(detail::get_u32(is, where));
    Architecture arch;
    arch.resolution = f[0];
    arch.latent_dim = f[1];
    arch.in_channels = f[2];
    arch.encoder_channels = {f[3], f[4], f[5]};
    arch.decoder_channels = {f[6], f[7], f[8]};
    try {
        arch.validate();
    } catch (const std::invalid_argument& e) {
        throw DataError("invalid architecture in " + where + ": " + e.what());
    }
    Checkpoint ck{VaeParams<float>(arch), f[9]};

    const auto count = detail::get_u32(is, where);
    if (count != ck.params.tensors().size()) throw DataError("tensor count mismatch in " + where);
    for (auto& t : ck.params.tensors()) {
        const auto len = detail::get_u32(is, where);
        if (len > 4096) throw DataError("implausible tensor name length in " + where);
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw DataError("checkpoint truncated: " + where);
        if (name != t.name) throw DataError("expected tensor '" + t.name + "', found '" + name + "' in " + where);
        const auto rank = detail::get_u32(is, where);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::get_u32(is, where));
        if (shape != t.shape) throw DataError("shape mismatch for tensor '" + name + "' in " + where);
        const auto bytes = detail::get_u64(is, where);
        if (bytes != static_cast<std::uint64_t>(t.value.size()) * sizeof(float)) {
            throw DataError("payload size mismatch for tensor '" + name + "' in " + where);
        }
        if (!is.read(reinterpret_cast<char*>(t.value.data()), static_cast<std::streamsize>(bytes))) {
            throw DataError("checkpoint truncated: " + where);
        }
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    return read_checkpoint(is, path.string());
}

}  // namespace facemask
