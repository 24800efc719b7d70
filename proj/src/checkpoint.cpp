#include "lat/checkpoint.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace lat {

uint32_t crc32(const void* data, size_t n, uint32_t seed) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = seed ^ 0xffffffffu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xffu] ^ (c >> 8);
    return c ^ 0xffffffffu;
}

namespace {

constexpr char kMagic[4] = {'L', 'A', 'T', 'F'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::string& out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& buf;
    size_t at = 0;

    void need(size_t n) const {
        if (at + n > buf.size()) throw IoError("checkpoint: truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
        at += 8;
        return v;
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(at, n);
        at += n;
        return s;
    }
};

void put_tensor(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) put_u64(out, static_cast<uint64_t>(d));
    for (float v : t.f) put_f32(out, v);
}

std::pair<std::string, Tensor> read_tensor(Reader& r) {
    uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    uint32_t rank = r.u32();
    std::vector<int64_t> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(r.u64());
    Tensor t = Tensor::zeros(shape);
    for (float& v : t.f) v = r.f32();
    return {std::move(name), std::move(t)};
}

}  // namespace

void atomic_write_file(const std::string& path, const std::string& contents) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw IoError("short write to '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("cannot rename '" + tmp + "' to '" + path + "'");
}

void save_checkpoint(const std::string& path, const TrainState& state, const std::string& config_echo) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, config_echo.size());
    out += config_echo;
    put_u64(out, static_cast<uint64_t>(state.step));
    put_u64(out, static_cast<uint64_t>(state.nan_skips));
    uint32_t count = static_cast<uint32_t>(state.params.entries.size() + state.momentum.size());
    put_u32(out, count);
    for (const auto& [name, t] : state.params.entries) put_tensor(out, name, t);
    for (const auto& [name, t] : state.momentum) put_tensor(out, "opt." + name, t);
    put_u32(out, crc32(out.data(), out.size()));
    atomic_write_file(path, out);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12) throw IoError("checkpoint: truncated file");

    uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= static_cast<uint32_t>(static_cast<unsigned char>(buf[buf.size() - 4 + i])) << (8 * i);
    if (crc32(buf.data(), buf.size() - 4) != stored_crc)
        throw IoError("checkpoint: checksum mismatch in '" + path + "'");

    Reader r{buf};
    if (r.bytes(4) != std::string(kMagic, 4)) throw IoError("checkpoint: bad magic in '" + path + "'");
    if (r.u32() != kVersion) throw IoError("checkpoint: unsupported version in '" + path + "'");

    LoadedCheckpoint out;
    uint64_t cfg_len = r.u64();
    out.config_echo = r.bytes(cfg_len);
    out.state.step = static_cast<int64_t>(r.u64());
    out.state.nan_skips = static_cast<int64_t>(r.u64());
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        auto [name, t] = read_tensor(r);
        if (name.rfind("opt.", 0) == 0)
            out.state.momentum.emplace_back(name.substr(4), std::move(t));
        else
            out.state.params.entries.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace lat
