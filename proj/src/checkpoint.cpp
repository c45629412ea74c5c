#include "pseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pseg {

static_assert(std::endian::native == std::endian::little, "checkpoint format requires a little-endian host");

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

const std::vector<double>& Checkpoint::f64(const std::string& name) const {
    const auto* e = find(name);
    if (!e || e->is_int) throw std::runtime_error("checkpoint: missing f64 entry '" + name + "'");
    return e->f64;
}

const std::vector<std::int64_t>& Checkpoint::i64(const std::string& name) const {
    const auto* e = find(name);
    if (!e || !e->is_int) throw std::runtime_error("checkpoint: missing i64 entry '" + name + "'");
    return e->i64;
}

Shape Checkpoint::shape(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw std::runtime_error("checkpoint: missing entry '" + name + "'");
    return e->shape;
}

namespace {

template <class T>
void write_pod(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic, 5);
    write_pod<std::uint32_t>(out, 1u);  // version
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries().size()));
    for (const auto& e : ckpt.entries()) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_pod<std::uint8_t>(out, e.is_int ? 1 : 0);
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
        for (int d : e.shape) write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        if (e.is_int)
            out.write(reinterpret_cast<const char*>(e.i64.data()),
                      static_cast<std::streamsize>(e.i64.size() * sizeof(std::int64_t)));
        else
            out.write(reinterpret_cast<const char*>(e.f64.data()),
                      static_cast<std::streamsize>(e.f64.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    char magic[5];
    in.read(magic, 5);
    if (!in || std::memcmp(magic, kCheckpointMagic, 5) != 0)
        throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
    const auto version = read_pod<std::uint32_t>(in);
    if (version != 1u) throw std::runtime_error("checkpoint: unsupported version");
    const auto count = read_pod<std::uint32_t>(in);

    Checkpoint ckpt;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_pod<std::uint32_t>(in);
        if (name_len > 4096) throw std::runtime_error("checkpoint: corrupt entry name");
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto dtype = read_pod<std::uint8_t>(in);
        const auto ndim = read_pod<std::uint32_t>(in);
        if (ndim > 8) throw std::runtime_error("checkpoint: corrupt entry rank");
        Shape shape;
        std::int64_t n = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            const auto dim = read_pod<std::uint32_t>(in);
            shape.push_back(static_cast<int>(dim));
            n *= dim;
        }
        if (n < 0 || n > (1LL << 32)) throw std::runtime_error("checkpoint: corrupt entry size");
        if (dtype == 1) {
            std::vector<std::int64_t> v(static_cast<std::size_t>(n));
            in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(std::int64_t)));
            if (!in) throw std::runtime_error("checkpoint: truncated payload");
            ckpt.put_i64(name, std::move(shape), std::move(v));
        } else if (dtype == 0) {
            std::vector<double> v(static_cast<std::size_t>(n));
            in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
            if (!in) throw std::runtime_error("checkpoint: truncated payload");
            ckpt.put_f64(name, std::move(shape), std::move(v));
        } else {
            throw std::runtime_error("checkpoint: unknown dtype");
        }
    }
    return ckpt;
}

}  // namespace pseg
