#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pseg/tensor.hpp"

namespace pseg {

// "PSEG1" container: named, shape-tagged tensors of f64 or i64 payloads,
// written little-endian in insertion order.
struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> f64;
    std::vector<std::int64_t> i64;
    bool is_int = false;
};

class Checkpoint {
public:
    void put(const std::string& name, const Tensor& t) {
        CheckpointEntry e;
        e.name = name;
        e.shape = t.shape();
        e.f64.assign(t.values().begin(), t.values().end());
        entries_.push_back(std::move(e));
    }

    void put_f64(const std::string& name, Shape shape, std::vector<double> v) {
        entries_.push_back({name, std::move(shape), std::move(v), {}, false});
    }

    void put_i64(const std::string& name, Shape shape, std::vector<std::int64_t> v) {
        entries_.push_back({name, std::move(shape), {}, std::move(v), true});
    }

    void put_scalar(const std::string& name, double v) { put_f64(name, {1}, {v}); }
    void put_scalar_i64(const std::string& name, std::int64_t v) { put_i64(name, {1}, {v}); }

    bool has(const std::string& name) const { return find(name) != nullptr; }
    const CheckpointEntry* find(const std::string& name) const;
    // throws std::runtime_error when absent or of the wrong kind
    const std::vector<double>& f64(const std::string& name) const;
    const std::vector<std::int64_t>& i64(const std::string& name) const;
    Shape shape(const std::string& name) const;
    double scalar(const std::string& name) const { return f64(name).at(0); }
    std::int64_t scalar_i64(const std::string& name) const { return i64(name).at(0); }

    const std::vector<CheckpointEntry>& entries() const { return entries_; }

private:
    std::vector<CheckpointEntry> entries_;
};

// throws std::runtime_error on I/O failure, bad magic, or truncation
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

inline constexpr char kCheckpointMagic[] = "PSEG1";

}  // namespace pseg
