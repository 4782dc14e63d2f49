#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mirau/nd/core.hpp"
#include "mirau/rng.hpp"

namespace mirau::nd {

inline std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Ordered, named parameter collection. Order is the creation order and defines
// the checkpoint layout; every consumer iterates it deterministically.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Shape shape;
        std::vector<T> data;
    };

    std::size_t add(std::string name, Shape shape, std::vector<T> data) {
        if (shape.numel() != static_cast<std::int64_t>(data.size()))
            throw ShapeError("param '" + name + "' init size mismatch");
        for (const auto& e : entries_)
            if (e.name == name) throw ConfigError("duplicate param name '" + name + "'");
        entries_.push_back(Entry{std::move(name), std::move(shape), std::move(data)});
        return entries_.size() - 1;
    }

    std::size_t size() const { return entries_.size(); }
    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i].name == name) return i;
        throw ConfigError("unknown param '" + name + "'");
    }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.shape.numel();
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& e : entries_) {
            std::vector<U> d(e.data.size());
            for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(e.data[i]);
            out.add(e.name, e.shape, std::move(d));
        }
        return out;
    }

private:
    std::vector<Entry> entries_;
};

// phi <- alpha*phi + (1-alpha)*theta, elementwise over name-matched entries.
template <typename T>
void ema_update(ParamStore<T>& phi, const ParamStore<T>& theta, T alpha) {
    std::string offenders;
    if (phi.size() != theta.size()) {
        offenders = "entry count " + std::to_string(phi.size()) + " vs " + std::to_string(theta.size());
    } else {
        for (std::size_t i = 0; i < phi.size(); ++i) {
            const auto& a = phi.entry(i);
            const auto& b = theta.entry(i);
            if (a.name != b.name || a.shape != b.shape)
                offenders += (offenders.empty() ? "" : ", ") + a.name + "/" + b.name;
        }
    }
    if (!offenders.empty()) throw ConfigError("ema_update parameter mismatch: " + offenders);
    for (std::size_t i = 0; i < phi.size(); ++i) {
        auto& dst = phi.entry(i).data;
        const auto& src = theta.entry(i).data;
        for (std::size_t j = 0; j < dst.size(); ++j)
            dst[j] = alpha * dst[j] + (T(1) - alpha) * src[j];
    }
}

// Per-forward view of a store: parameters become tape leaves so gradients can
// be collected after backward. With gradients disabled the leaves degrade to
// constants and nothing records.
template <typename T>
class Bound {
public:
    Bound(Tape<T>& tape, ParamStore<T>& store) {
        leaves_.reserve(store.size());
        for (std::size_t i = 0; i < store.size(); ++i) {
            const auto& e = store.entry(i);
            leaves_.push_back(tape.leaf(e.shape, e.data));
        }
    }

    const Array<T>& at(std::size_t i) const { return leaves_[i]; }

    // Gradient buffer of leaf i (empty if it never received one).
    const std::vector<T>& grad_of(std::size_t i) const { return leaves_[i].grad(); }

private:
    std::vector<Array<T>> leaves_;
};

// Initializers, seeded by (seed, param name) so results do not depend on
// construction order elsewhere.
namespace init {

template <typename T>
std::vector<T> normal(std::uint64_t seed, const std::string& name, std::int64_t n, double stddev) {
    Rng rng(mix_seed(seed, name_hash(name)));
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return v;
}

template <typename T>
std::vector<T> he(std::uint64_t seed, const std::string& name, std::int64_t n, std::int64_t fan_in) {
    return normal<T>(seed, name, n, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

template <typename T>
std::vector<T> xavier(std::uint64_t seed, const std::string& name, std::int64_t n,
                      std::int64_t fan_in, std::int64_t fan_out) {
    return normal<T>(seed, name, n, std::sqrt(2.0 / static_cast<double>(fan_in + fan_out)));
}

template <typename T>
std::vector<T> constant(std::int64_t n, T v) {
    return std::vector<T>(static_cast<std::size_t>(n), v);
}

}  // namespace init

}  // namespace mirau::nd
