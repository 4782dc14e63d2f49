#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "mirau/errors.hpp"

namespace mirau {

// Row-major extent list. Rank 0 denotes a scalar.
class Shape {
public:
    Shape() = default;
    Shape(std::initializer_list<std::int64_t> dims) : dims_(dims) { validate(); }
    explicit Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) { validate(); }

    std::int64_t numel() const {
        return std::accumulate(dims_.begin(), dims_.end(), std::int64_t(1),
                               [](std::int64_t a, std::int64_t b) { return a * b; });
    }

    int rank() const { return static_cast<int>(dims_.size()); }
    std::int64_t operator[](int i) const { return dims_[static_cast<std::size_t>(i)]; }
    const std::vector<std::int64_t>& dims() const { return dims_; }

    bool operator==(const Shape& o) const { return dims_ == o.dims_; }
    bool operator!=(const Shape& o) const { return dims_ != o.dims_; }

    // Strides in elements for row-major layout.
    std::vector<std::int64_t> strides() const {
        std::vector<std::int64_t> s(dims_.size(), 1);
        for (int i = rank() - 2; i >= 0; --i)
            s[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(i + 1)] * dims_[static_cast<std::size_t>(i + 1)];
        return s;
    }

    std::string str() const {
        std::string out = "[";
        for (std::size_t i = 0; i < dims_.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(dims_[i]);
        }
        return out + "]";
    }

private:
    void validate() const {
        for (auto d : dims_)
            if (d <= 0) throw ShapeError("non-positive extent in shape " + str());
    }

    std::vector<std::int64_t> dims_;
};

}  // namespace mirau
