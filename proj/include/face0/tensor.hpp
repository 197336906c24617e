#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "face0/errors.hpp"
#include "face0/rng.hpp"

namespace face0 {

using Dims = std::vector<int>;

inline std::string dims_str(const Dims& d) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (i) os << 'x';
        os << d[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t dims_numel(const Dims& d) {
    std::size_t n = 1;
    for (int e : d) {
        if (e <= 0) throw ShapeError("non-positive extent in dims " + dims_str(d));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

// Dense row-major float32 tensor.
struct Tensor {
    Dims dims;
    std::vector<float> data;

    Tensor() = default;
    Tensor(Dims d, std::vector<float> v) : dims(std::move(d)), data(std::move(v)) {
        if (dims_numel(dims) != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match dims " + dims_str(dims));
    }

    static Tensor zeros(Dims d) {
        std::size_t n = dims_numel(d);
        return Tensor(std::move(d), std::vector<float>(n, 0.0f));
    }

    static Tensor full(Dims d, float v) {
        std::size_t n = dims_numel(d);
        return Tensor(std::move(d), std::vector<float>(n, v));
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    static Tensor randn(Dims d, Rng& rng, float stddev = 1.0f) {
        std::size_t n = dims_numel(d);
        std::vector<float> v(n);
        for (auto& x : v) x = rng.normal_f() * stddev;
        return Tensor(std::move(d), std::move(v));
    }

    std::size_t numel() const { return data.size(); }
    bool is_scalar() const { return data.size() == 1; }

    int rank() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims[static_cast<std::size_t>(i)]; }

    float& at(std::size_t i) { return data[i]; }
    float at(std::size_t i) const { return data[i]; }

    // CHW accessor for 3-D tensors.
    float& at3(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * dims[1] + y) * dims[2] + x];
    }
    float at3(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * dims[1] + y) * dims[2] + x];
    }

    float& at2(int r, int c) { return data[static_cast<std::size_t>(r) * dims[1] + c]; }
    float at2(int r, int c) const { return data[static_cast<std::size_t>(r) * dims[1] + c]; }

    bool same_dims(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_dims(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_dims(b))
        throw ShapeError(std::string(op) + ": dims mismatch " + dims_str(a.dims) + " vs " +
                         dims_str(b.dims));
}

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_dims(a, b, "max_abs_diff");
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.dims != b.dims) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        // Bitwise comparison; 0.0f == -0.0f would pass ==, compare representations.
        if (a.data[i] != b.data[i]) return false;
    }
    return true;
}

}  // namespace face0
