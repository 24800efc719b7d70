#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lat {

enum class Dtype { F32, I32 };

// Dense row-major array. F32 tensors carry values in `f`, I32 (token id)
// tensors carry them in `ix`.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> f;
    std::vector<int32_t> ix;
    Dtype dtype = Dtype::F32;

    Tensor() = default;

    static int64_t count(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative extent");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int64_t> shape) {
        Tensor t;
        t.f.assign(static_cast<size_t>(count(shape)), 0.0f);
        t.shape = std::move(shape);
        return t;
    }

    static Tensor full(std::vector<int64_t> shape, float v) {
        Tensor t = zeros(std::move(shape));
        for (float& x : t.f) x = v;
        return t;
    }

    static Tensor scalar(float v) {
        Tensor t;
        t.f.assign(1, v);
        return t;  // rank-0
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<float> v) {
        if (count(shape) != static_cast<int64_t>(v.size()))
            throw std::invalid_argument("tensor: shape/value size mismatch");
        Tensor t;
        t.shape = std::move(shape);
        t.f = std::move(v);
        return t;
    }

    static Tensor ids(std::vector<int64_t> shape, std::vector<int32_t> v) {
        if (count(shape) != static_cast<int64_t>(v.size()))
            throw std::invalid_argument("tensor: shape/id size mismatch");
        Tensor t;
        t.dtype = Dtype::I32;
        t.shape = std::move(shape);
        t.ix = std::move(v);
        return t;
    }

    int64_t numel() const { return dtype == Dtype::F32 ? static_cast<int64_t>(f.size()) : static_cast<int64_t>(ix.size()); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    float& at(int64_t i) { return f[static_cast<size_t>(i)]; }
    float at(int64_t i) const { return f[static_cast<size_t>(i)]; }

    // Index of the first non-finite value, or -1 if all finite.
    int64_t nan_scan() const {
        if (dtype == Dtype::I32) return -1;
        for (size_t i = 0; i < f.size(); ++i)
            if (!std::isfinite(f[i])) return static_cast<int64_t>(i);
        return -1;
    }

    bool all_finite() const { return nan_scan() < 0; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.dtype != b.dtype || a.shape != b.shape) return false;
    if (a.dtype == Dtype::I32) return a.ix == b.ix;
    if (a.f.size() != b.f.size()) return false;
    for (size_t i = 0; i < a.f.size(); ++i) {
        // bit compare, so that NaN != NaN does not sneak through memcmp semantics
        if (std::bit_cast<uint32_t>(a.f[i]) != std::bit_cast<uint32_t>(b.f[i])) return false;
    }
    return true;
}

}  // namespace lat
