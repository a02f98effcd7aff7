#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lilac {

/// Dense row-major float tensor. The value type for everything numeric.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        Tensor t;
        t.data.assign(static_cast<std::size_t>(numel_of(s)), 0.0f);
        t.shape = std::move(s);
        return t;
    }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t = zeros(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape.size()); }

    float& at(int i) { return data[static_cast<std::size_t>(i)]; }
    float at(int i) const { return data[static_cast<std::size_t>(i)]; }
    float& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    float at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    float& at(int i, int j, int k) {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float at(int i, int j, int k) const {
        return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
    }
    float& at(int i, int j, int k, int l) {
        return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    float at(int i, int j, int k, int l) const {
        return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    Tensor reshaped(std::vector<int> s) const {
        if (numel_of(s) != numel()) throw std::invalid_argument("tensor: reshape numel mismatch");
        return Tensor(std::move(s), data);
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace lilac
