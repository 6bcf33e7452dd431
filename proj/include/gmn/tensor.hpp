#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmn {

// Dense row-major tensor of 64-bit reals.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel(shape)), 0.0);
    }
    Tensor(std::vector<int> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<long long>(data.size()) != numel(shape))
            throw std::invalid_argument("Tensor: shape/data size mismatch");
    }

    static long long numel(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim");
            n *= d;
        }
        return n;
    }

    long long size() const { return static_cast<long long>(data.size()); }

    bool operator==(const Tensor&) const = default;

    double& at(std::initializer_list<int> idx) { return data[offset(idx)]; }
    double at(std::initializer_list<int> idx) const { return data[offset(idx)]; }

    size_t offset(std::initializer_list<int> idx) const {
        if (idx.size() != shape.size())
            throw std::invalid_argument("Tensor: rank mismatch in index");
        size_t off = 0;
        size_t k = 0;
        for (int i : idx) {
            off = off * static_cast<size_t>(shape[k]) + static_cast<size_t>(i);
            ++k;
        }
        return off;
    }
};

inline bool same_shape(const std::vector<int>& a, const std::vector<int>& b) {
    return a == b;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace gmn
