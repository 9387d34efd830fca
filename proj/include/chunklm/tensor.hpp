#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace chunklm {

// Dense row-major tensor of doubles. Rank 1 or 2 covers everything the
// engine needs; higher-rank data (per-head attention state) is kept as
// flattened rank-2 blocks by the ops that own it.
struct Tensor {
    std::vector<int64_t> dims;
    std::vector<double> data;

    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> d) {
        Tensor t;
        t.dims = std::move(d);
        t.data.assign(static_cast<size_t>(numel_of(t.dims)), 0.0);
        return t;
    }

    static Tensor full(std::vector<int64_t> d, double v) {
        Tensor t = zeros(std::move(d));
        for (auto& x : t.data) x = v;
        return t;
    }

    static Tensor row(std::vector<double> v) {
        Tensor t;
        t.dims = {static_cast<int64_t>(v.size())};
        t.data = std::move(v);
        return t;
    }

    static Tensor matrix(int64_t r, int64_t c, std::vector<double> v) {
        if (static_cast<int64_t>(v.size()) != r * c)
            throw std::invalid_argument("tensor: matrix payload size mismatch");
        Tensor t;
        t.dims = {r, c};
        t.data = std::move(v);
        return t;
    }

    static int64_t numel_of(const std::vector<int64_t>& d) {
        int64_t n = 1;
        for (int64_t x : d) {
            if (x < 0) throw std::invalid_argument("tensor: negative dim");
            n *= x;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(dims.size()); }

    int64_t rows() const { return rank() == 2 ? dims[0] : (rank() == 1 ? 1 : 0); }
    int64_t cols() const { return rank() == 2 ? dims[1] : (rank() == 1 ? dims[0] : 0); }

    double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * dims[1] + c)]; }
    double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * dims[1] + c)]; }

    double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(dims[i]);
        }
        return s + "]";
    }
};

} // namespace chunklm
