// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace magent {

// Dense row-major tensor of 64-bit floats. Gradients live alongside the data
// so parameters can accumulate across repeated backward passes.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty, or same length as data

    Tensor() = default;

    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(count(shape), fill);
    }

    Tensor(std::vector<int> s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (static_cast<int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor: data length does not match shape");
    }

    static int64_t count(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    double& at(int i) { return data[static_cast<size_t>(i)]; }
    double at(int i) const { return data[static_cast<size_t>(i)]; }
    double& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }
    double& at(int b, int i, int j) {
        return data[(static_cast<size_t>(b) * shape[1] + i) * shape[2] + j];
    }
    double at(int b, int i, int j) const {
        return data[(static_cast<size_t>(b) * shape[1] + i) * shape[2] + j];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                                    b.shape_str());
}

}  // namespace magent
