#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddet {

// Dense row-major tensor. Feature maps use the [batch, channels, height,
// width] convention; attention intermediates use higher ranks as needed.
template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), T(0)) {}

    Tensor(std::vector<int> s, T fill) : shape(std::move(s)), data(count(shape), fill) {}

    static size_t count(const std::vector<int>& s) {
        size_t n = 1;
        for (int d : s) {
            if (d < 1) throw std::invalid_argument("tensor dim must be >= 1, got " + std::to_string(d));
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    T& operator[](size_t i) { return data[i]; }
    const T& operator[](size_t i) const { return data[i]; }

    // 4-D accessors for the common feature-map case.
    T& at4(int b, int c, int y, int x) {
        return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    const T& at4(int b, int c, int y, int x) const {
        return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

} // namespace ddet
