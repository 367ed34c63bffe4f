#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "pionono/errors.hpp"

namespace pionono {

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

inline long long numel_of(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

// Dense tensor, contiguous storage. Image data uses batch, channels, height,
// width order. Zero-sized dimensions are legal (an empty channel slab
// concatenates as a no-op).
template <typename S>
struct TensorT {
    std::vector<int> shape;
    std::vector<S> data;

    TensorT() = default;

    explicit TensorT(std::vector<int> shp)
        : shape(std::move(shp)), data(static_cast<size_t>(numel_of(shape)), S(0)) {}

    TensorT(std::vector<int> shp, std::vector<S> d) : shape(std::move(shp)), data(std::move(d)) {
        if (static_cast<long long>(data.size()) != numel_of(shape))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static TensorT full(std::vector<int> shp, S v) {
        TensorT t(std::move(shp));
        for (auto& x : t.data) x = v;
        return t;
    }

    long long numel() const { return static_cast<long long>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }

    int dim(int i) const {
        if (i < 0 || i >= ndim())
            throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_str(shape));
        return shape[i];
    }

    // Row-major multi-index access, for tests and small constructions.
    S& at(std::initializer_list<int> idx) { return data[flat(idx)]; }
    S at(std::initializer_list<int> idx) const { return data[flat(idx)]; }

    size_t flat(std::initializer_list<int> idx) const {
        if (static_cast<int>(idx.size()) != ndim())
            throw ShapeError("index rank mismatch for " + shape_str(shape));
        size_t off = 0;
        int i = 0;
        for (int v : idx) {
            off = off * static_cast<size_t>(shape[i]) + static_cast<size_t>(v);
            ++i;
        }
        return off;
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

template <typename T, typename S>
TensorT<T> tensor_cast(const TensorT<S>& src) {
    TensorT<T> out;
    out.shape = src.shape;
    out.data.resize(src.data.size());
    for (size_t i = 0; i < src.data.size(); ++i) out.data[i] = static_cast<T>(src.data[i]);
    return out;
}

}  // namespace pionono
