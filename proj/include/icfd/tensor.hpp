#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "icfd/common.hpp"

namespace icfd {

// Dense row-major tensor of rank 0..4. Images and feature maps use
// [C,H,W] or batched [N,C,H,W]; logits use [N,K]; scalars use rank 0.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(numel_of(shape_)), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != numel_of(shape_))
            throw ShapeError("tensor data size does not match shape");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(T v) {
        Tensor t{std::vector<int>{}};
        t.data_.assign(1, v);
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }

    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Indexed accessors for the common ranks.
    T& at2(int i, int j) { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }
    const T& at2(int i, int j) const { return data_[static_cast<std::size_t>(i) * dim(1) + j]; }

    T& at3(int c, int h, int w) {
        return data_[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
    }
    const T& at3(int c, int h, int w) const {
        return data_[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
    }

    T& at4(int n, int c, int h, int w) {
        return data_[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
    }
    const T& at4(int n, int c, int h, int w) const {
        return data_[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
    }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor with numel != 1");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != numel()) throw ShapeError("reshape changes element count");
        return Tensor(std::move(shape), data_);
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape_ = shape_;
        out.data_.resize(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out.data_[i] = static_cast<U>(data_[i]);
        return out;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << "]";
        return os.str();
    }

    static std::int64_t numel_of(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeError("negative dimension");
            n *= d;
        }
        return n;
    }

    template <typename U>
    friend class Tensor;

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

} // namespace icfd
