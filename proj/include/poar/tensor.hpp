#pragma once

// Dense row-major tensor of reals. Ops in this library treat rank-1 tensors
// as a single row and work on rank-2 tensors otherwise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "poar/errors.hpp"

namespace poar {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

template <class Real>
class BasicTensor {
public:
    using value_type = Real;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, Real fill = Real(0))
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
        check_shape();
    }

    BasicTensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (shape_size(shape_) != data_.size())
            throw shape_error("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                              shape_string(shape_));
    }

    static BasicTensor matrix(std::size_t rows, std::size_t cols, Real fill = Real(0)) {
        return BasicTensor({rows, cols}, fill);
    }

    static BasicTensor from_rows(std::initializer_list<std::initializer_list<Real>> rows) {
        std::size_t r = rows.size();
        std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<Real> data;
        data.reserve(r * c);
        for (auto& row : rows) {
            if (row.size() != c) throw shape_error("ragged rows in tensor literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return BasicTensor({r, c}, std::move(data));
    }

    static BasicTensor vector(std::initializer_list<Real> values) {
        return BasicTensor({values.size()}, std::vector<Real>(values));
    }

    static BasicTensor scalar(Real v) { return BasicTensor({1}, std::vector<Real>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Row/column view used by the matrix ops: rank-1 is one row.
    std::size_t rows() const { return shape_.size() >= 2 ? shape_[0] : 1; }
    std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

    std::span<Real> data() { return data_; }
    std::span<const Real> data() const { return data_; }
    std::vector<Real>& storage() { return data_; }
    const std::vector<Real>& storage() const { return data_; }

    Real& operator[](std::size_t i) { return data_[i]; }
    const Real& operator[](std::size_t i) const { return data_[i]; }

    Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const Real& operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<Real> row(std::size_t r) { return std::span<Real>(data_).subspan(r * cols(), cols()); }
    std::span<const Real> row(std::size_t r) const {
        return std::span<const Real>(data_).subspan(r * cols(), cols());
    }

    Real item() const {
        if (data_.size() != 1) throw shape_error("item() on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
    }

    BasicTensor reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size())
            throw shape_error("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
        return BasicTensor(std::move(shape), data_);
    }

    BasicTensor transposed() const {
        BasicTensor out({cols(), rows()});
        for (std::size_t r = 0; r < rows(); ++r)
            for (std::size_t c = 0; c < cols(); ++c) out(c, r) = (*this)(r, c);
        return out;
    }

    template <class Other>
    BasicTensor<Other> cast() const {
        return BasicTensor<Other>(shape_, std::vector<Other>(data_.begin(), data_.end()));
    }

    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_shape() const {
        for (auto d : shape_)
            if (d == 0) throw shape_error("tensor dimensions must be positive, got " + shape_string(shape_));
    }

    Shape shape_;
    std::vector<Real> data_;
};

using Tensor = BasicTensor<double>;

template <class Real>
Real max_abs_diff(const BasicTensor<Real>& a, const BasicTensor<Real>& b) {
    if (a.shape() != b.shape()) throw shape_error("max_abs_diff: shape mismatch");
    Real m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace poar
