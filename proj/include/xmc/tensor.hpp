#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xmc {

class XmcError : public std::runtime_error {
public:
    explicit XmcError(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major tensor of 64-bit floats. Rank is arbitrary, but every
// kernel in this project produces rank-2 values (scalars are 1x1, vectors
// are n x 1 or 1 x n).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(numel_of(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel_of(shape_) != data_.size()) {
            throw XmcError("Tensor: shape " + shape_string(shape_) + " does not match data length " +
                           std::to_string(data_.size()));
        }
    }

    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    static Tensor full(std::size_t rows, std::size_t cols, double v) {
        Tensor t({rows, cols});
        for (double& x : t.data_) x = v;
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

    static Tensor column(std::vector<double> values) {
        std::size_t n = values.size();
        return Tensor({n, 1}, std::move(values));
    }

    static Tensor row(std::vector<double> values) {
        std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // Rank-2 accessors: a rank-1 tensor of length n is viewed as n x 1.
    std::size_t rows() const {
        if (shape_.empty()) return 0;
        return shape_[0];
    }
    std::size_t cols() const {
        if (shape_.size() < 2) return shape_.empty() ? 0 : 1;
        std::size_t c = 1;
        for (std::size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
        return c;
    }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    double item() const {
        if (numel() != 1) throw XmcError("Tensor::item on tensor of shape " + shape_string(shape_));
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const { return shape_string(shape_); }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << 'x';
            os << s[i];
        }
        os << ']';
        return os.str();
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

private:
    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        if (s.empty()) return 0;
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw XmcError("max_abs_diff: shapes " + a.shape_str() + " vs " + b.shape_str());
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace xmc
