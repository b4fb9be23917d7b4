// Dense row-major tensor storage shared by the autodiff graph and the
// streaming inference path.
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace simt {

// f32 runs keep 64-bit storage but round every produced value to the nearest
// float, so low-precision behaviour is reproducible without a second code path.
enum class Precision { f64, f32 };

inline double round_to(double v, Precision p) {
    return p == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

class Tensor {
public:
    Tensor() = default;

    // Zero-filled tensor.
    explicit Tensor(std::vector<int> shape, Precision prec = Precision::f64)
        : shape_(std::move(shape)), prec_(prec) {
        data_.assign(static_cast<size_t>(count(shape_)), 0.0);
    }

    // Validating factory: shape/data agreement and finiteness are enforced here.
    static Tensor from(std::vector<int> shape, std::vector<double> data,
                       Precision prec = Precision::f64) {
        if (count(shape) != static_cast<int64_t>(data.size())) {
            throw std::invalid_argument("tensor: shape does not match data size");
        }
        for (double v : data) {
            if (!std::isfinite(v)) {
                throw std::invalid_argument("tensor: non-finite value rejected");
            }
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = std::move(data);
        t.prec_ = prec;
        if (prec == Precision::f32) t.round_inplace();
        return t;
    }

    static Tensor scalar(double v, Precision prec = Precision::f64) {
        return from({1}, {v}, prec);
    }

    static Tensor matrix(int rows, int cols, Precision prec = Precision::f64) {
        return Tensor({rows, cols}, prec);
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    int rows() const { return rank() >= 1 ? shape_[0] : 1; }
    int cols() const { return rank() >= 2 ? shape_[1] : 1; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

    std::span<double> row(int r) {
        return {data_.data() + static_cast<size_t>(r) * cols(), static_cast<size_t>(cols())};
    }
    std::span<const double> row(int r) const {
        return {data_.data() + static_cast<size_t>(r) * cols(), static_cast<size_t>(cols())};
    }

    Precision precision() const { return prec_; }
    void set_precision(Precision p) {
        prec_ = p;
        if (p == Precision::f32) round_inplace();
    }

    void fill(double v) { data_.assign(data_.size(), round_to(v, prec_)); }

    void round_inplace() {
        if (prec_ != Precision::f32) return;
        for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
    }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
    Precision prec_ = Precision::f64;
};

inline std::string shape_str(const Tensor& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape().size(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape()[i]);
    }
    return s + "]";
}

} // namespace simt
