#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <vector>

#include "germ/errors.hpp"

namespace germ {

// Dense row-major tensor of doubles. All computation runs in double
// precision; 32-bit storage exists only inside checkpoint files.
class Tensor {
public:
    Tensor() = default;

    // Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape);

    // Construction from external data: size must match the shape product
    // and every element must be finite.
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    // 2-D accessors; throw ShapeMismatch when the tensor is not a matrix.
    std::size_t rows() const;
    std::size_t cols() const;
    double& at(std::size_t i, std::size_t j);
    double at(std::size_t i, std::size_t j) const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::vector<double>& raw() { return data_; }
    const std::vector<double>& raw() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    Tensor transposed() const;

    Tensor& operator+=(const Tensor& other);
    Tensor& operator-=(const Tensor& other);
    Tensor& operator*=(double s);
    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }
    friend Tensor operator*(double s, Tensor a) { return a *= s; }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Deterministic pseudo-random stream. xoshiro256** with splitmix64 seeding,
// version-pinned so equal seeds give equal streams on every platform.
class Rng {
public:
    static constexpr const char* kAlgorithm = "xoshiro256ss-1.0";

    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();
    double uniform();                        // [0, 1)
    double uniform(double lo, double hi);    // [lo, hi)
    double normal();                         // N(0, 1), Box-Muller
    double normal(double mean, double stddev);
    std::uint64_t below(std::uint64_t n);    // unbiased draw from [0, n)

    // Independent stream derived from (base seed, tag); used to give
    // verification trials and data workers their own reproducible streams.
    Rng fork(std::uint64_t tag) const;

    std::uint64_t base_seed() const { return base_seed_; }

private:
    std::uint64_t base_seed_ = 0;
    std::array<std::uint64_t, 4> state_{};
    double cached_normal_ = 0.0;
    bool has_cached_normal_ = false;
};

Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0);
Tensor rand_uniform(std::vector<std::size_t> shape, Rng& rng, double lo, double hi);

}  // namespace germ
