#include "germ/tensor.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace germ {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw ShapeMismatch("tensor data size " + std::to_string(data_.size()) +
                            " does not match shape product " +
                            std::to_string(shape_product(shape_)));
    }
    if (!all_finite()) {
        throw NonFinite("tensor constructed from non-finite data");
    }
}

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) {
            throw ShapeMismatch("ragged matrix initializer");
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw ShapeMismatch("rows() on non-matrix tensor");
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw ShapeMismatch("cols() on non-matrix tensor");
    return shape_[1];
}

double& Tensor::at(std::size_t i, std::size_t j) {
    return data_[i * cols() + j];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    return data_[i * cols() + j];
}

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

Tensor Tensor::transposed() const {
    if (shape_.size() != 2) throw ShapeMismatch("transpose on non-matrix tensor");
    Tensor out({shape_[1], shape_[0]});
    for (std::size_t i = 0; i < shape_[0]; ++i) {
        for (std::size_t j = 0; j < shape_[1]; ++j) {
            out.at(j, i) = at(i, j);
        }
    }
    return out;
}

Tensor& Tensor::operator+=(const Tensor& other) {
    if (!same_shape(other)) throw ShapeMismatch("operator+= shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
    if (!same_shape(other)) throw ShapeMismatch("operator-= shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

}  // namespace

Rng::Rng(std::uint64_t seed) : base_seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * uniform();
}

double Rng::normal() {
    if (has_cached_normal_) {
        has_cached_normal_ = false;
        return cached_normal_;
    }
    // Box-Muller; u1 nudged away from zero so log() stays finite.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_normal_ = r * std::sin(theta);
    has_cached_normal_ = true;
    return r * std::cos(theta);
}

double Rng::normal(double mean, double stddev) {
    return mean + stddev * normal();
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw IndexOutOfRange("Rng::below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - ~std::uint64_t{0} % n;
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
}

Rng Rng::fork(std::uint64_t tag) const {
    std::uint64_t mix = base_seed_;
    std::uint64_t a = splitmix64(mix);
    mix ^= (tag + 1) * 0x9e3779b97f4a7c15ULL;
    std::uint64_t b = splitmix64(mix);
    return Rng(a ^ rotl(b, 23));
}

Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape));
    for (double& v : t.raw()) v = rng.normal(0.0, stddev);
    return t;
}

Tensor rand_uniform(std::vector<std::size_t> shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& v : t.raw()) v = rng.uniform(lo, hi);
    return t;
}

}  // namespace germ
