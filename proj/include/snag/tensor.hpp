#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace snag {

// Dense row-major tensor of 64-bit floats. Immutable by convention once it
// enters a Graph; the raw buffer is exposed for construction and tests.
using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor full(Shape shape, double v);
    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    const Shape& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    // 2-d accessor; row-major.
    double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

  private:
    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
};

// Deterministic RNG with distributions implemented on top of the mt19937_64
// bit stream, so sequences are identical across compilers and platforms
// (std::*_distribution is implementation-defined and would break frozen
// expected values).
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased draw from [0, n).
    int64_t uniform_int(int64_t n);

    // Box-Muller; the spare value is cached so the stream stays reproducible.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal clipped by resampling at |z| > clip, then scaled.
    double trunc_normal(double stddev, double clip = 2.0);

    Tensor normal_tensor(Shape shape, double stddev);
    Tensor trunc_normal_tensor(Shape shape, double stddev, double clip = 2.0);

    // Fisher-Yates permutation of [0, n).
    std::vector<int64_t> permutation(int64_t n);

  private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable sub-seed derivation (splitmix64 over the pair).
uint64_t derive_seed(uint64_t base, uint64_t stream);

}  // namespace snag
