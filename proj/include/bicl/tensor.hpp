#pragma once

// Dense row-major float32 tensors and the handful of deterministic kernels the
// engine needs. Every reduction walks its inner index in ascending order so
// results are reproducible bit for bit across runs.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace bicl {

class Tensor {
public:
    Tensor() = default;

    // Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape);

    // Throws DimensionError if product(shape) != data.size().
    Tensor(std::vector<std::size_t> shape, std::vector<float> data);

    static Tensor vector(std::vector<float> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor identity(std::size_t n);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const;  // rank-2 only
    std::size_t cols() const;  // rank-2 only

    std::span<float> data() noexcept { return data_; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<float>& values() const noexcept { return data_; }

    float& operator[](std::size_t i) noexcept { return data_[i]; }
    const float& operator[](std::size_t i) const noexcept { return data_[i]; }

    float& at(std::size_t r, std::size_t c) noexcept { return data_[r * shape_[1] + c]; }
    const float& at(std::size_t r, std::size_t c) const noexcept { return data_[r * shape_[1] + c]; }

    std::span<float> row(std::size_t r);
    std::span<const float> row(std::size_t r) const;

    bool all_finite() const noexcept;
    std::string shape_string() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<float> data_;
};

// Standard matrix product, inner index summed in ascending order.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose(const Tensor& a);

// softmax(scale * v) with max subtraction. v must be rank 1 and non-empty.
Tensor softmax(const Tensor& v, float scale = 1.0f);
void softmax_inplace(std::span<float> v, float scale = 1.0f);

// Zero-mean unit-variance normalisation followed by gamma * x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps);
void layer_norm_into(std::span<const float> x, std::span<const float> gamma,
                     std::span<const float> beta, float eps, std::span<float> out);

// Componentwise arithmetic mean, summed in list order.
Tensor mean_rows(std::span<const Tensor> rows);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);

// Outer product e ⊗ x, shape [e.size() x x.size()].
Tensor outer(const Tensor& e, const Tensor& x);

// Matrix-vector product for rank-2 m and rank-1 v.
Tensor matvec(const Tensor& m, const Tensor& v);

float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace bicl
