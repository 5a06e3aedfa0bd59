#include "bicl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "bicl/errors.hpp"

namespace bicl {

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + t.shape_string());
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                             b.shape_string());
    }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(element_count(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
        throw DimensionError("tensor shape " + shape_string() + " does not match " +
                             std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::vector(std::vector<float> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
    return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<float> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
    return t;
}

std::size_t Tensor::rows() const {
    require_rank(*this, 2, "rows");
    return shape_[0];
}

std::size_t Tensor::cols() const {
    require_rank(*this, 2, "cols");
    return shape_[1];
}

std::span<float> Tensor::row(std::size_t r) {
    const std::size_t c = cols();
    return std::span<float>(data_).subspan(r * c, c);
}

std::span<const float> Tensor::row(std::size_t r) const {
    const std::size_t c = cols();
    return std::span<const float>(data_).subspan(r * c, c);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << 'x';
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ " + a.shape_string() + " x " +
                             b.shape_string());
    }
    Tensor c({m, n});
    // i-p-j order: each c(i, j) still accumulates p = 0..k-1 in ascending order.
    for (std::size_t i = 0; i < m; ++i) {
        float* crow = &c.at(i, 0);
        for (std::size_t p = 0; p < k; ++p) {
            const float aip = a.at(i, p);
            const float* brow = &b.at(p, 0);
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
    return c;
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    Tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

void softmax_inplace(std::span<float> v, float scale) {
    if (v.empty()) throw DimensionError("softmax: empty input");
    float mx = v[0] * scale;
    for (float x : v) mx = std::max(mx, x * scale);
    float sum = 0.0f;
    for (float& x : v) {
        x = std::exp(x * scale - mx);
        sum += x;
    }
    const float inv = 1.0f / sum;
    for (float& x : v) x *= inv;
}

Tensor softmax(const Tensor& v, float scale) {
    require_rank(v, 1, "softmax");
    Tensor out = v;
    softmax_inplace(out.data(), scale);
    return out;
}

void layer_norm_into(std::span<const float> x, std::span<const float> gamma,
                     std::span<const float> beta, float eps, std::span<float> out) {
    const std::size_t d = x.size();
    if (gamma.size() != d || beta.size() != d || out.size() != d) {
        throw DimensionError("layer_norm: dimension mismatch");
    }
    if (d == 0) throw DimensionError("layer_norm: empty input");
    if (!(eps > 0.0f)) throw DimensionError("layer_norm: eps must be positive");
    float mean = 0.0f;
    for (float v : x) mean += v;
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<float>(d);
    const float rstd = 1.0f / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    require_rank(x, 1, "layer_norm");
    Tensor out(x.shape());
    layer_norm_into(x.data(), gamma.data(), beta.data(), eps, out.data());
    return out;
}

Tensor mean_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw DimensionError("mean_rows: empty list");
    Tensor acc(rows.front().shape());
    for (const Tensor& r : rows) {
        require_same_shape(acc, r, "mean_rows");
        auto a = acc.data();
        auto s = r.data();
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += s[i];
    }
    const float n = static_cast<float>(rows.size());
    for (float& v : acc.data()) v /= n;
    return acc;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = a;
    for (float& v : out.data()) v *= s;
    return out;
}

Tensor outer(const Tensor& e, const Tensor& x) {
    require_rank(e, 1, "outer");
    require_rank(x, 1, "outer");
    Tensor out({e.size(), x.size()});
    for (std::size_t i = 0; i < e.size(); ++i)
        for (std::size_t j = 0; j < x.size(); ++j) out.at(i, j) = e[i] * x[j];
    return out;
}

Tensor matvec(const Tensor& m, const Tensor& v) {
    require_rank(m, 2, "matvec");
    require_rank(v, 1, "matvec");
    if (m.cols() != v.size()) {
        throw DimensionError("matvec: " + m.shape_string() + " x " + v.shape_string());
    }
    Tensor out({m.rows()});
    for (std::size_t i = 0; i < m.rows(); ++i) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < m.cols(); ++j) acc += m.at(i, j) * v[j];
        out[i] = acc;
    }
    return out;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace bicl
