#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "zeroloc/errors.hpp"

namespace zeroloc {

// Dense row-major f32 tensor. All operations below are pure functions with a
// fixed accumulation order, so identical inputs give bit-identical outputs.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (numel_of(shape) != data.size()) {
            throw_shape("tensor data length ", data.size(), " does not match shape ", shape_str(shape));
        }
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t e : s) n *= e;
        return s.empty() ? 0 : n;
    }

    static std::string shape_str(const std::vector<std::size_t>& s) {
        std::string out = "[";
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) out += "x";
            out += std::to_string(s[i]);
        }
        return out + "]";
    }

    static Tensor zeros(std::vector<std::size_t> s) {
        std::size_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<float>(n, 0.0f));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    std::size_t rows() const {
        if (rank() != 2) throw_shape("expected a rank-2 tensor, got shape ", shape_str(shape));
        return shape[0];
    }
    std::size_t cols() const {
        if (rank() != 2) throw_shape("expected a rank-2 tensor, got shape ", shape_str(shape));
        return shape[1];
    }

    float& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    float at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    // Length of the last axis; row count for row-wise ops on rank>=1 tensors.
    std::size_t last_dim() const {
        if (shape.empty()) throw_shape("expected a non-empty shape");
        return shape.back();
    }
    std::size_t row_count() const { return last_dim() == 0 ? 0 : numel() / last_dim(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline void require_finite(const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) {
            throw_numeric(what, ": non-finite value at flat index ", i);
        }
    }
}

// c = a * b. Accumulation runs over k in ascending order for every output
// element (i,k,j loop nest), which fixes the floating-point result. With
// accum64 the running sums are kept in double before rounding to f32; the
// gradient-check path uses that to separate algorithmic from rounding error.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool accum64 = false) {
    const std::size_t m = a.rows(), k = a.cols(), k2 = b.rows(), n = b.cols();
    if (k != k2) {
        throw_shape("matmul: inner dimensions disagree: ", Tensor::shape_str(a.shape), " x ",
                    Tensor::shape_str(b.shape));
    }
    Tensor c = Tensor::zeros({m, n});
    if (accum64) {
        std::vector<double> row(n);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) row[j] = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = a.data[i * k + kk];
                const float* brow = &b.data[kk * n];
                for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
            }
            for (std::size_t j = 0; j < n; ++j) c.data[i * n + j] = static_cast<float>(row[j]);
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            float* crow = &c.data[i * n];
            for (std::size_t kk = 0; kk < k; ++kk) {
                const float av = a.data[i * k + kk];
                const float* brow = &b.data[kk * n];
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    require_finite(c, "matmul");
    return c;
}

// c = a * b^T; rows of a dotted with rows of b, k ascending.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (k != b.cols()) {
        throw_shape("matmul_nt: inner dimensions disagree: ", Tensor::shape_str(a.shape), " x ",
                    Tensor::shape_str(b.shape), "^T");
    }
    Tensor c = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = &a.data[i * k];
        for (std::size_t j = 0; j < n; ++j) {
            const float* brow = &b.data[j * k];
            float acc = 0.0f;
            for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            c.data[i * n + j] = acc;
        }
    }
    require_finite(c, "matmul_nt");
    return c;
}

// c = a^T * b.
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    if (k != b.rows()) {
        throw_shape("matmul_tn: inner dimensions disagree: ", Tensor::shape_str(a.shape), "^T x ",
                    Tensor::shape_str(b.shape));
    }
    Tensor c = Tensor::zeros({m, n});
    for (std::size_t kk = 0; kk < k; ++kk) {
        const float* arow = &a.data[kk * m];
        const float* brow = &b.data[kk * n];
        for (std::size_t i = 0; i < m; ++i) {
            const float av = arow[i];
            float* crow = &c.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    require_finite(c, "matmul_tn");
    return c;
}

// Row-wise (x - mean) / sqrt(var + eps) * gamma + beta over the last axis,
// population (1/C) variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    const std::size_t c = x.last_dim();
    if (gamma.numel() != c || beta.numel() != c) {
        throw_shape("layer_norm: gamma/beta length ", gamma.numel(), "/", beta.numel(),
                    " does not match last axis ", c);
    }
    Tensor out = Tensor::zeros(x.shape);
    const std::size_t rows = x.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* src = &x.data[r * c];
        float* dst = &out.data[r * c];
        double mean = 0.0;
        for (std::size_t i = 0; i < c; ++i) mean += src[i];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            const double d = src[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (std::size_t i = 0; i < c; ++i) {
            dst[i] = static_cast<float>((src[i] - mean) * inv) * gamma.data[i] + beta.data[i];
        }
    }
    require_finite(out, "layer_norm");
    return out;
}

// Numerically stable row softmax (max subtraction).
inline Tensor softmax_rows(const Tensor& x) {
    const std::size_t n = x.last_dim();
    Tensor out = Tensor::zeros(x.shape);
    const std::size_t rows = x.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* src = &x.data[r * n];
        float* dst = &out.data[r * n];
        float mx = src[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, src[i]);
        double sum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e = std::exp(static_cast<double>(src[i]) - static_cast<double>(mx));
            dst[i] = static_cast<float>(e);
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(dst[i] * inv);
    }
    require_finite(out, "softmax_rows");
    return out;
}

inline Tensor l2_normalize_rows(const Tensor& x) {
    const std::size_t c = x.last_dim();
    Tensor out = Tensor::zeros(x.shape);
    const std::size_t rows = x.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* src = &x.data[r * c];
        double nrm = 0.0;
        for (std::size_t i = 0; i < c; ++i) nrm += static_cast<double>(src[i]) * src[i];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) {
            throw_input("l2_normalize_rows: degenerate (near-zero) row at index ", r);
        }
        const double inv = 1.0 / nrm;
        float* dst = &out.data[r * c];
        for (std::size_t i = 0; i < c; ++i) dst[i] = static_cast<float>(src[i] * inv);
    }
    require_finite(out, "l2_normalize_rows");
    return out;
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
inline Tensor gelu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double v = x.data[i];
        out.data[i] = static_cast<float>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
    }
    require_finite(out, "gelu");
    return out;
}

// tanh-approximated GELU for backbones trained with it.
inline Tensor gelu_tanh(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape);
    constexpr double k = 0.7978845608028653559;  // sqrt(2/pi)
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double v = x.data[i];
        out.data[i] = static_cast<float>(0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v))));
    }
    require_finite(out, "gelu_tanh");
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw_shape("add: shapes differ: ", Tensor::shape_str(a.shape), " vs ", Tensor::shape_str(b.shape));
    }
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    require_finite(out, "add");
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) {
        throw_shape("sub: shapes differ: ", Tensor::shape_str(a.shape), " vs ", Tensor::shape_str(b.shape));
    }
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    require_finite(out, "sub");
    return out;
}

inline Tensor scale(const Tensor& a, float s) {
    Tensor out = Tensor::zeros(a.shape);
    for (std::size_t i = 0; i < a.data.size(); ++i) out.data[i] = a.data[i] * s;
    require_finite(out, "scale");
    return out;
}

// Adds a length-C bias vector to every row of x.
inline Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
    const std::size_t c = x.last_dim();
    if (bias.numel() != c) {
        throw_shape("add_bias_rows: bias length ", bias.numel(), " does not match last axis ", c);
    }
    Tensor out = Tensor::zeros(x.shape);
    const std::size_t rows = x.row_count();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < c; ++i) out.data[r * c + i] = x.data[r * c + i] + bias.data[i];
    }
    require_finite(out, "add_bias_rows");
    return out;
}

}  // namespace zeroloc
