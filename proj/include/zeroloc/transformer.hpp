#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"
#include "zeroloc/tensor.hpp"
#include "zeroloc/weights.hpp"

namespace zeroloc {

// y = x W^T + b with W stored [out, in].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul_nt(x, w);
    if (b.numel() == 0) return y;
    return add_bias_rows(y, b);
}

// References into one transformer block's tensors; the archive owns them.
struct BlockWeights {
    const Tensor& ln1_w;
    const Tensor& ln1_b;
    const Tensor& qkv_w;
    const Tensor& qkv_b;
    const Tensor& proj_w;
    const Tensor& proj_b;
    const Tensor& ln2_w;
    const Tensor& ln2_b;
    const Tensor& fc1_w;
    const Tensor& fc1_b;
    const Tensor& fc2_w;
    const Tensor& fc2_b;

    static BlockWeights from(const Archive& a, const std::string& prefix) {
        return BlockWeights{a.get(prefix + "ln1.weight"),        a.get(prefix + "ln1.bias"),
                            a.get(prefix + "attn.qkv_weight"),   a.get(prefix + "attn.qkv_bias"),
                            a.get(prefix + "attn.proj_weight"),  a.get(prefix + "attn.proj_bias"),
                            a.get(prefix + "ln2.weight"),        a.get(prefix + "ln2.bias"),
                            a.get(prefix + "mlp.fc1_weight"),    a.get(prefix + "mlp.fc1_bias"),
                            a.get(prefix + "mlp.fc2_weight"),    a.get(prefix + "mlp.fc2_bias")};
    }
};

struct QkvTensors {
    Tensor q, k, v;
};

inline QkvTensors qkv_project(const Tensor& x, const Tensor& qkv_w, const Tensor& qkv_b) {
    const std::size_t n = x.rows(), w = x.cols();
    if (qkv_w.rows() != 3 * w || qkv_w.cols() != w || qkv_b.numel() != 3 * w) {
        throw_config("qkv weights shaped ", Tensor::shape_str(qkv_w.shape), " do not fit width ", w);
    }
    const Tensor fused = linear(x, qkv_w, qkv_b);  // [n, 3w]
    QkvTensors out{Tensor::zeros({n, w}), Tensor::zeros({n, w}), Tensor::zeros({n, w})};
    for (std::size_t i = 0; i < n; ++i) {
        const float* src = &fused.data[i * 3 * w];
        for (std::size_t j = 0; j < w; ++j) {
            out.q.data[i * w + j] = src[j];
            out.k.data[i * w + j] = src[w + j];
            out.v.data[i * w + j] = src[2 * w + j];
        }
    }
    return out;
}

// Multi-head scaled dot-product attention over already-projected q/k/v.
// Causal mode restricts query i to keys 0..i by skipping the rest, so padding
// rows never influence earlier positions.
inline Tensor attention_mix(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            bool causal) {
    const std::size_t n = q.rows(), w = q.cols();
    if (!q.same_shape(k) || !q.same_shape(v)) throw_shape("attention_mix: q/k/v shapes differ");
    if (heads == 0 || w % heads != 0) {
        throw_config("attention_mix: width ", w, " not divisible by ", heads, " heads");
    }
    const std::size_t dh = w / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out = Tensor::zeros({n, w});
    std::vector<double> scores(n);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t keys = causal ? i + 1 : n;
            const float* qi = &q.data[i * w + off];
            double mx = -1e300;
            for (std::size_t j = 0; j < keys; ++j) {
                const float* kj = &k.data[j * w + off];
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += static_cast<double>(qi[d]) * kj[d];
                scores[j] = s * scale;
                mx = std::max(mx, scores[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < keys; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                sum += scores[j];
            }
            const double inv = 1.0 / sum;
            float* oi = &out.data[i * w + off];
            for (std::size_t d = 0; d < dh; ++d) {
                double acc = 0.0;
                for (std::size_t j = 0; j < keys; ++j) {
                    acc += scores[j] * inv * v.data[j * w + off + d];
                }
                oi[d] = static_cast<float>(acc);
            }
        }
    }
    require_finite(out, "attention_mix");
    return out;
}

inline Tensor mlp_forward(const Tensor& x, const BlockWeights& bw, GeluKind kind) {
    const Tensor h = linear(x, bw.fc1_w, bw.fc1_b);
    const Tensor a = kind == GeluKind::Erf ? gelu(h) : gelu_tanh(h);
    return linear(a, bw.fc2_w, bw.fc2_b);
}

// Pre-norm residual block: x + Attn(LN1(x)), then + MLP(LN2(.)).
// v_capture, when given, receives this layer's value projection of the
// normalized input (the V of Eq. 4) for the V-V surgery path.
inline Tensor block_forward(const Tensor& x, const BlockWeights& bw, std::size_t heads, bool causal,
                            GeluKind kind, Tensor* v_capture = nullptr) {
    const Tensor normed = layer_norm(x, bw.ln1_w, bw.ln1_b);
    const QkvTensors qkv = qkv_project(normed, bw.qkv_w, bw.qkv_b);
    if (v_capture) *v_capture = qkv.v;
    const Tensor mixed = attention_mix(qkv.q, qkv.k, qkv.v, heads, causal);
    const Tensor attended = add(x, linear(mixed, bw.proj_w, bw.proj_b));
    return add(attended, mlp_forward(layer_norm(attended, bw.ln2_w, bw.ln2_b), bw, kind));
}

// V-V attention block: attention with one tensor as query, key, and value,
// then the layer's output projection, then a residual. No layer norm, no MLP.
// The residual operand is separate so a parallel accumulator state can ride
// through blocks whose attention input comes from the original path.
inline Tensor vv_block(const Tensor& attn_input, const Tensor& residual, const BlockWeights& bw,
                       std::size_t heads) {
    if (!attn_input.same_shape(residual)) throw_shape("vv_block: state shapes differ");
    const Tensor mixed = attention_mix(attn_input, attn_input, attn_input, heads, false);
    return add(linear(mixed, bw.proj_w, bw.proj_b), residual);
}

}  // namespace zeroloc
