#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "zeroloc/errors.hpp"
#include "zeroloc/image.hpp"
#include "zeroloc/prompts.hpp"
#include "zeroloc/tensor.hpp"

namespace zeroloc {

namespace detail {

// Two-way softmax over {tau*cos_pos, tau*cos_neg}, stable in both tails.
inline double two_way_softmax(double cos_neg, double cos_pos, double tau) {
    const double x = tau * (cos_neg - cos_pos);
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace detail

// Image-level anomaly score from the class token (two-way softmax of the
// cosine similarities against t+ / t-). v need not be pre-normalized.
inline double score_image(const Tensor& v, const TextTokenPair& pair, double tau) {
    if (!(tau > 0.0)) throw_config("score_image: tau must be positive");
    const std::size_t c = v.numel();
    if (c != pair.dim()) {
        throw_shape("score_image: v has dim ", c, ", tokens have dim ", pair.dim());
    }
    double norm = 0.0, dot_pos = 0.0, dot_neg = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
        norm += static_cast<double>(v.data[j]) * v.data[j];
        dot_pos += static_cast<double>(v.data[j]) * pair.t_plus.data[j];
        dot_neg += static_cast<double>(v.data[j]) * pair.t_minus.data[j];
    }
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw_input("score_image: degenerate (near-zero) token");
    return detail::two_way_softmax(dot_neg / norm, dot_pos / norm, tau);
}

// Per-patch scores. Rows are normalized here, so raw adapted tokens can be
// passed straight in.
inline std::vector<double> score_patches(const Tensor& P, const TextTokenPair& pair, double tau) {
    if (!(tau > 0.0)) throw_config("score_patches: tau must be positive");
    if (P.rank() != 2) throw_shape("score_patches: P must be rank 2");
    const std::size_t m = P.rows(), c = P.cols();
    if (m > 0 && c != pair.dim()) {
        throw_shape("score_patches: P has dim ", c, ", tokens have dim ", pair.dim());
    }
    std::vector<double> scores(m);
    for (std::size_t i = 0; i < m; ++i) {
        const float* row = &P.data[i * c];
        double norm = 0.0, dot_pos = 0.0, dot_neg = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            norm += static_cast<double>(row[j]) * row[j];
            dot_pos += static_cast<double>(row[j]) * pair.t_plus.data[j];
            dot_neg += static_cast<double>(row[j]) * pair.t_minus.data[j];
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) throw_input("score_patches: degenerate (near-zero) row ", i);
        scores[i] = detail::two_way_softmax(dot_neg / norm, dot_pos / norm, tau);
    }
    return scores;
}

namespace detail {

// Bilinear, corner-aligned: source coordinate = dst * (src-1)/(dst-1).
inline std::vector<float> bilinear_upsample(const std::vector<float>& src, std::size_t sh, std::size_t sw,
                                            std::size_t dh, std::size_t dw) {
    std::vector<float> out(dh * dw);
    const double ry = dh > 1 ? static_cast<double>(sh - 1) / (dh - 1) : 0.0;
    const double rx = dw > 1 ? static_cast<double>(sw - 1) / (dw - 1) : 0.0;
    for (std::size_t y = 0; y < dh; ++y) {
        const double sy = y * ry;
        const std::size_t y0 = std::min(static_cast<std::size_t>(sy), sh - 1);
        const std::size_t y1 = std::min(y0 + 1, sh - 1);
        const double fy = sy - y0;
        for (std::size_t x = 0; x < dw; ++x) {
            const double sx = x * rx;
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), sw - 1);
            const std::size_t x1 = std::min(x0 + 1, sw - 1);
            const double fx = sx - x0;
            const double top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            const double bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out[y * dw + x] = static_cast<float>(top * (1.0 - fy) + bot * fy);
        }
    }
    return out;
}

// Separable Gaussian, kernel truncated at 3 sigma and renormalized at the
// borders.
inline std::vector<float> gaussian_blur(const std::vector<float>& src, std::size_t h, std::size_t w,
                                        double sigma) {
    const long radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (long i = -radius; i <= radius; ++i) {
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    }

    std::vector<float> mid(h * w), out(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0, wsum = 0.0;
            for (long i = -radius; i <= radius; ++i) {
                const long xi = static_cast<long>(x) + i;
                if (xi < 0 || xi >= static_cast<long>(w)) continue;
                const double kv = kernel[static_cast<std::size_t>(i + radius)];
                acc += kv * src[y * w + static_cast<std::size_t>(xi)];
                wsum += kv;
            }
            mid[y * w + x] = static_cast<float>(acc / wsum);
        }
    }
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double acc = 0.0, wsum = 0.0;
            for (long i = -radius; i <= radius; ++i) {
                const long yi = static_cast<long>(y) + i;
                if (yi < 0 || yi >= static_cast<long>(h)) continue;
                const double kv = kernel[static_cast<std::size_t>(i + radius)];
                acc += kv * mid[static_cast<std::size_t>(yi) * w + x];
                wsum += kv;
            }
            out[y * w + x] = static_cast<float>(acc / wsum);
        }
    }
    return out;
}

}  // namespace detail

// Patch scores -> full-resolution map: reshape row-major to the grid,
// corner-aligned bilinear upsample, optional Gaussian smoothing
// (smooth_sigma 0 skips that code path entirely), clamp to [0,1].
inline AnomalyMap build_map(const std::vector<double>& patch_scores, std::size_t grid_rows,
                            std::size_t grid_cols, std::size_t out_h, std::size_t out_w,
                            double smooth_sigma = 0.0) {
    if (grid_rows * grid_cols != patch_scores.size()) {
        throw_shape("build_map: ", patch_scores.size(), " scores do not fill a ", grid_rows, "x",
                    grid_cols, " grid");
    }
    if (grid_rows == 0 || out_h == 0 || out_w == 0) throw_shape("build_map: empty geometry");
    if (smooth_sigma < 0.0) throw_config("build_map: smooth_sigma must be >= 0");

    std::vector<float> grid(patch_scores.size());
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = static_cast<float>(patch_scores[i]);

    std::vector<float> up = detail::bilinear_upsample(grid, grid_rows, grid_cols, out_h, out_w);
    if (smooth_sigma > 0.0) up = detail::gaussian_blur(up, out_h, out_w, smooth_sigma);

    AnomalyMap map;
    map.height = out_h;
    map.width = out_w;
    map.values.resize(up.size());
    for (std::size_t i = 0; i < up.size(); ++i) map.values[i] = std::clamp(up[i], 0.0f, 1.0f);
    return map;
}

}  // namespace zeroloc
