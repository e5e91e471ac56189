#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "zeroloc/errors.hpp"
#include "zeroloc/prompts.hpp"
#include "zeroloc/rng.hpp"
#include "zeroloc/scoring.hpp"
#include "zeroloc/tensor.hpp"

namespace zeroloc {

struct NoiseSpec {
    double mu = 0.0;
    double sigma = 0.1;
    // With relative set, sigma scales the RMS of the adapted tokens at the
    // current step; otherwise it is an absolute standard deviation.
    bool relative = true;
    std::uint64_t seed = 0;
};

struct TtaConfig {
    std::size_t epochs = 5;
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    NoiseSpec noise;
    double tau = 100.0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw_config("tta: learning_rate must be positive");
        if (!(tau > 0.0)) throw_config("tta: tau must be positive");
        if (noise.sigma < 0.0) throw_config("tta: noise sigma must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw_config("tta: adam betas must lie in [0,1)");
        }
    }
};

struct AdapterState {
    Tensor omega;                // [2N, C], initialized to T bitwise
    std::vector<double> adam_m;  // first moment
    std::vector<double> adam_v;  // second moment
    std::size_t step_count = 0;

    static AdapterState reset(const Tensor& T) {
        AdapterState st;
        st.omega = T;
        st.adam_m.assign(T.numel(), 0.0);
        st.adam_v.assign(T.numel(), 0.0);
        st.step_count = 0;
        return st;
    }
};

// P' = softmax_rows(P w^T) T + P. Rows stay raw; the scorer normalizes.
inline Tensor adapt_tokens(const Tensor& P, const Tensor& omega, const Tensor& T) {
    if (omega.shape != T.shape) {
        throw_shape("adapt_tokens: omega ", Tensor::shape_str(omega.shape), " vs T ",
                    Tensor::shape_str(T.shape));
    }
    if (P.rank() != 2 || P.cols() != T.cols()) {
        throw_shape("adapt_tokens: P ", Tensor::shape_str(P.shape), " does not match token dim ",
                    T.cols());
    }
    const Tensor weights = softmax_rows(matmul_nt(P, omega));
    return add(matmul(weights, T), P);
}

inline double rms(const Tensor& t) {
    if (t.numel() == 0) return 0.0;
    double s = 0.0;
    for (float v : t.data) s += static_cast<double>(v) * v;
    return std::sqrt(s / static_cast<double>(t.numel()));
}

namespace detail {

inline double resolve_sigma(const NoiseSpec& spec, const Tensor& reference) {
    return spec.relative ? spec.sigma * rms(reference) : spec.sigma;
}

inline std::vector<float> sample_noise(std::size_t n, double mu, double sigma, Rng& rng) {
    std::vector<float> noise(n, 0.0f);
    if (sigma > 0.0) rng.fill_gaussian(noise.data(), n, mu, sigma);
    return noise;
}

}  // namespace detail

// Adds elementwise Gaussian noise from the rng stream; sigma == 0 (after
// relative resolution) returns the input bitwise.
inline Tensor corrupt_tokens(const Tensor& P_adapted, const NoiseSpec& spec, Rng& rng) {
    if (spec.sigma < 0.0) throw_config("corrupt_tokens: sigma must be >= 0");
    const double sigma = detail::resolve_sigma(spec, P_adapted);
    if (sigma == 0.0) return P_adapted;
    const std::vector<float> noise = detail::sample_noise(P_adapted.numel(), spec.mu, sigma, rng);
    Tensor out = P_adapted;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += noise[i];
    require_finite(out, "corrupt_tokens");
    return out;
}

inline Tensor corrupt_tokens(const Tensor& P_adapted, const NoiseSpec& spec) {
    Rng rng(spec.seed);
    return corrupt_tokens(P_adapted, spec, rng);
}

namespace detail {
inline constexpr double kLogEps = 1e-7;
inline double clamp_score(double s) { return std::clamp(s, kLogEps, 1.0 - kLogEps); }
}  // namespace detail

// Eq. 10: discrimination loss over clean (should look normal) and
// noise-corrupted (should look anomalous) scores.
inline double loss_d(const std::vector<double>& s_clean, const std::vector<double>& s_noisy) {
    if (s_clean.empty() || s_clean.size() != s_noisy.size()) {
        throw_shape("loss_d: score vectors must be nonempty and equal-length");
    }
    const std::size_t m = s_clean.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        acc += std::log(1.0 - detail::clamp_score(s_clean[i])) +
               std::log(detail::clamp_score(s_noisy[i]));
    }
    return -acc / (2.0 * static_cast<double>(m));
}

// Eq. 11: pseudo-label consistency; s_pseudo is a constant weight vector.
inline double loss_p(const std::vector<double>& s_pseudo, const std::vector<double>& s_adapted) {
    if (s_pseudo.empty() || s_pseudo.size() != s_adapted.size()) {
        throw_shape("loss_p: score vectors must be nonempty and equal-length");
    }
    const std::size_t m = s_pseudo.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        acc += s_pseudo[i] * std::log(detail::clamp_score(s_adapted[i]));
    }
    return -acc / static_cast<double>(m);
}

struct TtaStep {
    double loss_d = 0.0;
    double loss_p = 0.0;
    double loss_total = 0.0;
    std::vector<double> grad;     // dL/d omega, [2N*C] row-major
    std::vector<double> s_clean;  // adapted scores, M
    std::vector<double> s_noisy;  // corrupted scores, M
};

// One forward/backward evaluation at fixed noise delta, all math in 64-bit.
// The chain runs: A = P w^T -> W = softmax(A) -> P' = W T + P -> row
// normalization -> cosine against (t+, t-) -> two-way softmax -> L_d + L_p.
// delta is treated as a constant; gradients flow through both the clean and
// the corrupted branch (the corruption is additive on P'). Scores pushed
// into the log clamp contribute zero gradient, matching the clamped loss.
inline TtaStep tta_step(const Tensor& P, const Tensor& T, const Tensor& omega, const Tensor& t_plus,
                        const Tensor& t_minus, const std::vector<double>& s_pseudo,
                        const std::vector<float>& delta, double tau) {
    const std::size_t m = P.rows(), c = P.cols(), rows = T.rows();
    if (omega.shape != T.shape || T.cols() != c) throw_shape("tta_step: shape mismatch");
    if (s_pseudo.size() != m || delta.size() != m * c) throw_shape("tta_step: vector length mismatch");
    if (m == 0) throw_shape("tta_step: no patches");
    if (t_plus.numel() != c || t_minus.numel() != c) throw_shape("tta_step: token dim mismatch");

    const double md = static_cast<double>(m);
    std::vector<double> d(c);
    for (std::size_t j = 0; j < c; ++j) {
        d[j] = static_cast<double>(t_minus.data[j]) - t_plus.data[j];
    }

    // forward: attention weights and adapted tokens
    std::vector<double> W(m * rows);
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -1e300;
        for (std::size_t k = 0; k < rows; ++k) {
            double a = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                a += static_cast<double>(P.data[i * c + j]) * omega.data[k * c + j];
            }
            W[i * rows + k] = a;
            mx = std::max(mx, a);
        }
        double sum = 0.0;
        for (std::size_t k = 0; k < rows; ++k) {
            W[i * rows + k] = std::exp(W[i * rows + k] - mx);
            sum += W[i * rows + k];
        }
        for (std::size_t k = 0; k < rows; ++k) W[i * rows + k] /= sum;
    }
    std::vector<double> adapted(m * c);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            double acc = static_cast<double>(P.data[i * c + j]);
            for (std::size_t k = 0; k < rows; ++k) {
                acc += W[i * rows + k] * T.data[k * c + j];
            }
            adapted[i * c + j] = acc;
        }
    }

    TtaStep out;
    out.s_clean.resize(m);
    out.s_noisy.resize(m);
    std::vector<double> G(m * c, 0.0);  // dL/dP'

    // per-row scoring and gradient w.r.t. the adapted row
    auto score_branch = [&](const double* x, double& s_out, double& raw_out) {
        double nrm = 0.0;
        for (std::size_t j = 0; j < c; ++j) nrm += x[j] * x[j];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) throw_numeric("tta_step: degenerate adapted token (norm < 1e-12)");
        double r = 0.0;
        for (std::size_t j = 0; j < c; ++j) r += x[j] / nrm * d[j];
        const double z = tau * r;
        double s;
        if (z >= 0.0) {
            s = 1.0 / (1.0 + std::exp(-z));
        } else {
            const double e = std::exp(z);
            s = e / (1.0 + e);
        }
        raw_out = s;
        s_out = detail::clamp_score(s);
        return nrm;
    };
    auto add_branch_grad = [&](const double* x, double dl_ds, double s_raw, double nrm, double* g_row) {
        if (dl_ds == 0.0) return;
        const double coef = dl_ds * tau * s_raw * (1.0 - s_raw);
        double r = 0.0;
        for (std::size_t j = 0; j < c; ++j) r += x[j] / nrm * d[j];
        for (std::size_t j = 0; j < c; ++j) {
            const double u = x[j] / nrm;
            g_row[j] += coef * (d[j] - r * u) / nrm;
        }
    };

    std::vector<double> noisy_row(c);
    double acc_d = 0.0, acc_p = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* clean = &adapted[i * c];
        for (std::size_t j = 0; j < c; ++j) {
            noisy_row[j] = clean[j] + static_cast<double>(delta[i * c + j]);
        }
        double s_clean_raw = 0.0, s_noisy_raw = 0.0;
        const double nrm_c = score_branch(clean, out.s_clean[i], s_clean_raw);
        const double nrm_n = score_branch(noisy_row.data(), out.s_noisy[i], s_noisy_raw);

        acc_d += std::log(1.0 - out.s_clean[i]) + std::log(out.s_noisy[i]);
        acc_p += s_pseudo[i] * std::log(out.s_clean[i]);

        const bool clean_clamped =
            s_clean_raw <= detail::kLogEps || s_clean_raw >= 1.0 - detail::kLogEps;
        const bool noisy_clamped =
            s_noisy_raw <= detail::kLogEps || s_noisy_raw >= 1.0 - detail::kLogEps;
        const double dl_dsc =
            clean_clamped ? 0.0
                          : 1.0 / (2.0 * md * (1.0 - out.s_clean[i])) -
                                s_pseudo[i] / (md * out.s_clean[i]);
        const double dl_dsn = noisy_clamped ? 0.0 : -1.0 / (2.0 * md * out.s_noisy[i]);

        add_branch_grad(clean, dl_dsc, s_clean_raw, nrm_c, &G[i * c]);
        add_branch_grad(noisy_row.data(), dl_dsn, s_noisy_raw, nrm_n, &G[i * c]);
    }
    out.loss_d = -acc_d / (2.0 * md);
    out.loss_p = -acc_p / md;
    out.loss_total = out.loss_d + out.loss_p;

    // back through P' = W T + P and the row softmax to omega
    out.grad.assign(rows * c, 0.0);
    std::vector<double> dW(rows), dA(rows);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < rows; ++k) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += G[i * c + j] * T.data[k * c + j];
            dW[k] = acc;
        }
        double dot = 0.0;
        for (std::size_t k = 0; k < rows; ++k) dot += W[i * rows + k] * dW[k];
        for (std::size_t k = 0; k < rows; ++k) dA[k] = W[i * rows + k] * (dW[k] - dot);
        for (std::size_t k = 0; k < rows; ++k) {
            const double a = dA[k];
            if (a == 0.0) continue;
            for (std::size_t j = 0; j < c; ++j) out.grad[k * c + j] += a * P.data[i * c + j];
        }
    }
    return out;
}

namespace detail {

// Renormalized half-mean of T, or zero when the mean degenerates (an
// all-zero T must yield an exactly zero gradient, not an error).
inline Tensor safe_half_token(const Tensor& T, std::size_t first, std::size_t n) {
    const std::size_t c = T.cols();
    std::vector<double> acc(c, 0.0);
    for (std::size_t i = first; i < first + n; ++i) {
        for (std::size_t j = 0; j < c; ++j) acc[j] += T.data[i * c + j];
    }
    double norm = 0.0;
    for (std::size_t j = 0; j < c; ++j) norm += (acc[j] / n) * (acc[j] / n);
    norm = std::sqrt(norm);
    Tensor out = Tensor::zeros({c});
    if (norm >= 1e-12) {
        for (std::size_t j = 0; j < c; ++j) out.data[j] = static_cast<float>(acc[j] / n / norm);
    }
    return out;
}

}  // namespace detail

// Convenience wrapper: samples the noise internally, returns the gradient
// alone. The loop below keeps one rng stream across epochs instead.
inline Tensor grad_omega(const Tensor& P, const Tensor& T, const Tensor& omega,
                         const std::vector<double>& s_pseudo, const NoiseSpec& noise, double tau) {
    const std::size_t rows = T.rows();
    if (rows == 0 || rows % 2 != 0) throw_shape("grad_omega: T must be 2NxC");
    const Tensor t_plus = detail::safe_half_token(T, 0, rows / 2);
    const Tensor t_minus = detail::safe_half_token(T, rows / 2, rows / 2);
    Rng rng(noise.seed);
    const Tensor adapted = adapt_tokens(P, omega, T);
    const double sigma = detail::resolve_sigma(noise, adapted);
    const std::vector<float> delta = detail::sample_noise(P.numel(), noise.mu, sigma, rng);
    const TtaStep step = tta_step(P, T, omega, t_plus, t_minus, s_pseudo, delta, tau);
    Tensor grad = Tensor::zeros(T.shape);
    for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] = static_cast<float>(step.grad[i]);
    return grad;
}

// Decoupled weight decay, then bias-corrected Adam. Math in 64-bit, omega
// stored back as f32.
inline void adamw_step(AdapterState& state, const std::vector<double>& grad, const TtaConfig& cfg) {
    if (grad.size() != state.omega.numel()) throw_shape("adamw_step: gradient length mismatch");
    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < grad.size(); ++i) {
        state.adam_m[i] = cfg.beta1 * state.adam_m[i] + (1.0 - cfg.beta1) * grad[i];
        state.adam_v[i] = cfg.beta2 * state.adam_v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.adam_m[i] / bc1;
        const double vhat = state.adam_v[i] / bc2;
        const double decayed = state.omega.data[i] * (1.0 - cfg.learning_rate * cfg.weight_decay);
        state.omega.data[i] =
            static_cast<float>(decayed - cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
    }
    require_finite(state.omega, "omega after adamw_step");
}

struct TraceRow {
    std::size_t epoch = 0;
    double loss_d = 0.0;
    double loss_p = 0.0;
    double loss_total = 0.0;
};

struct TtaResult {
    Tensor adapted;  // [M, C]
    Tensor omega;    // [2N, C] final
    std::vector<TraceRow> trace;
};

// Full per-query loop: omega <- T, pseudo-labels once from the unadapted
// tokens, then epochs x (noise, forward/backward, AdamW). One optimizer
// step per epoch; the noise stream continues across epochs.
inline TtaResult run_tta(const Tensor& P, const TextTokenPair& pair, const TtaConfig& cfg) {
    cfg.validate();
    if (P.rank() != 2 || P.rows() == 0) throw_shape("run_tta: P must be a nonempty MxC matrix");

    AdapterState state = AdapterState::reset(pair.matrix);
    const std::vector<double> s_pseudo = score_patches(P, pair, cfg.tau);
    Rng rng(cfg.noise.seed);

    TtaResult result;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const Tensor adapted_now = adapt_tokens(P, state.omega, pair.matrix);
        const double sigma = detail::resolve_sigma(cfg.noise, adapted_now);
        const std::vector<float> delta = detail::sample_noise(P.numel(), cfg.noise.mu, sigma, rng);
        const TtaStep step =
            tta_step(P, pair.matrix, state.omega, pair.t_plus, pair.t_minus, s_pseudo, delta, cfg.tau);
        if (!std::isfinite(step.loss_total)) {
            throw_numeric("run_tta: non-finite loss at epoch ", epoch, " (L_d=", step.loss_d,
                          ", L_p=", step.loss_p, ")");
        }
        result.trace.push_back(TraceRow{epoch, step.loss_d, step.loss_p, step.loss_total});
        adamw_step(state, step.grad, cfg);
    }
    result.adapted = adapt_tokens(P, state.omega, pair.matrix);
    result.omega = std::move(state.omega);
    return result;
}

}  // namespace zeroloc
