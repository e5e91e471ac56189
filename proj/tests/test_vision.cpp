#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "helpers.hpp"
#include "zeroloc/manifest.hpp"
#include "zeroloc/vision.hpp"

using namespace zeroloc;
using Catch::Approx;

namespace {

using Mat = std::vector<std::vector<double>>;

ImageTensor random_image(const ModelConfig& cfg, std::uint32_t seed) {
    ImageTensor img;
    img.height = cfg.image_size;
    img.width = cfg.image_size;
    img.data.resize(3 * cfg.image_size * cfg.image_size);
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> d(-2.0f, 2.0f);
    for (float& v : img.data) v = d(rng);
    return img;
}

Mat to_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
    Mat m(rows, std::vector<double>(cols));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) m[i][j] = t.data[i * cols + j];
    }
    return m;
}

std::vector<double> to_vec(const Tensor& t) {
    return std::vector<double>(t.data.begin(), t.data.end());
}

Mat ref_linear(const Mat& x, const Mat& w, const std::vector<double>& b) {
    Mat y(x.size(), std::vector<double>(w.size(), 0.0));
    for (std::size_t i = 0; i < x.size(); ++i) {
        for (std::size_t o = 0; o < w.size(); ++o) {
            double acc = b.empty() ? 0.0 : b[o];
            for (std::size_t k = 0; k < x[i].size(); ++k) acc += x[i][k] * w[o][k];
            y[i][o] = acc;
        }
    }
    return y;
}

Mat ref_layer_norm(const Mat& x, const std::vector<double>& g, const std::vector<double>& b,
                   double eps = 1e-5) {
    Mat y = x;
    for (auto& row : y) {
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= row.size();
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= row.size();
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = (row[i] - mean) * inv * g[i] + b[i];
    }
    return y;
}

Mat ref_attention(const Mat& q, const Mat& k, const Mat& v, std::size_t heads) {
    const std::size_t n = q.size(), w = q[0].size(), dh = w / heads;
    Mat out(n, std::vector<double>(w, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * dh;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> logits(n);
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) s += q[i][off + d] * k[j][off + d];
                logits[j] = s / std::sqrt(static_cast<double>(dh));
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double sum = 0.0;
            std::vector<double> e(n);
            for (std::size_t j = 0; j < n; ++j) {
                e[j] = std::exp(logits[j] - mx);
                sum += e[j];
            }
            for (std::size_t d = 0; d < dh; ++d) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += e[j] / sum * v[j][off + d];
                out[i][off + d] = acc;
            }
        }
    }
    return out;
}

// patch flatten + linear embed + class/positional embeddings, in double
Mat ref_patchify(const ImageTensor& img, const Archive& a, const ModelConfig& cfg) {
    const std::size_t ps = cfg.patch_size, g = cfg.grid(), m = cfg.patch_count();
    const std::size_t w = cfg.vision_width, pdim = 3 * ps * ps;
    const Mat embed = to_mat(a.get("visual.patch_embed.weight"), w, pdim);
    const std::vector<double> cls = to_vec(a.get("visual.class_embedding"));
    const Mat pos = to_mat(a.get("visual.positional_embedding"), m + 1, w);

    Mat z(m + 1, std::vector<double>(w));
    for (std::size_t j = 0; j < w; ++j) z[0][j] = cls[j] + pos[0][j];
    for (std::size_t py = 0; py < g; ++py) {
        for (std::size_t px = 0; px < g; ++px) {
            std::vector<double> flat(pdim);
            std::size_t idx = 0;
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t y = 0; y < ps; ++y) {
                    for (std::size_t x = 0; x < ps; ++x) {
                        flat[idx++] = img.at(c, py * ps + y, px * ps + x);
                    }
                }
            }
            const std::size_t row = 1 + py * g + px;
            for (std::size_t j = 0; j < w; ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < pdim; ++p) acc += flat[p] * embed[j][p];
                z[row][j] = acc + pos[row][j];
            }
        }
    }
    return z;
}

// straight-line reference for the original QKV path: P (qkv mode) and v
void ref_encode_qkv(const ImageTensor& img, const Archive& a, const ModelConfig& cfg, Mat& p_out,
                    std::vector<double>& v_out) {
    const std::size_t w = cfg.vision_width, n = cfg.patch_count() + 1;
    Mat x = ref_patchify(img, a, cfg);

    for (std::size_t l = 0; l < cfg.vision_layers; ++l) {
        const std::string p = "visual.layer" + std::to_string(l) + ".";
        const Mat normed = ref_layer_norm(x, to_vec(a.get(p + "ln1.weight")), to_vec(a.get(p + "ln1.bias")));
        const Mat fused = ref_linear(normed, to_mat(a.get(p + "attn.qkv_weight"), 3 * w, w),
                                     to_vec(a.get(p + "attn.qkv_bias")));
        Mat q(n, std::vector<double>(w)), k(n, std::vector<double>(w)), v(n, std::vector<double>(w));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                q[i][j] = fused[i][j];
                k[i][j] = fused[i][w + j];
                v[i][j] = fused[i][2 * w + j];
            }
        }
        const Mat mixed = ref_attention(q, k, v, cfg.vision_heads);
        const Mat attn_out =
            ref_linear(mixed, to_mat(a.get(p + "attn.proj_weight"), w, w), to_vec(a.get(p + "attn.proj_bias")));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) x[i][j] += attn_out[i][j];
        }

        const Mat normed2 = ref_layer_norm(x, to_vec(a.get(p + "ln2.weight")), to_vec(a.get(p + "ln2.bias")));
        Mat h = ref_linear(normed2, to_mat(a.get(p + "mlp.fc1_weight"), 4 * w, w),
                           to_vec(a.get(p + "mlp.fc1_bias")));
        for (auto& row : h) {
            for (double& val : row) val = 0.5 * val * (1.0 + std::erf(val / std::sqrt(2.0)));
        }
        const Mat mlp_out = ref_linear(h, to_mat(a.get(p + "mlp.fc2_weight"), w, 4 * w),
                                       to_vec(a.get(p + "mlp.fc2_bias")));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < w; ++j) x[i][j] += mlp_out[i][j];
        }
    }

    const Mat normed =
        ref_layer_norm(x, to_vec(a.get("visual.ln_post.weight")), to_vec(a.get("visual.ln_post.bias")));
    const Mat proj = to_mat(a.get("visual.proj"), cfg.embed_dim, w);
    Mat projected = ref_linear(normed, proj, {});
    for (auto& row : projected) {
        double nrm = 0.0;
        for (double val : row) nrm += val * val;
        nrm = std::sqrt(nrm);
        for (double& val : row) val /= nrm;
    }
    v_out = projected[0];
    p_out.assign(projected.begin() + 1, projected.end());
}

}  // namespace

TEST_CASE("patchify flattens channel-major and adds embeddings", "[vision]") {
    const ModelConfig cfg = ModelConfig::tiny();
    const Archive a = make_synthetic_model(cfg, 21);
    const ImageTensor img = random_image(cfg, 101);

    const Tensor z = patchify(img, a, cfg);
    const Mat want = ref_patchify(img, a, cfg);
    REQUIRE(z.shape == std::vector<std::size_t>{cfg.patch_count() + 1, cfg.vision_width});
    for (std::size_t i = 0; i < want.size(); ++i) {
        for (std::size_t j = 0; j < want[i].size(); ++j) {
            CHECK(z.data[i * cfg.vision_width + j] == Approx(want[i][j]).margin(1e-3));
        }
    }
}

TEST_CASE("qkv mode matches the straight-line reference", "[vision]") {
    const ModelConfig cfg = ModelConfig::tiny();
    const Archive a = make_synthetic_model(cfg, 33);
    const ImageTensor img = random_image(cfg, 202);

    const VisualOutput out = encode_image(img, a, cfg, EncodeMode::Qkv);
    Mat want_p;
    std::vector<double> want_v;
    ref_encode_qkv(img, a, cfg, want_p, want_v);

    REQUIRE(out.P.shape == std::vector<std::size_t>{cfg.patch_count(), cfg.embed_dim});
    REQUIRE(out.v.numel() == cfg.embed_dim);
    CHECK(out.grid_rows == cfg.grid());
    CHECK(out.grid_cols == cfg.grid());
    for (std::size_t j = 0; j < want_v.size(); ++j) {
        CHECK(out.v.data[j] == Approx(want_v[j]).margin(5e-4));
    }
    for (std::size_t i = 0; i < want_p.size(); ++i) {
        for (std::size_t j = 0; j < want_p[i].size(); ++j) {
            CHECK(out.P.data[i * cfg.embed_dim + j] == Approx(want_p[i][j]).margin(5e-4));
        }
    }
}

TEST_CASE("the class embedding ignores the extraction mode", "[vision]") {
    const ModelConfig cfg = ModelConfig::tiny();
    const Archive a = make_synthetic_model(cfg, 5);
    const ImageTensor img = random_image(cfg, 404);

    const VisualOutput base = encode_image(img, a, cfg, EncodeMode::Qkv);
    for (EncodeMode mode : {EncodeMode::VLast, EncodeMode::VvLast, EncodeMode::VvMulti}) {
        const VisualOutput other = encode_image(img, a, cfg, mode);
        CHECK(zt::bitwise_equal(base.v, other.v));
        CHECK_FALSE(zt::bitwise_equal(base.P, other.P));
    }
}

TEST_CASE("patch features follow a cyclic shift when positions are zeroed", "[vision]") {
    const ModelConfig cfg = ModelConfig::tiny();
    Archive a = make_synthetic_model(cfg, 11);
    Tensor& pos = a.tensors.at("visual.positional_embedding");
    std::fill(pos.data.begin(), pos.data.end(), 0.0f);

    const ImageTensor img = random_image(cfg, 303);
    const std::size_t g = cfg.grid(), ps = cfg.patch_size;
    ImageTensor shifted = img;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t py = 0; py < g; ++py) {
            for (std::size_t px = 0; px < g; ++px) {
                const std::size_t src_px = (px + 1) % g;
                for (std::size_t y = 0; y < ps; ++y) {
                    for (std::size_t x = 0; x < ps; ++x) {
                        shifted.at(c, py * ps + y, px * ps + x) = img.at(c, py * ps + y, src_px * ps + x);
                    }
                }
            }
        }
    }

    for (EncodeMode mode : {EncodeMode::Qkv, EncodeMode::VLast, EncodeMode::VvLast, EncodeMode::VvMulti}) {
        const VisualOutput base = encode_image(img, a, cfg, mode);
        const VisualOutput moved = encode_image(shifted, a, cfg, mode);
        const std::size_t C = cfg.embed_dim;
        for (std::size_t py = 0; py < g; ++py) {
            for (std::size_t px = 0; px < g; ++px) {
                const std::size_t dst = py * g + px, src = py * g + (px + 1) % g;
                for (std::size_t j = 0; j < C; ++j) {
                    CHECK(moved.P.data[dst * C + j] == Approx(base.P.data[src * C + j]).margin(1e-4));
                }
            }
        }
        for (std::size_t j = 0; j < C; ++j) {
            CHECK(moved.v.data[j] == Approx(base.v.data[j]).margin(1e-4));
        }
    }
}

TEST_CASE("vv_block doubles a lone token under an identity projection", "[vision]") {
    const std::size_t w = 8;
    std::mt19937 rng(40);
    const Tensor a = zt::random_tensor({1, w}, rng);
    Tensor eye = Tensor::zeros({w, w});
    for (std::size_t i = 0; i < w; ++i) eye.data[i * w + i] = 1.0f;
    const Tensor zero_bias = Tensor::zeros({w});
    const Tensor unused2d = Tensor::zeros({1, 1});
    const Tensor unused1d = Tensor::zeros({1});
    const BlockWeights bw{unused1d, unused1d, unused2d, unused1d, eye,      zero_bias,
                          unused1d, unused1d, unused2d, unused1d, unused2d, unused1d};

    const Tensor out = vv_block(a, a, bw, 2);
    CHECK(zt::bitwise_equal(out, add(a, a)));
}

TEST_CASE("vv_block with zero weights is the identity on the residual", "[vision]") {
    const std::size_t n = 5, w = 8;
    std::mt19937 rng(41);
    const Tensor attn_in = zt::random_tensor({n, w}, rng);
    const Tensor residual = zt::random_tensor({n, w}, rng);
    const Tensor zero_w = Tensor::zeros({w, w});
    const Tensor zero_b = Tensor::zeros({w});
    const Tensor unused2d = Tensor::zeros({1, 1});
    const Tensor unused1d = Tensor::zeros({1});
    const BlockWeights bw{unused1d, unused1d, unused2d, unused1d, zero_w,   zero_b,
                          unused1d, unused1d, unused2d, unused1d, unused2d, unused1d};

    const Tensor out = vv_block(attn_in, residual, bw, 2);
    CHECK(zt::bitwise_equal(out, residual));
}

TEST_CASE("vv_last equals vv_multi when the window starts at the last layer", "[vision]") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.vv_start_layer = static_cast<long long>(cfg.vision_layers) - 1;
    const Archive a = make_synthetic_model(cfg, 77);
    const ImageTensor img = random_image(cfg, 505);

    const VisualOutput multi = encode_image(img, a, cfg, EncodeMode::VvMulti);
    const VisualOutput last = encode_image(img, a, cfg, EncodeMode::VvLast);
    CHECK(zt::bitwise_equal(multi.P, last.P));
    CHECK(zt::bitwise_equal(multi.v, last.v));
}

TEST_CASE("wrong image size is a config error", "[vision]") {
    const ModelConfig cfg = ModelConfig::tiny();
    const Archive a = make_synthetic_model(cfg, 1);
    ImageTensor img;
    img.height = cfg.image_size + 1;
    img.width = cfg.image_size;
    img.data.resize(3 * img.height * img.width, 0.0f);
    try {
        encode_image(img, a, cfg, EncodeMode::Qkv);
        FAIL("expected config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Config);
    }
}
