#pragma once

#include <string>
#include <vector>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"
#include "zeroloc/image.hpp"
#include "zeroloc/tensor.hpp"
#include "zeroloc/transformer.hpp"
#include "zeroloc/weights.hpp"

namespace zeroloc {

struct VisualOutput {
    Tensor v;  // [C], unit norm, always from the original QKV path
    Tensor P;  // [M, C], unit-norm rows, extraction-mode dependent
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
};

// Non-overlapping patches, linearly embedded (no bias), class embedding
// prepended, positional embeddings added. Patch pixels are flattened
// channel-major (c, then y, then x inside the patch).
inline Tensor patchify(const ImageTensor& image, const Archive& store, const ModelConfig& cfg) {
    if (image.height != cfg.image_size || image.width != cfg.image_size ||
        image.data.size() != 3 * cfg.image_size * cfg.image_size) {
        throw_config("patchify: image is ", image.height, "x", image.width, ", config wants ",
                     cfg.image_size, "x", cfg.image_size);
    }
    const std::size_t ps = cfg.patch_size, g = cfg.grid(), m = cfg.patch_count();
    const std::size_t w = cfg.vision_width, pdim = 3 * ps * ps;
    const Tensor& embed = store.get("visual.patch_embed.weight");
    const Tensor& cls = store.get("visual.class_embedding");
    const Tensor& pos = store.get("visual.positional_embedding");
    if (embed.rows() != w || embed.cols() != pdim) {
        throw_config("patchify: visual.patch_embed.weight is ", Tensor::shape_str(embed.shape),
                     ", expected [", w, "x", pdim, "]");
    }
    if (cls.numel() != w || pos.shape != std::vector<std::size_t>{m + 1, w}) {
        throw_config("patchify: class/positional embeddings do not match config");
    }

    Tensor patches = Tensor::zeros({m, pdim});
    for (std::size_t py = 0; py < g; ++py) {
        for (std::size_t px = 0; px < g; ++px) {
            float* dst = &patches.data[(py * g + px) * pdim];
            std::size_t idx = 0;
            for (std::size_t c = 0; c < 3; ++c) {
                for (std::size_t y = 0; y < ps; ++y) {
                    for (std::size_t x = 0; x < ps; ++x) {
                        dst[idx++] = image.at(c, py * ps + y, px * ps + x);
                    }
                }
            }
        }
    }
    const Tensor embedded = matmul_nt(patches, embed);  // [m, w]

    Tensor z = Tensor::zeros({m + 1, w});
    for (std::size_t j = 0; j < w; ++j) z.data[j] = cls.data[j];
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) z.data[(i + 1) * w + j] = embedded.data[i * w + j];
    }
    return add(z, pos);
}

namespace detail {

// Drop the class row, apply the final norm and projection, unit-normalize.
inline Tensor project_patches(const Tensor& state, const Archive& store) {
    const std::size_t n = state.rows(), w = state.cols();
    Tensor patches = Tensor::zeros({n - 1, w});
    for (std::size_t i = 1; i < n; ++i) {
        for (std::size_t j = 0; j < w; ++j) patches.data[(i - 1) * w + j] = state.data[i * w + j];
    }
    const Tensor normed =
        layer_norm(patches, store.get("visual.ln_post.weight"), store.get("visual.ln_post.bias"));
    return l2_normalize_rows(matmul_nt(normed, store.get("visual.proj")));
}

}  // namespace detail

// Full visual forward. The original QKV path always runs and supplies both
// the class token and, per layer, the value projections that feed the
// surgery modes:
//   qkv       P from the original path's last-layer activations
//   v_last    P from V of the last layer
//   vv_last   one vv_block (last layer's projection) on that V
//   vv_multi  parallel accumulator from vv_start_layer on; dual_path feeds
//             each vv_block the original path's per-layer V, chained feeds it
//             the accumulator itself
inline VisualOutput encode_image(const ImageTensor& image, const Archive& store, const ModelConfig& cfg,
                                 EncodeMode mode) {
    const std::size_t start = cfg.resolved_vv_start();
    const std::size_t last = cfg.vision_layers - 1;

    Tensor z = patchify(image, store, cfg);
    if (store.has("visual.ln_pre.weight")) {
        z = layer_norm(z, store.get("visual.ln_pre.weight"), store.get("visual.ln_pre.bias"));
    }

    Tensor vv_state;
    Tensor v_last_capture;
    const bool want_multi = mode == EncodeMode::VvMulti;
    for (std::size_t l = 0; l < cfg.vision_layers; ++l) {
        const BlockWeights bw = BlockWeights::from(store, "visual.layer" + std::to_string(l) + ".");
        const bool capture = (want_multi && l >= start) || l == last;
        Tensor v_l;
        z = block_forward(z, bw, cfg.vision_heads, /*causal=*/false, cfg.gelu, capture ? &v_l : nullptr);
        if (want_multi && l >= start) {
            if (l == start) {
                vv_state = vv_block(v_l, v_l, bw, cfg.vision_heads);
            } else if (cfg.vv_mode == VvMode::DualPath) {
                vv_state = vv_block(v_l, vv_state, bw, cfg.vision_heads);
            } else {
                vv_state = vv_block(vv_state, vv_state, bw, cfg.vision_heads);
            }
        }
        if (l == last) v_last_capture = std::move(v_l);
    }

    const Tensor final_normed =
        layer_norm(z, store.get("visual.ln_post.weight"), store.get("visual.ln_post.bias"));
    Tensor cls = Tensor::zeros({1, cfg.vision_width});
    for (std::size_t j = 0; j < cfg.vision_width; ++j) cls.data[j] = final_normed.data[j];

    VisualOutput out;
    out.v = l2_normalize_rows(matmul_nt(cls, store.get("visual.proj")));
    out.v.shape = {out.v.numel()};
    out.grid_rows = cfg.grid();
    out.grid_cols = cfg.grid();

    switch (mode) {
        case EncodeMode::Qkv:
            out.P = detail::project_patches(z, store);
            break;
        case EncodeMode::VLast:
            out.P = detail::project_patches(v_last_capture, store);
            break;
        case EncodeMode::VvLast: {
            const BlockWeights bw = BlockWeights::from(store, "visual.layer" + std::to_string(last) + ".");
            out.P = detail::project_patches(vv_block(v_last_capture, v_last_capture, bw, cfg.vision_heads),
                                            store);
            break;
        }
        case EncodeMode::VvMulti:
            out.P = detail::project_patches(vv_state, store);
            break;
    }
    return out;
}

}  // namespace zeroloc
