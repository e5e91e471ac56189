#pragma once

#include <string>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"
#include "zeroloc/tensor.hpp"
#include "zeroloc/tokenizer.hpp"
#include "zeroloc/transformer.hpp"
#include "zeroloc/weights.hpp"

namespace zeroloc {

// Standard CLIP text tower: embeddings -> causal QKV blocks -> final norm ->
// readout at the end-of-text position -> projection -> unit norm. The V-V
// surgery never touches this path.
inline Tensor encode_text(const TokenizedPrompt& prompt, const Archive& store, const ModelConfig& cfg) {
    if (prompt.ids.size() != cfg.context_length) {
        throw_shape("encode_text: prompt has ", prompt.ids.size(), " ids, context_length is ",
                    cfg.context_length);
    }
    if (prompt.eot_index >= prompt.ids.size()) {
        throw_shape("encode_text: eot_index ", prompt.eot_index, " out of range");
    }
    const Tensor& tok_emb = store.get("text.token_embedding");
    const Tensor& pos_emb = store.get("text.positional_embedding");
    const std::size_t w = cfg.text_width;

    Tensor x = Tensor::zeros({cfg.context_length, w});
    for (std::size_t i = 0; i < cfg.context_length; ++i) {
        const std::int32_t id = prompt.ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw_input("encode_text: token id ", id, " at position ", i, " outside vocab of ",
                        cfg.vocab_size);
        }
        for (std::size_t j = 0; j < w; ++j) {
            x.data[i * w + j] = tok_emb.data[static_cast<std::size_t>(id) * w + j] + pos_emb.data[i * w + j];
        }
    }

    for (std::size_t l = 0; l < cfg.text_layers; ++l) {
        const BlockWeights bw = BlockWeights::from(store, "text.layer" + std::to_string(l) + ".");
        x = block_forward(x, bw, cfg.text_heads, /*causal=*/true, cfg.gelu);
    }
    x = layer_norm(x, store.get("text.ln_final.weight"), store.get("text.ln_final.bias"));

    Tensor eot = Tensor::zeros({1, w});
    for (std::size_t j = 0; j < w; ++j) eot.data[j] = x.data[prompt.eot_index * w + j];
    Tensor t = l2_normalize_rows(matmul_nt(eot, store.get("text.proj")));
    t.shape = {t.numel()};
    return t;
}

inline Tensor encode_text_string(const std::string& text, const TokenizerSpec& spec, const Archive& store,
                                 const ModelConfig& cfg) {
    return encode_text(tokenize(text, spec), store, cfg);
}

}  // namespace zeroloc
