#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"
#include "zeroloc/rng.hpp"
#include "zeroloc/tensor.hpp"
#include "zeroloc/weights.hpp"

namespace zeroloc {

// Required tensor names and shapes for a configured architecture. Linear
// weights are stored [out, in] (y = x W^T). visual.ln_pre.{weight,bias} is
// optional (backbones trained with a pre-norm keep it; synthetic models omit
// it) and therefore not listed here.
inline std::vector<std::pair<std::string, std::vector<std::size_t>>> model_manifest(const ModelConfig& c) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> m;
    const std::size_t vw = c.vision_width, tw = c.text_width;
    const std::size_t tokens = c.patch_count() + 1;

    m.emplace_back("visual.patch_embed.weight",
                   std::vector<std::size_t>{vw, 3 * c.patch_size * c.patch_size});
    m.emplace_back("visual.class_embedding", std::vector<std::size_t>{vw});
    m.emplace_back("visual.positional_embedding", std::vector<std::size_t>{tokens, vw});
    auto block = [&m](const std::string& prefix, std::size_t w) {
        m.emplace_back(prefix + "ln1.weight", std::vector<std::size_t>{w});
        m.emplace_back(prefix + "ln1.bias", std::vector<std::size_t>{w});
        m.emplace_back(prefix + "attn.qkv_weight", std::vector<std::size_t>{3 * w, w});
        m.emplace_back(prefix + "attn.qkv_bias", std::vector<std::size_t>{3 * w});
        m.emplace_back(prefix + "attn.proj_weight", std::vector<std::size_t>{w, w});
        m.emplace_back(prefix + "attn.proj_bias", std::vector<std::size_t>{w});
        m.emplace_back(prefix + "ln2.weight", std::vector<std::size_t>{w});
        m.emplace_back(prefix + "ln2.bias", std::vector<std::size_t>{w});
        m.emplace_back(prefix + "mlp.fc1_weight", std::vector<std::size_t>{4 * w, w});
        m.emplace_back(prefix + "mlp.fc1_bias", std::vector<std::size_t>{4 * w});
        m.emplace_back(prefix + "mlp.fc2_weight", std::vector<std::size_t>{w, 4 * w});
        m.emplace_back(prefix + "mlp.fc2_bias", std::vector<std::size_t>{w});
    };
    for (std::size_t l = 0; l < c.vision_layers; ++l) {
        block("visual.layer" + std::to_string(l) + ".", vw);
    }
    m.emplace_back("visual.ln_post.weight", std::vector<std::size_t>{vw});
    m.emplace_back("visual.ln_post.bias", std::vector<std::size_t>{vw});
    m.emplace_back("visual.proj", std::vector<std::size_t>{c.embed_dim, vw});

    m.emplace_back("text.token_embedding", std::vector<std::size_t>{c.vocab_size, tw});
    m.emplace_back("text.positional_embedding", std::vector<std::size_t>{c.context_length, tw});
    for (std::size_t l = 0; l < c.text_layers; ++l) {
        block("text.layer" + std::to_string(l) + ".", tw);
    }
    m.emplace_back("text.ln_final.weight", std::vector<std::size_t>{tw});
    m.emplace_back("text.ln_final.bias", std::vector<std::size_t>{tw});
    m.emplace_back("text.proj", std::vector<std::size_t>{c.embed_dim, tw});
    return m;
}

inline void validate_model(const Archive& a, const ModelConfig& c) {
    for (const auto& [name, shape] : model_manifest(c)) {
        auto it = a.tensors.find(name);
        if (it == a.tensors.end()) throw_input("model archive is missing tensor '", name, "'");
        if (it->second.shape != shape) {
            throw_input("model tensor '", name, "' has shape ", Tensor::shape_str(it->second.shape),
                        ", expected ", Tensor::shape_str(shape));
        }
    }
    if (a.has("visual.ln_pre.weight") != a.has("visual.ln_pre.bias")) {
        throw_input("model archive has only one of visual.ln_pre.weight / visual.ln_pre.bias");
    }
    if (a.has("visual.ln_pre.weight") && a.get("visual.ln_pre.weight").numel() != c.vision_width) {
        throw_input("visual.ln_pre tensors do not match vision_width ", c.vision_width);
    }
}

// Synthetic weights: every manifest tensor filled from its own named stream,
// uniform in [-1, 1) scaled by 1/sqrt(fan_in) with fan_in = last shape entry.
// The embedded config makes the archive self-describing.
inline Archive make_synthetic_model(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    Archive a;
    for (const auto& [name, shape] : model_manifest(c)) {
        Tensor t = Tensor::zeros(shape);
        Rng rng = Rng::for_name(seed, name);
        const float gain = 1.0f / std::sqrt(static_cast<float>(shape.back()));
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            t.data[i] = static_cast<float>(rng.next_uniform(-1.0, 1.0)) * gain;
        }
        a.tensors.emplace(name, std::move(t));
    }
    a.metadata["config"] = c.to_json().dump();
    a.metadata["kind"] = "synthetic";
    a.metadata["seed"] = std::to_string(seed);
    return a;
}

struct Model {
    ModelConfig cfg;
    Archive archive;
};

// Loads an archive and its embedded config (or the override), then checks
// the architecture manifest before handing the model out.
inline Model load_model(const std::string& path, const nlohmann::json* config_override = nullptr) {
    Model m;
    m.archive = load_archive(path);
    if (config_override) {
        m.cfg = ModelConfig::from_json(*config_override);
    } else {
        auto it = m.archive.metadata.find("config");
        if (it == m.archive.metadata.end()) {
            throw_input("'", path, "' has no embedded config; pass one explicitly");
        }
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(it->second);
        } catch (const nlohmann::json::exception& e) {
            throw_input("'", path, "': embedded config is not valid json: ", e.what());
        }
        m.cfg = ModelConfig::from_json(j);
    }
    validate_model(m.archive, m.cfg);
    return m;
}

}  // namespace zeroloc
