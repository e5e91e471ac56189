#pragma once

#include <array>
#include <cstddef>
#include <string>

#include <json.hpp>

#include "zeroloc/errors.hpp"

namespace zeroloc {

// How patch features are read out of the visual tower.
//   qkv      original attention path, last-layer tokens
//   v_last   value vectors of the last layer, no attention mixing
//   vv_last  one V-V attention block on the last layer
//   vv_multi V-V attention blocks from vv_start_layer onward, accumulated
enum class EncodeMode { Qkv, VLast, VvLast, VvMulti };

// How multi-layer V-V blocks combine.
//   dual_path  each block reads the original path's values, outputs sum
//   chained    each block transforms the accumulated state
enum class VvMode { DualPath, Chained };

enum class GeluKind { Erf, Tanh };

inline const char* to_string(EncodeMode m) {
    switch (m) {
        case EncodeMode::Qkv: return "qkv";
        case EncodeMode::VLast: return "v_last";
        case EncodeMode::VvLast: return "vv_last";
        case EncodeMode::VvMulti: return "vv_multi";
    }
    throw_config("unknown encode mode");
}

inline EncodeMode parse_encode_mode(const std::string& s) {
    if (s == "qkv") return EncodeMode::Qkv;
    if (s == "v_last") return EncodeMode::VLast;
    if (s == "vv_last") return EncodeMode::VvLast;
    if (s == "vv_multi") return EncodeMode::VvMulti;
    throw_config("unknown encode mode '", s, "' (expected qkv|v_last|vv_last|vv_multi)");
}

inline const char* to_string(VvMode m) {
    return m == VvMode::DualPath ? "dual_path" : "chained";
}

inline VvMode parse_vv_mode(const std::string& s) {
    if (s == "dual_path") return VvMode::DualPath;
    if (s == "chained") return VvMode::Chained;
    throw_config("unknown vv mode '", s, "' (expected dual_path|chained)");
}

inline const char* to_string(GeluKind g) { return g == GeluKind::Erf ? "erf" : "tanh"; }

inline GeluKind parse_gelu(const std::string& s) {
    if (s == "erf") return GeluKind::Erf;
    if (s == "tanh") return GeluKind::Tanh;
    throw_config("unknown gelu kind '", s, "' (expected erf|tanh)");
}

// Architecture and preprocessing description. Defaults match the ViT-B-16+
// backbone at 240x240 input. Serialized into weight archives so a model file
// fully determines its own geometry.
struct ModelConfig {
    std::size_t image_size = 240;
    std::size_t patch_size = 16;

    std::size_t vision_width = 896;
    std::size_t vision_layers = 12;
    std::size_t vision_heads = 14;

    std::size_t embed_dim = 640;

    std::size_t text_width = 640;
    std::size_t text_layers = 12;
    std::size_t text_heads = 10;
    std::size_t context_length = 77;
    std::size_t vocab_size = 49408;

    // -1 selects floor(vision_layers / 2).
    long long vv_start_layer = -1;
    VvMode vv_mode = VvMode::DualPath;
    GeluKind gelu = GeluKind::Erf;

    float tau = 100.0f;

    std::array<float, 3> mean = {0.48145466f, 0.4578275f, 0.40821073f};
    std::array<float, 3> stddev = {0.26862954f, 0.26130258f, 0.27577711f};

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t patch_count() const { return grid() * grid(); }

    std::size_t resolved_vv_start() const {
        if (vv_start_layer < 0) return vision_layers / 2;
        return static_cast<std::size_t>(vv_start_layer);
    }

    void validate() const {
        if (patch_size == 0 || image_size == 0) throw_config("image_size and patch_size must be positive");
        if (image_size % patch_size != 0) {
            throw_config("image_size ", image_size, " is not a multiple of patch_size ", patch_size);
        }
        if (vision_width == 0 || vision_heads == 0 || vision_width % vision_heads != 0) {
            throw_config("vision_width ", vision_width, " must be a positive multiple of vision_heads ",
                         vision_heads);
        }
        if (text_width == 0 || text_heads == 0 || text_width % text_heads != 0) {
            throw_config("text_width ", text_width, " must be a positive multiple of text_heads ", text_heads);
        }
        if (vision_layers == 0 || text_layers == 0) throw_config("layer counts must be positive");
        if (embed_dim == 0) throw_config("embed_dim must be positive");
        if (context_length < 3) throw_config("context_length must be at least 3 (start, one body, end)");
        if (vocab_size < 514) throw_config("vocab_size must cover bytes plus specials (>= 514)");
        if (vv_start_layer >= 0 && static_cast<std::size_t>(vv_start_layer) >= vision_layers) {
            throw_config("vv_start_layer ", vv_start_layer, " out of range for ", vision_layers, " layers");
        }
        if (!(tau > 0.0f)) throw_config("tau must be positive");
        for (float s : stddev) {
            if (!(s > 0.0f)) throw_config("normalization stddev entries must be positive");
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["image_size"] = image_size;
        j["patch_size"] = patch_size;
        j["vision_width"] = vision_width;
        j["vision_layers"] = vision_layers;
        j["vision_heads"] = vision_heads;
        j["embed_dim"] = embed_dim;
        j["text_width"] = text_width;
        j["text_layers"] = text_layers;
        j["text_heads"] = text_heads;
        j["context_length"] = context_length;
        j["vocab_size"] = vocab_size;
        j["vv_start_layer"] = vv_start_layer;
        j["vv_mode"] = to_string(vv_mode);
        j["gelu"] = to_string(gelu);
        j["tau"] = tau;
        j["mean"] = mean;
        j["stddev"] = stddev;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        try {
            c.image_size = j.at("image_size").get<std::size_t>();
            c.patch_size = j.at("patch_size").get<std::size_t>();
            c.vision_width = j.at("vision_width").get<std::size_t>();
            c.vision_layers = j.at("vision_layers").get<std::size_t>();
            c.vision_heads = j.at("vision_heads").get<std::size_t>();
            c.embed_dim = j.at("embed_dim").get<std::size_t>();
            c.text_width = j.at("text_width").get<std::size_t>();
            c.text_layers = j.at("text_layers").get<std::size_t>();
            c.text_heads = j.at("text_heads").get<std::size_t>();
            c.context_length = j.at("context_length").get<std::size_t>();
            c.vocab_size = j.at("vocab_size").get<std::size_t>();
            if (j.contains("vv_start_layer")) c.vv_start_layer = j.at("vv_start_layer").get<long long>();
            if (j.contains("vv_mode")) c.vv_mode = parse_vv_mode(j.at("vv_mode").get<std::string>());
            if (j.contains("gelu")) c.gelu = parse_gelu(j.at("gelu").get<std::string>());
            if (j.contains("tau")) c.tau = j.at("tau").get<float>();
            if (j.contains("mean")) c.mean = j.at("mean").get<std::array<float, 3>>();
            if (j.contains("stddev")) c.stddev = j.at("stddev").get<std::array<float, 3>>();
        } catch (const nlohmann::json::exception& e) {
            throw_config("bad model config json: ", e.what());
        }
        c.validate();
        return c;
    }

    // Small geometry for unit tests: 2x2 patch grid, two layers per tower.
    static ModelConfig tiny() {
        ModelConfig c;
        c.image_size = 32;
        c.patch_size = 16;
        c.vision_width = 16;
        c.vision_layers = 2;
        c.vision_heads = 2;
        c.embed_dim = 8;
        c.text_width = 16;
        c.text_layers = 2;
        c.text_heads = 2;
        c.context_length = 16;
        c.vocab_size = 520;
        return c;
    }
};

}  // namespace zeroloc
