#pragma once

#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"
#include "zeroloc/tensor.hpp"
#include "zeroloc/text_encoder.hpp"
#include "zeroloc/tokenizer.hpp"
#include "zeroloc/weights.hpp"

namespace zeroloc {

// Sentence skeletons with {domain}/{state}/{class} slots plus the word lists
// that fill them. N = |base| * |state_pairs| * |domains| prompt pairs.
struct PromptBank {
    std::vector<std::string> base_templates;
    std::vector<std::pair<std::string, std::string>> state_pairs;
    std::vector<std::string> domain_words;
    std::map<std::string, std::vector<std::pair<std::string, std::string>>> per_class_states;

    std::size_t pair_count(const std::string& class_name) const {
        return base_templates.size() * states_for(class_name).size() * domain_words.size();
    }

    std::vector<std::pair<std::string, std::string>> states_for(const std::string& class_name) const {
        std::vector<std::pair<std::string, std::string>> states = state_pairs;
        auto it = per_class_states.find(class_name);
        if (it != per_class_states.end()) {
            states.insert(states.end(), it->second.begin(), it->second.end());
        }
        return states;
    }

    void validate() const {
        if (base_templates.empty()) throw_config("prompt bank has no base templates");
        if (state_pairs.empty()) throw_config("prompt bank has no state pairs");
        if (domain_words.empty()) throw_config("prompt bank has no domain words");
        for (const std::string& t : base_templates) {
            for (const char* slot : {"{domain}", "{state}", "{class}"}) {
                std::size_t first = t.find(slot);
                if (first == std::string::npos) {
                    throw_config("template \"", t, "\" is missing the ", slot, " slot");
                }
                if (t.find(slot, first + 1) != std::string::npos) {
                    throw_config("template \"", t, "\" repeats the ", slot, " slot");
                }
            }
        }
    }

    static PromptBank from_json(const nlohmann::json& j) {
        PromptBank bank;
        try {
            bank.base_templates = j.at("base_templates").get<std::vector<std::string>>();
            bank.state_pairs =
                j.at("state_pairs").get<std::vector<std::pair<std::string, std::string>>>();
            bank.domain_words = j.at("domain_words").get<std::vector<std::string>>();
            if (j.contains("per_class_states")) {
                bank.per_class_states =
                    j.at("per_class_states")
                        .get<std::map<std::string, std::vector<std::pair<std::string, std::string>>>>();
            }
        } catch (const nlohmann::json::exception& e) {
            throw_config("bad prompt bank json: ", e.what());
        }
        bank.validate();
        return bank;
    }

    static PromptBank load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw_io("cannot open '", path, "' for reading");
        nlohmann::json j;
        try {
            f >> j;
        } catch (const nlohmann::json::exception& e) {
            throw_config("'", path, "': not valid json: ", e.what());
        }
        return from_json(j);
    }
};

struct PromptPair {
    std::string normal;
    std::string abnormal;
};

// Full cross-product in fixed order: template-major, then state pair, then
// domain word. The two strings of a pair differ only in the state word.
inline std::vector<PromptPair> expand_prompts(const PromptBank& bank, const std::string& class_name) {
    bank.validate();
    auto fill = [](std::string t, const char* slot, const std::string& word) {
        const std::size_t at = t.find(slot);
        t.replace(at, std::char_traits<char>::length(slot), word);
        return t;
    };
    const auto states = bank.states_for(class_name);
    std::vector<PromptPair> out;
    out.reserve(bank.base_templates.size() * states.size() * bank.domain_words.size());
    for (const std::string& base : bank.base_templates) {
        const std::string with_class = fill(base, "{class}", class_name);
        for (const auto& [normal_word, abnormal_word] : states) {
            for (const std::string& domain : bank.domain_words) {
                const std::string domained = fill(with_class, "{domain}", domain);
                out.push_back(PromptPair{fill(domained, "{state}", normal_word),
                                         fill(domained, "{state}", abnormal_word)});
            }
        }
    }
    return out;
}

// t_plus/t_minus are the unit-normalized means of the two halves of T;
// rows 0..N-1 of T are normal prompts, rows N..2N-1 abnormal.
struct TextTokenPair {
    Tensor t_plus;   // [C]
    Tensor t_minus;  // [C]
    Tensor matrix;   // [2N, C]

    std::size_t pair_count() const { return matrix.rows() / 2; }
    std::size_t dim() const { return matrix.cols(); }
};

inline TextTokenPair average_tokens(const Tensor& embeddings) {
    const std::size_t rows = embeddings.rows(), c = embeddings.cols();
    if (rows == 0 || rows % 2 != 0) {
        throw_shape("average_tokens: expected a nonempty 2NxC matrix, got ",
                    Tensor::shape_str(embeddings.shape));
    }
    const std::size_t n = rows / 2;
    auto half_mean = [&](std::size_t first) {
        Tensor mean = Tensor::zeros({1, c});
        std::vector<double> acc(c, 0.0);
        for (std::size_t i = first; i < first + n; ++i) {
            for (std::size_t j = 0; j < c; ++j) acc[j] += embeddings.data[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) mean.data[j] = static_cast<float>(acc[j] / n);
        double norm = 0.0;
        for (std::size_t j = 0; j < c; ++j) norm += static_cast<double>(mean.data[j]) * mean.data[j];
        if (std::sqrt(norm) < 1e-12) {
            throw_input("average_tokens: degenerate prompt mean (norm < 1e-12); prompts cancel out");
        }
        Tensor unit = l2_normalize_rows(mean);
        unit.shape = {c};
        return unit;
    };
    TextTokenPair pair;
    pair.t_plus = half_mean(0);
    pair.t_minus = half_mean(n);
    pair.matrix = embeddings;
    return pair;
}

// expand -> tokenize -> encode -> average. Normal embeddings occupy the
// first half of the matrix in expansion order, abnormal the second.
inline TextTokenPair build_token_pair(const PromptBank& bank, const std::string& class_name,
                                      const TokenizerSpec& spec, const Archive& store,
                                      const ModelConfig& cfg) {
    const std::vector<PromptPair> prompts = expand_prompts(bank, class_name);
    const std::size_t n = prompts.size(), c = cfg.embed_dim;
    Tensor matrix = Tensor::zeros({2 * n, c});
    for (std::size_t i = 0; i < n; ++i) {
        const Tensor tp = encode_text_string(prompts[i].normal, spec, store, cfg);
        const Tensor tm = encode_text_string(prompts[i].abnormal, spec, store, cfg);
        for (std::size_t j = 0; j < c; ++j) {
            matrix.data[i * c + j] = tp.data[j];
            matrix.data[(n + i) * c + j] = tm.data[j];
        }
    }
    return average_tokens(matrix);
}

}  // namespace zeroloc
