#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "zeroloc/errors.hpp"

namespace zeroloc {

struct TokenizedPrompt {
    std::vector<std::int32_t> ids;  // length == context_length
    std::size_t eot_index = 0;
};

namespace detail {

// GPT-2 byte <-> unicode table: printable latin-1 bytes map to themselves,
// the rest are relocated to 256+n so every byte is a visible codepoint.
inline const std::array<std::uint32_t, 256>& byte_to_codepoint() {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        std::array<bool, 256> direct{};
        auto mark = [&](int lo, int hi) {
            for (int b = lo; b <= hi; ++b) direct[static_cast<std::size_t>(b)] = true;
        };
        mark(33, 126);
        mark(161, 172);
        mark(174, 255);
        std::uint32_t next = 256;
        for (int b = 0; b < 256; ++b) {
            t[static_cast<std::size_t>(b)] = direct[static_cast<std::size_t>(b)]
                                                 ? static_cast<std::uint32_t>(b)
                                                 : next++;
        }
        return t;
    }();
    return table;
}

inline void append_utf8(std::string& out, std::uint32_t cp) {
    if (cp < 0x80) {
        out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
        out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    } else {
        out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
        out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
        out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
    }
}

inline std::string byte_symbol(unsigned char b) {
    std::string s;
    append_utf8(s, byte_to_codepoint()[b]);
    return s;
}

inline bool ascii_space(unsigned char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
inline bool ascii_letter(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
inline bool ascii_digit(unsigned char c) { return c >= '0' && c <= '9'; }

}  // namespace detail

// Vocabulary plus ordered merge rules. The loader enforces the structural
// facts tokenize() relies on, so encoding is total over arbitrary bytes:
// every single-byte symbol (with and without the word-final marker) has an
// id, and every merge produces a symbol that has an id.
struct TokenizerSpec {
    std::map<std::string, std::int32_t> vocab;
    std::map<std::pair<std::string, std::string>, std::size_t> merge_rank;
    std::int32_t sot_id = 0;
    std::int32_t eot_id = 0;
    std::int32_t pad_id = 0;
    std::size_t context_length = 77;
    std::size_t vocab_size = 0;

    static constexpr const char* kSot = "<|startoftext|>";
    static constexpr const char* kEot = "<|endoftext|>";

    static TokenizerSpec from_text(const std::string& vocab_text, const std::string& merges_text,
                                   std::size_t context_length) {
        TokenizerSpec spec;
        spec.context_length = context_length;

        std::vector<bool> seen;
        std::size_t line_no = 0;
        std::size_t start = 0;
        while (start <= vocab_text.size()) {
            std::size_t end = vocab_text.find('\n', start);
            if (end == std::string::npos) end = vocab_text.size();
            std::string line = vocab_text.substr(start, end - start);
            start = end + 1;
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) {
                if (start > vocab_text.size()) break;
                continue;
            }
            const std::size_t sp = line.rfind(' ');
            if (sp == std::string::npos || sp == 0 || sp + 1 == line.size()) {
                throw_input("vocab line ", line_no, ": expected 'token id'");
            }
            const std::string token = line.substr(0, sp);
            std::int64_t id = 0;
            for (std::size_t i = sp + 1; i < line.size(); ++i) {
                const char c = line[i];
                if (c < '0' || c > '9') throw_input("vocab line ", line_no, ": bad id");
                id = id * 10 + (c - '0');
                if (id > 100'000'000) throw_input("vocab line ", line_no, ": id out of range");
            }
            if (!spec.vocab.emplace(token, static_cast<std::int32_t>(id)).second) {
                throw_input("vocab line ", line_no, ": duplicate token");
            }
            if (static_cast<std::size_t>(id) >= seen.size()) seen.resize(static_cast<std::size_t>(id) + 1);
            if (seen[static_cast<std::size_t>(id)]) throw_input("vocab line ", line_no, ": duplicate id ", id);
            seen[static_cast<std::size_t>(id)] = true;
        }
        if (spec.vocab.empty()) throw_input("vocab file is empty");
        for (std::size_t i = 0; i < seen.size(); ++i) {
            if (!seen[i]) throw_input("vocab ids are not dense: id ", i, " missing");
        }
        spec.vocab_size = seen.size();

        for (int b = 0; b < 256; ++b) {
            const std::string sym = detail::byte_symbol(static_cast<unsigned char>(b));
            if (!spec.vocab.count(sym) || !spec.vocab.count(sym + "</w>")) {
                throw_input("vocab is missing byte-level symbol for byte ", b);
            }
        }
        auto special = [&](const char* name) {
            auto it = spec.vocab.find(name);
            if (it == spec.vocab.end()) throw_input("vocab is missing special token ", name);
            return it->second;
        };
        spec.sot_id = special(kSot);
        spec.eot_id = special(kEot);
        spec.pad_id = 0;

        line_no = 0;
        start = 0;
        std::size_t rank = 0;
        while (start <= merges_text.size()) {
            std::size_t end = merges_text.find('\n', start);
            if (end == std::string::npos) end = merges_text.size();
            std::string line = merges_text.substr(start, end - start);
            start = end + 1;
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) {
                if (start > merges_text.size()) break;
                continue;
            }
            if (line[0] == '#') continue;
            const std::size_t sp = line.find(' ');
            if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
                line.find(' ', sp + 1) != std::string::npos) {
                throw_input("merges line ", line_no, ": expected 'sym1 sym2'");
            }
            const std::string a = line.substr(0, sp);
            const std::string b = line.substr(sp + 1);
            if (!spec.vocab.count(a) || !spec.vocab.count(b) || !spec.vocab.count(a + b)) {
                throw_input("merges line ", line_no, ": symbols or merged result not in vocab");
            }
            if (!spec.merge_rank.emplace(std::make_pair(a, b), rank).second) {
                throw_input("merges line ", line_no, ": duplicate merge rule");
            }
            ++rank;
        }
        return spec;
    }

    static TokenizerSpec load(const std::string& vocab_path, const std::string& merges_path,
                              std::size_t context_length) {
        auto slurp = [](const std::string& path) {
            std::ifstream f(path, std::ios::binary);
            if (!f) throw_io("cannot open '", path, "' for reading");
            std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
            if (f.bad()) throw_io("failed reading '", path, "'");
            return text;
        };
        return from_text(slurp(vocab_path), slurp(merges_path), context_length);
    }
};

namespace detail {

// Word splitter approximating the usual CLIP pattern for ASCII text:
// contractions, letter runs, single digits, punctuation runs. Bytes >= 0x80
// group with letters.
inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto letterish = [](unsigned char c) { return ascii_letter(c) || c >= 0x80; };
    while (i < n) {
        const unsigned char c = text[i];
        if (ascii_space(c)) {
            ++i;
            continue;
        }
        if (c == '\'' && i + 1 < n) {
            static const char* suffixes[] = {"re", "ve", "ll", "s", "t", "m", "d"};
            bool matched = false;
            for (const char* suf : suffixes) {
                const std::size_t len = std::char_traits<char>::length(suf);
                if (text.compare(i + 1, len, suf) == 0) {
                    words.push_back(text.substr(i, len + 1));
                    i += len + 1;
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        std::size_t start = i;
        if (letterish(c)) {
            while (i < n && letterish(static_cast<unsigned char>(text[i]))) ++i;
        } else if (ascii_digit(c)) {
            ++i;
        } else {
            while (i < n) {
                const unsigned char d = text[i];
                if (ascii_space(d) || letterish(d) || ascii_digit(d) || d == '\'') break;
                ++i;
            }
            if (i == start) ++i;  // lone apostrophe
        }
        words.push_back(text.substr(start, i - start));
    }
    return words;
}

inline std::vector<std::int32_t> bpe_word(const std::string& word, const TokenizerSpec& spec) {
    std::vector<std::string> syms;
    for (std::size_t i = 0; i < word.size(); ++i) {
        syms.push_back(byte_symbol(static_cast<unsigned char>(word[i])));
    }
    syms.back() += "</w>";

    while (syms.size() > 1) {
        std::size_t best_rank = static_cast<std::size_t>(-1);
        std::size_t best_pos = 0;
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = spec.merge_rank.find(std::make_pair(syms[i], syms[i + 1]));
            if (it != spec.merge_rank.end() && it->second < best_rank) {
                best_rank = it->second;
                best_pos = i;
            }
        }
        if (best_rank == static_cast<std::size_t>(-1)) break;
        // merge every occurrence of the winning pair, left to right
        const std::string a = syms[best_pos], b = syms[best_pos + 1];
        std::vector<std::string> merged;
        merged.reserve(syms.size());
        for (std::size_t i = 0; i < syms.size();) {
            if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
                merged.push_back(a + b);
                i += 2;
            } else {
                merged.push_back(syms[i]);
                ++i;
            }
        }
        syms = std::move(merged);
    }

    std::vector<std::int32_t> ids;
    ids.reserve(syms.size());
    for (const std::string& s : syms) ids.push_back(spec.vocab.at(s));
    return ids;
}

}  // namespace detail

// Lowercase (ASCII), split to words, byte-level BPE per word, then
// [sot] body [eot] padded with pad_id to context_length. The body is
// truncated so the end token is always present.
inline TokenizedPrompt tokenize(const std::string& text, const TokenizerSpec& spec) {
    std::string lowered = text;
    for (char& c : lowered) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }

    std::vector<std::int32_t> body;
    for (const std::string& w : detail::split_words(lowered)) {
        const std::vector<std::int32_t> ids = detail::bpe_word(w, spec);
        body.insert(body.end(), ids.begin(), ids.end());
    }
    if (body.size() > spec.context_length - 2) body.resize(spec.context_length - 2);

    TokenizedPrompt out;
    out.ids.assign(spec.context_length, spec.pad_id);
    out.ids[0] = spec.sot_id;
    for (std::size_t i = 0; i < body.size(); ++i) out.ids[i + 1] = body[i];
    out.eot_index = body.size() + 1;
    out.ids[out.eot_index] = spec.eot_id;
    return out;
}

// Toy tokenizer for synthetic models: the 512 byte-level symbols, the two
// specials, and six merges that build "photo", "of", and a "th" stem.
inline std::string toy_vocab_text() {
    std::string out;
    std::int32_t id = 0;
    for (int b = 0; b < 256; ++b) {
        out += detail::byte_symbol(static_cast<unsigned char>(b));
        out += " " + std::to_string(id++) + "\n";
    }
    for (int b = 0; b < 256; ++b) {
        out += detail::byte_symbol(static_cast<unsigned char>(b));
        out += "</w> " + std::to_string(id++) + "\n";
    }
    out += std::string(TokenizerSpec::kSot) + " " + std::to_string(id++) + "\n";
    out += std::string(TokenizerSpec::kEot) + " " + std::to_string(id++) + "\n";
    for (const char* merged : {"ph", "pho", "to</w>", "photo</w>", "of</w>", "th"}) {
        out += std::string(merged) + " " + std::to_string(id++) + "\n";
    }
    return out;
}

inline std::string toy_merges_text() {
    return "p h\n"
           "ph o\n"
           "t o</w>\n"
           "pho to</w>\n"
           "o f</w>\n"
           "t h\n";
}

inline TokenizerSpec toy_tokenizer(std::size_t context_length) {
    return TokenizerSpec::from_text(toy_vocab_text(), toy_merges_text(), context_length);
}

}  // namespace zeroloc
