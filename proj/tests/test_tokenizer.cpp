#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "zeroloc/tokenizer.hpp"

using namespace zeroloc;

namespace {

// golden ids from tests/oracles/gen_bpe_golden.py (independent python BPE
// over the toy vocab/merges, context 16)
const std::vector<std::int32_t> kEmpty = {512, 513, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
const std::vector<std::int32_t> kCat = {512, 353, 517, 518, 353, 99, 97, 372, 513, 0, 0, 0, 0, 0, 0, 0};
const std::vector<std::int32_t> kPhoto = {512, 353, 517, 513, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0};
const std::vector<std::int32_t> kTheme = {512, 519, 357, 519, 101, 109, 357, 513, 0, 0, 0, 0, 0, 0, 0, 0};
const std::vector<std::int32_t> kPunct = {512, 105, 372, 39,  371, 307, 515, 116,
                                          111, 371, 300, 105, 115, 366, 39,  513};
const std::vector<std::int32_t> kUtf8 = {512, 110, 97, 195, 175, 118, 357, 99, 97, 102, 195, 425, 513, 0, 0, 0};
const std::vector<std::int32_t> kLong = {512, 353, 517, 518, 353, 517, 518, 353,
                                         517, 518, 353, 517, 518, 353, 517, 513};

}  // namespace

TEST_CASE("golden BPE ids from the reference tokenizer", "[tokenizer]") {
    const TokenizerSpec spec = toy_tokenizer(16);
    CHECK(tokenize("", spec).ids == kEmpty);
    CHECK(tokenize("a photo of a cat", spec).ids == kCat);
    CHECK(tokenize("a photo", spec).ids == kPhoto);
    CHECK(tokenize("the theme", spec).ids == kTheme);
    CHECK(tokenize("it's 3 photos, isn't it?", spec).ids == kPunct);
    CHECK(tokenize("na\xc3\xafve caf\xc3\xa9", spec).ids == kUtf8);
    CHECK(tokenize("a photo of a photo of a photo of a photo of a photo", spec).ids == kLong);
}

TEST_CASE("tokenize folds case and collapses whitespace", "[tokenizer]") {
    const TokenizerSpec spec = toy_tokenizer(16);
    CHECK(tokenize("A Photo", spec).ids == tokenize("a photo", spec).ids);
    CHECK(tokenize("  a \t photo\n", spec).ids == tokenize("a photo", spec).ids);
}

TEST_CASE("prompt structure invariants", "[tokenizer]") {
    const TokenizerSpec spec = toy_tokenizer(16);
    for (const char* text : {"", "a", "a photo of a cat", "a photo of a photo of a photo of a photo x"}) {
        const TokenizedPrompt p = tokenize(text, spec);
        REQUIRE(p.ids.size() == 16);
        CHECK(p.ids[0] == spec.sot_id);
        REQUIRE(p.eot_index < 16);
        CHECK(p.ids[p.eot_index] == spec.eot_id);
        for (std::size_t i = p.eot_index + 1; i < 16; ++i) CHECK(p.ids[i] == spec.pad_id);
    }
}

TEST_CASE("tokenizer is total on arbitrary bytes", "[tokenizer]") {
    const TokenizerSpec spec = toy_tokenizer(16);
    std::mt19937 gen(41);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int iter = 0; iter < 200; ++iter) {
        std::string s;
        const int len = iter % 23;
        for (int i = 0; i < len; ++i) s.push_back(static_cast<char>(byte(gen)));
        const TokenizedPrompt p = tokenize(s, spec);
        CHECK(p.ids.size() == 16);
        CHECK(p.ids[p.eot_index] == spec.eot_id);
        for (std::int32_t id : p.ids) {
            CHECK(id >= 0);
            CHECK(id < static_cast<std::int32_t>(spec.vocab_size));
        }
    }
}

TEST_CASE("tokenizer round-trips through vocab and merges files", "[tokenizer]") {
    zt::TempDir dir;
    zt::spit(dir.file("vocab.txt"), toy_vocab_text());
    zt::spit(dir.file("merges.txt"), toy_merges_text());
    const TokenizerSpec spec = TokenizerSpec::load(dir.file("vocab.txt"), dir.file("merges.txt"), 16);
    CHECK(tokenize("a photo of a cat", spec).ids == kCat);
}

TEST_CASE("vocab validation", "[tokenizer]") {
    // missing byte symbol
    {
        std::string vocab = toy_vocab_text();
        const std::size_t cut = vocab.find('\n');
        CHECK_THROWS_AS(TokenizerSpec::from_text(vocab.substr(cut + 1), toy_merges_text(), 16), Error);
    }
    // merge result absent from the vocab
    CHECK_THROWS_AS(TokenizerSpec::from_text(toy_vocab_text(), "q q\n", 16), Error);
    // duplicate token
    CHECK_THROWS_AS(TokenizerSpec::from_text(toy_vocab_text() + "ph 999\n", toy_merges_text(), 16), Error);
    // sparse ids
    CHECK_THROWS_AS(TokenizerSpec::from_text(toy_vocab_text() + "zz 900\n", toy_merges_text(), 16), Error);
    // specials present in the toy vocab
    const TokenizerSpec spec = toy_tokenizer(16);
    CHECK(spec.sot_id == 512);
    CHECK(spec.eot_id == 513);
    CHECK(spec.pad_id == 0);
    CHECK(spec.vocab_size == 520);
}

TEST_CASE("context length bounds the body", "[tokenizer]") {
    const TokenizerSpec spec = toy_tokenizer(5);
    const TokenizedPrompt p = tokenize("a photo of a cat and more words", spec);
    REQUIRE(p.ids.size() == 5);
    CHECK(p.ids[0] == spec.sot_id);
    CHECK(p.eot_index == 4);
    CHECK(p.ids[4] == spec.eot_id);
}
