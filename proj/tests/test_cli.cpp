#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include <json.hpp>

#include "helpers.hpp"
#include "zeroloc/image.hpp"
#include "zeroloc/pipeline.hpp"

using namespace zeroloc;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

std::string slurp_text(const std::string& path) {
    const std::vector<unsigned char> bytes = zt::slurp(path);
    return std::string(bytes.begin(), bytes.end());
}

std::string ppm_bytes(const ImageU8& img) {
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
    return out;
}

std::string pgm_bytes(const std::vector<unsigned char>& gray, std::size_t h, std::size_t w) {
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(gray.data()), gray.size());
    return out;
}

// Shared fixture: tiny model + toy tokenizer + singleton bank + tokens + a
// query image + a four-image manifest, all built once through the CLI itself.
struct Fixture {
    zt::TempDir dir;
    std::string model, vocab, merges, bank, tokens, image, manifest;
    int synth_code = -1;
    int prompts_code = -1;

    std::string file(const std::string& name) const { return dir.file(name); }

    Fixture() {
        model = file("model.zla");
        vocab = file("vocab.txt");
        merges = file("merges.txt");
        bank = file("bank.json");
        tokens = file("tokens.zla");
        image = file("query.ppm");
        manifest = file("manifest.tsv");

        synth_code = raw_run("synth --tiny --seed 7 --out " + model + " --vocab-out " + vocab +
                             " --merges-out " + merges)
                         .code;
        // short words: the byte-level toy tokenizer must fit every slot into
        // the tiny model's 16-token context, state word included
        zt::spit(bank,
                 "{\n"
                 "  \"base_templates\": [\"{domain} {state} {class}\"],\n"
                 "  \"state_pairs\": [[\"ok\", \"bad\"]],\n"
                 "  \"domain_words\": [\"lab\"]\n"
                 "}\n");
        prompts_code = raw_run("prompts --model " + model + " --vocab " + vocab + " --merges " +
                               merges + " --prompts-file " + bank + " --class widget --out " + tokens)
                           .code;

        ImageU8 img;
        img.height = 20;
        img.width = 24;
        img.rgb.assign(img.height * img.width * 3, 90);
        for (std::size_t y = 3; y < 10; ++y) {
            for (std::size_t x = 3; x < 12; ++x) {
                img.rgb[(y * img.width + x) * 3 + 0] = 240;
                img.rgb[(y * img.width + x) * 3 + 2] = 210;
            }
        }
        zt::spit(image, ppm_bytes(img));

        for (int i = 0; i < 2; ++i) {
            ImageU8 flat;
            flat.height = 16;
            flat.width = 16;
            flat.rgb.assign(16 * 16 * 3, static_cast<unsigned char>(100 + 12 * i));
            zt::spit(file("normal" + std::to_string(i) + ".ppm"), ppm_bytes(flat));

            ImageU8 anom = flat;
            std::vector<unsigned char> gray(16 * 16, 0);
            for (std::size_t y = 2; y < 8; ++y) {
                for (std::size_t x = 2; x < 8; ++x) {
                    anom.rgb[(y * 16 + x) * 3 + 0] = 250;
                    anom.rgb[(y * 16 + x) * 3 + 1] = 20;
                    gray[y * 16 + x] = 255;
                }
            }
            zt::spit(file("anom" + std::to_string(i) + ".ppm"), ppm_bytes(anom));
            zt::spit(file("anom" + std::to_string(i) + ".pgm"), pgm_bytes(gray, 16, 16));
        }
        zt::spit(manifest,
                 "normal0.ppm\t-\twidget\t0\n"
                 "normal1.ppm\t-\twidget\t0\n"
                 "anom0.ppm\tanom0.pgm\twidget\t1\n"
                 "anom1.ppm\tanom1.pgm\twidget\t1\n");
    }

    Run raw_run(const std::string& args) {
        static int counter = 0;
        const std::string tag = std::to_string(counter++);
        const std::string out_path = file("stdout_" + tag);
        const std::string err_path = file("stderr_" + tag);
        const std::string cmd =
            std::string(ZEROLOC_CLI_PATH) + " " + args + " >" + out_path + " 2>" + err_path;
        Run r;
        const int status = std::system(cmd.c_str());
        if (status != -1 && WIFEXITED(status)) r.code = WEXITSTATUS(status);
        r.out = slurp_text(out_path);
        r.err = slurp_text(err_path);
        return r;
    }
};

Fixture& fx() {
    static Fixture f;
    return f;
}

Run cli(const std::string& args) { return fx().raw_run(args); }

}  // namespace

TEST_CASE("cli synth and prompts build usable archives", "[cli]") {
    REQUIRE(fx().synth_code == 0);
    REQUIRE(fx().prompts_code == 0);

    const Model model = load_model(fx().model);
    CHECK(model.cfg.image_size == 32);
    CHECK(model.cfg.embed_dim == 8);

    std::string cls;
    const TextTokenPair pair = load_tokens(fx().tokens, &cls);
    CHECK(cls == "widget");
    CHECK(pair.matrix.shape == std::vector<std::size_t>{2, 8});
    double nrm = 0.0;
    for (float v : pair.t_plus.data) nrm += static_cast<double>(v) * v;
    CHECK(std::sqrt(nrm) == Catch::Approx(1.0).margin(1e-5));
}

TEST_CASE("cli localize scores an image and renders maps", "[cli]") {
    const std::string map_pgm = fx().file("map.pgm");
    const std::string map_raw = fx().file("map.raw");
    const Run r = cli("localize --model " + fx().model + " --tokens " + fx().tokens + " --image " +
                      fx().image + " --out " + map_pgm + " --out-raw " + map_raw);
    REQUIRE(r.code == 0);

    const double s_ad = std::stod(r.out);
    CHECK(s_ad > 0.0);
    CHECK(s_ad < 1.0);

    const AnomalyMap m = load_map_raw(map_raw);
    CHECK(m.height == 20);
    CHECK(m.width == 24);
    for (float v : m.values) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    const std::string pgm = slurp_text(map_pgm);
    CHECK(pgm.rfind("P5\n24 20\n65535\n", 0) == 0);
    CHECK(pgm.size() == std::string("P5\n24 20\n65535\n").size() + 20 * 24 * 2);
}

TEST_CASE("cli localize is byte-deterministic", "[cli]") {
    const std::string a = fx().file("det_a.raw");
    const std::string b = fx().file("det_b.raw");
    const std::string base = "localize --model " + fx().model + " --tokens " + fx().tokens +
                             " --image " + fx().image + " --out-raw ";
    const Run ra = cli(base + a);
    const Run rb = cli(base + b);
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(ra.out == rb.out);
    CHECK(zt::slurp(a) == zt::slurp(b));
}

TEST_CASE("cli encode modes agree on the score and disagree on the map", "[cli]") {
    const std::string a = fx().file("mode_qkv.raw");
    const std::string b = fx().file("mode_multi.raw");
    const std::string base = "localize --model " + fx().model + " --tokens " + fx().tokens +
                             " --image " + fx().image + " --tau 5";
    const Run ra = cli(base + " --mode qkv --out-raw " + a);
    const Run rb = cli(base + " --mode vv_multi --out-raw " + b);
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(ra.out == rb.out);  // v is shared across modes, so s_ad matches
    CHECK(zt::slurp(a) != zt::slurp(b));
}

TEST_CASE("cli tta adapts the map and logs a trace", "[cli]") {
    const std::string plain = fx().file("tta_off.raw");
    const std::string on_a = fx().file("tta_on_a.raw");
    const std::string on_b = fx().file("tta_on_b.raw");
    const std::string trace = fx().file("tta_trace.csv");
    const std::string base = "localize --model " + fx().model + " --tokens " + fx().tokens +
                             " --image " + fx().image + " --tau 5";
    REQUIRE(cli(base + " --out-raw " + plain).code == 0);
    REQUIRE(cli(base + " --tta --epochs 2 --seed 3 --trace " + trace + " --out-raw " + on_a).code == 0);
    REQUIRE(cli(base + " --tta --epochs 2 --seed 3 --out-raw " + on_b).code == 0);

    CHECK(zt::slurp(on_a) == zt::slurp(on_b));
    CHECK(zt::slurp(on_a) != zt::slurp(plain));

    const std::string csv = slurp_text(trace);
    CHECK(csv.rfind("epoch,loss_d,loss_p,loss_total\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(csv.find("\n0,") != std::string::npos);
    CHECK(csv.find("\n1,") != std::string::npos);
}

TEST_CASE("cli eval writes the json and csv reports", "[cli]") {
    const std::string out = fx().file("report.json");
    const std::string base = "eval --model " + fx().model + " --tokens " + fx().tokens +
                             " --manifest " + fx().manifest + " --out " + out;
    const Run r = cli(base);
    REQUIRE(r.code == 0);

    const nlohmann::json j = nlohmann::json::parse(slurp_text(out));
    CHECK(j.at("images").at("total") == 4);
    CHECK(j.at("images").at("failed") == 0);
    REQUIRE(j.at("classes").contains("widget"));
    for (const char* key : {"pixel_auroc", "pixel_f1max", "pixel_aupr", "pixel_pro", "image_auroc"}) {
        CHECK(j.at("classes").at("widget").at(key).is_number());
    }

    const std::string csv = slurp_text(fx().file("report.csv"));
    CHECK(csv.rfind("class,pixel_auroc,", 0) == 0);
    CHECK(csv.find("\nwidget,") != std::string::npos);
    CHECK(csv.find("\nmean,") != std::string::npos);

    const std::string out2 = fx().file("report2.json");
    REQUIRE(cli("eval --model " + fx().model + " --tokens " + fx().tokens + " --manifest " +
                fx().manifest + " --out " + out2)
                .code == 0);
    CHECK(zt::slurp(out2) == zt::slurp(out));
}

TEST_CASE("cli eval narrows metrics and rejects unknown names", "[cli]") {
    const std::string out = fx().file("subset.json");
    const Run r = cli("eval --model " + fx().model + " --tokens " + fx().tokens + " --manifest " +
                      fx().manifest + " --metrics auroc --out " + out);
    REQUIRE(r.code == 0);
    const nlohmann::json j = nlohmann::json::parse(slurp_text(out));
    CHECK(j.at("classes").at("widget").contains("pixel_auroc"));
    CHECK_FALSE(j.at("classes").at("widget").contains("pixel_pro"));

    const Run bad = cli("eval --model " + fx().model + " --tokens " + fx().tokens + " --manifest " +
                        fx().manifest + " --metrics bogus --out " + fx().file("bogus.json"));
    CHECK(bad.code == 2);
}

TEST_CASE("cli eval runs per-class prompts straight from a bank", "[cli]") {
    const std::string out = fx().file("from_bank.json");
    const Run r = cli("eval --model " + fx().model + " --prompts-file " + fx().bank + " --vocab " +
                      fx().vocab + " --merges " + fx().merges + " --manifest " + fx().manifest +
                      " --metrics auroc --out " + out);
    REQUIRE(r.code == 0);
    const nlohmann::json j = nlohmann::json::parse(slurp_text(out));
    CHECK(j.at("images").at("failed") == 0);
    CHECK(j.at("classes").at("widget").at("image_auroc").is_number());

    // exactly one token source may be given
    CHECK(cli("eval --model " + fx().model + " --tokens " + fx().tokens + " --prompts-file " +
              fx().bank + " --vocab " + fx().vocab + " --merges " + fx().merges + " --manifest " +
              fx().manifest + " --out " + fx().file("both.json"))
              .code == 2);
}

TEST_CASE("cli bench reports timing stats as json", "[cli]") {
    const Run r = cli("bench --model " + fx().model + " --tokens " + fx().tokens + " --image " +
                      fx().image + " --iters 2");
    REQUIRE(r.code == 0);
    const nlohmann::json j = nlohmann::json::parse(r.out);
    CHECK(j.at("tfa").at("iters") == 2);
    CHECK(j.at("tfa").at("mode") == "tfa");
    CHECK(j.at("tfa").at("mean_ms").get<double>() > 0.0);
    CHECK_FALSE(j.contains("tta"));

    const Run rt = cli("bench --model " + fx().model + " --tokens " + fx().tokens + " --image " +
                       fx().image + " --iters 2 --tta --epochs 1");
    REQUIRE(rt.code == 0);
    const nlohmann::json jt = nlohmann::json::parse(rt.out);
    CHECK(jt.at("tta").at("mode") == "tta");
    CHECK(jt.at("tfa").at("mode") == "tfa");
}

TEST_CASE("cli exit codes distinguish usage, input, and config errors", "[cli]") {
    // missing required flag -> CLI parse error
    CHECK(cli("localize --tokens " + fx().tokens + " --image " + fx().image).code == 2);
    // unknown subcommand
    CHECK(cli("frobnicate").code == 2);
    // nonexistent model file -> io error
    CHECK(cli("localize --model " + fx().file("nope.zla") + " --tokens " + fx().tokens +
              " --image " + fx().image)
              .code == 1);
    // bad encode mode -> config error
    CHECK(cli("localize --model " + fx().model + " --tokens " + fx().tokens + " --image " +
              fx().image + " --mode sideways")
              .code == 2);
    // unreadable image -> input/io error
    zt::spit(fx().file("garbage.ppm"), "not an image");
    CHECK(cli("localize --model " + fx().model + " --tokens " + fx().tokens + " --image " +
              fx().file("garbage.ppm"))
              .code == 1);
}
