#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"
#include "zeroloc/image.hpp"
#include "zeroloc/manifest.hpp"
#include "zeroloc/pipeline.hpp"
#include "zeroloc/prompts.hpp"
#include "zeroloc/tokenizer.hpp"
#include "zeroloc/tta.hpp"
#include "zeroloc/vision.hpp"
#include "zeroloc/weights.hpp"

namespace {

using namespace zeroloc;

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw_io("cannot open '", path, "' for reading");
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw_input("'", path, "': invalid json: ", e.what());
    }
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw_io("cannot open '", path, "' for writing");
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw_io("failed writing '", path, "'");
}

Model load_model_cli(const std::string& model_path, const std::string& config_path) {
    if (config_path.empty()) return load_model(model_path);
    const nlohmann::json j = read_json_file(config_path);
    return load_model(model_path, &j);
}

// tau <= 0 on the command line means "use the model's temperature"
double resolve_tau(double flag_tau, const ModelConfig& cfg) {
    return flag_tau > 0.0 ? flag_tau : static_cast<double>(cfg.tau);
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = s.find(',', start);
        const std::string item = s.substr(start, comma == std::string::npos ? comma : comma - start);
        if (!item.empty()) out.push_back(item);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

struct TtaFlags {
    bool enabled = false;
    std::size_t epochs = 5;
    double lr = 0.001;
    double sigma = 0.1;
    bool absolute = false;
    std::uint64_t seed = 0;

    void attach(CLI::App* cmd) {
        cmd->add_flag("--tta", enabled, "run test-time adaptation of the token adapter");
        cmd->add_option("--epochs", epochs, "TTA optimization epochs")->capture_default_str();
        cmd->add_option("--lr", lr, "TTA learning rate")->capture_default_str();
        cmd->add_option("--sigma", sigma,
                        "noise std for the corrupted branch; scales token RMS unless "
                        "--noise-absolute")
            ->capture_default_str();
        cmd->add_flag("--noise-absolute", absolute, "treat --sigma as an absolute std");
        cmd->add_option("--seed", seed, "base RNG seed for TTA noise")->capture_default_str();
    }

    TtaConfig to_config(double tau) const {
        TtaConfig cfg;
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.noise.sigma = sigma;
        cfg.noise.relative = !absolute;
        cfg.noise.seed = seed;
        cfg.tau = tau;
        return cfg;
    }
};

// Lazily builds one token pair per class from a prompt bank, or hands out a
// single preloaded archive for every class.
struct TokenProvider {
    std::map<std::string, TextTokenPair> cache;
    std::optional<TextTokenPair> fixed;
    const PromptBank* bank = nullptr;
    const TokenizerSpec* spec = nullptr;
    const Model* model = nullptr;

    const TextTokenPair& operator()(const std::string& class_name) {
        if (fixed.has_value()) return *fixed;
        auto it = cache.find(class_name);
        if (it == cache.end()) {
            it = cache.emplace(class_name,
                               build_token_pair(*bank, class_name, *spec, model->archive, model->cfg))
                     .first;
        }
        return it->second;
    }
};

int run(int argc, char** argv) {
    CLI::App app{"zeroloc: zero-shot anomaly detection and localization"};
    app.require_subcommand(1);
    int exit_override = 0;

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "write a synthetic model archive for testing");
    struct {
        std::string out, config, vocab_out, merges_out;
        std::uint64_t seed = 42;
        bool tiny = false;
    } sy;
    synth->add_option("--out", sy.out, "archive path to write")->required();
    synth->add_option("--seed", sy.seed, "PRNG seed")->capture_default_str();
    synth->add_option("--config", sy.config, "model config json (default: full-size defaults)");
    synth->add_flag("--tiny", sy.tiny, "use the tiny smoke-test config");
    synth->add_option("--vocab-out", sy.vocab_out, "also write the toy vocab file here");
    synth->add_option("--merges-out", sy.merges_out, "also write the toy merges file here");
    synth->callback([&] {
        ModelConfig cfg;
        if (!sy.config.empty()) {
            cfg = ModelConfig::from_json(read_json_file(sy.config));
        } else if (sy.tiny) {
            cfg = ModelConfig::tiny();
        }
        save_archive(sy.out, make_synthetic_model(cfg, sy.seed));
        if (!sy.vocab_out.empty()) write_text_file(sy.vocab_out, toy_vocab_text());
        if (!sy.merges_out.empty()) write_text_file(sy.merges_out, toy_merges_text());
    });

    // ---- prompts ----
    auto* prompts = app.add_subcommand("prompts", "encode a prompt bank into a token archive");
    struct {
        std::string model, config, vocab, merges, prompts_file, class_name, out;
    } pr;
    prompts->add_option("--model", pr.model, "model archive")->required();
    prompts->add_option("--config", pr.config, "model config json override");
    prompts->add_option("--vocab", pr.vocab, "tokenizer vocab file")->required();
    prompts->add_option("--merges", pr.merges, "tokenizer merges file")->required();
    prompts->add_option("--prompts-file", pr.prompts_file, "prompt bank json")->required();
    prompts->add_option("--class", pr.class_name, "object class name")->required();
    prompts->add_option("--out", pr.out, "token archive to write")->required();
    prompts->callback([&] {
        const Model model = load_model_cli(pr.model, pr.config);
        const TokenizerSpec spec = TokenizerSpec::load(pr.vocab, pr.merges, model.cfg.context_length);
        const PromptBank bank = PromptBank::load(pr.prompts_file);
        const TextTokenPair pair = build_token_pair(bank, pr.class_name, spec, model.archive, model.cfg);
        save_tokens(pr.out, pair, pr.class_name);
    });

    // ---- localize ----
    auto* localize = app.add_subcommand("localize", "score one image and render its anomaly map");
    struct {
        std::string model, config, tokens, image, mode = "vv_multi";
        std::string out, out_raw, trace;
        double tau = -1.0, smooth = 0.0;
        TtaFlags tta;
    } lo;
    localize->add_option("--model", lo.model, "model archive")->required();
    localize->add_option("--config", lo.config, "model config json override");
    localize->add_option("--tokens", lo.tokens, "token archive from `prompts`")->required();
    localize->add_option("--image", lo.image, "query image (png/pnm)")->required();
    localize->add_option("--mode", lo.mode, "encode mode: qkv|v_last|vv_last|vv_multi")
        ->capture_default_str();
    localize->add_option("--tau", lo.tau, "logit temperature (default: model config)");
    localize->add_option("--smooth", lo.smooth, "gaussian sigma for map smoothing, 0 = off")
        ->capture_default_str();
    localize->add_option("--out", lo.out, "write the map as 16-bit PGM here");
    localize->add_option("--out-raw", lo.out_raw, "write the map in raw f32 format here");
    localize->add_option("--trace", lo.trace, "write the TTA loss trace CSV here");
    lo.tta.attach(localize);
    localize->callback([&] {
        const Model model = load_model_cli(lo.model, lo.config);
        const TextTokenPair pair = load_tokens(lo.tokens);
        const ImageU8 raw = load_image(lo.image);

        LocalizeOptions opts;
        opts.mode = parse_encode_mode(lo.mode);
        opts.tau = resolve_tau(lo.tau, model.cfg);
        opts.smooth_sigma = lo.smooth;
        opts.tta = lo.tta.enabled;
        opts.tta_cfg = lo.tta.to_config(opts.tau);

        const LocalizeResult res = localize_image(model, pair, raw, opts);
        if (!lo.out.empty()) render_map_pgm(res.map, lo.out);
        if (!lo.out_raw.empty()) render_map_raw(res.map, lo.out_raw);
        if (!lo.trace.empty()) write_text_file(lo.trace, trace_to_csv(res.trace));
        std::printf("%.9f\n", res.s_ad);
    });

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "evaluate a dataset manifest");
    struct {
        std::string model, config, tokens, prompts_file, vocab, merges, manifest;
        std::string mode = "vv_multi", metrics, out;
        double tau = -1.0, smooth = 0.0, fpr_limit = 0.3;
        TtaFlags tta;
    } ev;
    eval->add_option("--model", ev.model, "model archive")->required();
    eval->add_option("--config", ev.config, "model config json override");
    eval->add_option("--tokens", ev.tokens, "token archive used for every class");
    eval->add_option("--prompts-file", ev.prompts_file,
                     "prompt bank json; builds tokens per class (needs --vocab/--merges)");
    eval->add_option("--vocab", ev.vocab, "tokenizer vocab file");
    eval->add_option("--merges", ev.merges, "tokenizer merges file");
    eval->add_option("--manifest", ev.manifest, "tab-separated dataset manifest")->required();
    eval->add_option("--mode", ev.mode, "encode mode")->capture_default_str();
    eval->add_option("--metrics", ev.metrics, "comma subset of auroc,f1max,aupr,pro (default all)");
    eval->add_option("--tau", ev.tau, "logit temperature (default: model config)");
    eval->add_option("--smooth", ev.smooth, "gaussian sigma for map smoothing")->capture_default_str();
    eval->add_option("--fpr-limit", ev.fpr_limit, "PRO false-positive-rate cap")->capture_default_str();
    eval->add_option("--out", ev.out, "report path; writes <out> json and sibling .csv")->required();
    ev.tta.attach(eval);
    eval->callback([&] {
        if (ev.tokens.empty() == ev.prompts_file.empty()) {
            throw_config("eval: pass exactly one of --tokens or --prompts-file");
        }
        if (!ev.prompts_file.empty() && (ev.vocab.empty() || ev.merges.empty())) {
            throw_config("eval: --prompts-file needs --vocab and --merges");
        }
        const Model model = load_model_cli(ev.model, ev.config);
        const std::vector<ManifestEntry> entries = parse_manifest(ev.manifest);

        TokenProvider provider;
        PromptBank bank;
        TokenizerSpec spec;
        provider.model = &model;
        if (!ev.tokens.empty()) {
            provider.fixed = load_tokens(ev.tokens);
        } else {
            bank = PromptBank::load(ev.prompts_file);
            spec = TokenizerSpec::load(ev.vocab, ev.merges, model.cfg.context_length);
            provider.bank = &bank;
            provider.spec = &spec;
        }

        EvalOptions opts;
        opts.loc.mode = parse_encode_mode(ev.mode);
        opts.loc.tau = resolve_tau(ev.tau, model.cfg);
        opts.loc.smooth_sigma = ev.smooth;
        opts.loc.tta = ev.tta.enabled;
        opts.loc.tta_cfg = ev.tta.to_config(opts.loc.tau);
        opts.base_seed = ev.tta.seed;
        opts.fpr_limit = ev.fpr_limit;
        opts.metrics = split_csv(ev.metrics);
        for (const std::string& m : opts.metrics) {
            bool known = false;
            for (const std::string& k : all_metric_names()) known |= k == m;
            if (!known) throw_config("eval: unknown metric '", m, "'");
        }

        const EvalReport report = evaluate_manifest(
            model, entries, [&](const std::string& cls) -> const TextTokenPair& { return provider(cls); },
            opts);
        for (const std::string& w : report.warnings) std::cerr << "warning: " << w << "\n";

        write_text_file(ev.out, report_to_json(report).dump(2) + "\n");
        std::string csv_path = ev.out;
        const std::string suffix = ".json";
        if (csv_path.size() >= suffix.size() &&
            csv_path.compare(csv_path.size() - suffix.size(), suffix.size(), suffix) == 0) {
            csv_path.resize(csv_path.size() - suffix.size());
        }
        write_text_file(csv_path + ".csv", report_to_csv(report));

        if (report.images_failed * 100 > report.images_total) {
            std::cerr << "error: " << report.images_failed << " of " << report.images_total
                      << " images failed\n";
            exit_override = 1;
        }
    });

    // ---- ablate ----
    auto* ablate = app.add_subcommand("ablate", "compare encode modes, vv start layers, prompt tiers");
    struct {
        std::string model, config, tokens, manifest, vocab, merges;
        std::string modes = "qkv,v_last,vv_last,vv_multi", sweep, tiers, out;
        double tau = -1.0, smooth = 0.0;
    } ab;
    ablate->add_option("--model", ab.model, "model archive")->required();
    ablate->add_option("--config", ab.config, "model config json override");
    ablate->add_option("--tokens", ab.tokens, "token archive (mode and vv-start rows)");
    ablate->add_option("--manifest", ab.manifest, "dataset manifest")->required();
    auto* modes_opt = ablate->add_option("--modes", ab.modes, "encode modes to compare")
                          ->capture_default_str();
    ablate->add_option("--vv-start-sweep", ab.sweep, "comma list of vv start layers (mode vv_multi)");
    ablate->add_option("--tiers", ab.tiers, "comma list of prompt bank jsons, one row each");
    ablate->add_option("--vocab", ab.vocab, "tokenizer vocab file (tier rows)");
    ablate->add_option("--merges", ab.merges, "tokenizer merges file (tier rows)");
    ablate->add_option("--tau", ab.tau, "logit temperature (default: model config)");
    ablate->add_option("--smooth", ab.smooth, "gaussian sigma for map smoothing")->capture_default_str();
    ablate->add_option("--out", ab.out, "also write the rows as json here");
    ablate->callback([&] {
        Model model = load_model_cli(ab.model, ab.config);
        const std::vector<ManifestEntry> entries = parse_manifest(ab.manifest);
        const bool tier_only = !ab.tiers.empty() && modes_opt->count() == 0;

        EvalOptions opts;
        opts.loc.tau = resolve_tau(ab.tau, model.cfg);
        opts.loc.smooth_sigma = ab.smooth;
        opts.metrics = {"auroc", "f1max", "pro"};

        std::optional<TextTokenPair> fixed;
        if (!ab.tokens.empty()) fixed = load_tokens(ab.tokens);
        auto fixed_provider = [&](const std::string&) -> const TextTokenPair& {
            if (!fixed.has_value()) throw_config("ablate: --tokens is required for this row");
            return *fixed;
        };

        struct Row {
            std::string name;
            ClassResult mean;
        };
        std::vector<Row> rows;

        auto run_row = [&](const std::string& name,
                           const std::function<const TextTokenPair&(const std::string&)>& tokens) {
            const EvalReport rep = evaluate_manifest(model, entries, tokens, opts);
            for (const std::string& w : rep.warnings) std::cerr << "warning: " << w << "\n";
            rows.push_back(Row{name, rep.mean});
        };

        if (!tier_only) {
            for (const std::string& m : split_csv(ab.modes)) {
                opts.loc.mode = parse_encode_mode(m);
                run_row(m, fixed_provider);
            }
        }
        if (!ab.sweep.empty()) {
            const int saved = model.cfg.vv_start_layer;
            opts.loc.mode = EncodeMode::VvMulti;
            for (const std::string& tok : split_csv(ab.sweep)) {
                std::size_t pos = 0;
                int layer = 0;
                try {
                    layer = std::stoi(tok, &pos);
                } catch (const std::exception&) {
                    pos = 0;
                }
                if (pos != tok.size()) throw_config("ablate: bad vv start layer '", tok, "'");
                model.cfg.vv_start_layer = layer;
                model.cfg.validate();
                run_row(concat("vv_start=", layer), fixed_provider);
            }
            model.cfg.vv_start_layer = saved;
        }
        if (!ab.tiers.empty()) {
            if (ab.vocab.empty() || ab.merges.empty()) {
                throw_config("ablate: --tiers needs --vocab and --merges");
            }
            const TokenizerSpec spec =
                TokenizerSpec::load(ab.vocab, ab.merges, model.cfg.context_length);
            opts.loc.mode = EncodeMode::VvMulti;
            for (const std::string& path : split_csv(ab.tiers)) {
                const PromptBank bank = PromptBank::load(path);
                TokenProvider provider;
                provider.model = &model;
                provider.bank = &bank;
                provider.spec = &spec;
                run_row(concat("tier:", std::filesystem::path(path).stem().string()),
                        [&](const std::string& cls) -> const TextTokenPair& { return provider(cls); });
            }
        }

        auto cell = [](const std::optional<double>& v) {
            char buf[32];
            if (v.has_value()) {
                std::snprintf(buf, sizeof(buf), "%12.4f", *v);
            } else {
                std::snprintf(buf, sizeof(buf), "%12s", "n/a");
            }
            return std::string(buf);
        };
        std::printf("%-24s %12s %12s %12s\n", "config", "pixel_auroc", "pixel_f1max", "pixel_pro");
        nlohmann::json jrows = nlohmann::json::array();
        for (const Row& r : rows) {
            std::printf("%-24s %s %s %s\n", r.name.c_str(), cell(r.mean.get("pixel_auroc")).c_str(),
                        cell(r.mean.get("pixel_f1max")).c_str(), cell(r.mean.get("pixel_pro")).c_str());
            nlohmann::json jr;
            jr["config"] = r.name;
            for (const char* key : {"pixel_auroc", "pixel_f1max", "pixel_pro", "image_auroc",
                                    "image_f1max"}) {
                const std::optional<double> v = r.mean.get(key);
                if (v.has_value()) {
                    jr[key] = *v;
                } else {
                    jr[key] = nullptr;
                }
            }
            jrows.push_back(jr);
        }
        if (!ab.out.empty()) write_text_file(ab.out, jrows.dump(2) + "\n");
    });

    // ---- bench ----
    auto* bench = app.add_subcommand("bench", "time the per-image inference path");
    struct {
        std::string model, config, tokens, image, mode = "vv_multi", out;
        std::size_t iters = 10;
        double tau = -1.0, smooth = 0.0;
        TtaFlags tta;
    } be;
    bench->add_option("--model", be.model, "model archive")->required();
    bench->add_option("--config", be.config, "model config json override");
    bench->add_option("--tokens", be.tokens, "token archive")->required();
    bench->add_option("--image", be.image, "query image")->required();
    bench->add_option("--iters", be.iters, "timed iterations")->capture_default_str();
    bench->add_option("--mode", be.mode, "encode mode")->capture_default_str();
    bench->add_option("--tau", be.tau, "logit temperature (default: model config)");
    bench->add_option("--smooth", be.smooth, "gaussian sigma for map smoothing")->capture_default_str();
    bench->add_option("--out", be.out, "also write the json report here");
    be.tta.attach(bench);
    bench->callback([&] {
        const Model model = load_model_cli(be.model, be.config);
        const TextTokenPair pair = load_tokens(be.tokens);
        const ImageTensor pre = preprocess_file(be.image, model.cfg);

        LocalizeOptions opts;
        opts.mode = parse_encode_mode(be.mode);
        opts.tau = resolve_tau(be.tau, model.cfg);
        opts.smooth_sigma = be.smooth;
        opts.tta_cfg = be.tta.to_config(opts.tau);

        auto stats_json = [](const BenchStats& s) {
            nlohmann::json j;
            j["mean_ms"] = s.mean_ms;
            j["std_ms"] = s.std_ms;
            j["iters"] = s.iters;
            j["mode"] = s.mode;
            return j;
        };
        nlohmann::json out;
        opts.tta = false;
        out["tfa"] = stats_json(bench_pipeline(model, pair, pre, opts, be.iters));
        if (be.tta.enabled) {
            opts.tta = true;
            out["tta"] = stats_json(bench_pipeline(model, pair, pre, opts, be.iters));
        }
        const std::string text = out.dump(2) + "\n";
        std::fputs(text.c_str(), stdout);
        if (!be.out.empty()) write_text_file(be.out, text);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    return exit_override;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const zeroloc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        switch (e.kind()) {
            case zeroloc::ErrorKind::Io:
            case zeroloc::ErrorKind::Input:
                return 1;
            case zeroloc::ErrorKind::Shape:
            case zeroloc::ErrorKind::Config:
                return 2;
            case zeroloc::ErrorKind::Numeric:
                return 3;
        }
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
