#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "zeroloc/config.hpp"
#include "zeroloc/errors.hpp"
#include "zeroloc/image.hpp"
#include "zeroloc/manifest.hpp"
#include "zeroloc/metrics.hpp"
#include "zeroloc/prompts.hpp"
#include "zeroloc/scoring.hpp"
#include "zeroloc/tta.hpp"
#include "zeroloc/vision.hpp"

namespace zeroloc {

// ---- token archives -------------------------------------------------------

inline void save_tokens(const std::string& path, const TextTokenPair& pair,
                        const std::string& class_name) {
    Archive a;
    a.tensors.emplace("tokens.t_plus", pair.t_plus);
    a.tensors.emplace("tokens.t_minus", pair.t_minus);
    a.tensors.emplace("tokens.matrix", pair.matrix);
    a.metadata["class"] = class_name;
    a.metadata["pairs"] = std::to_string(pair.pair_count());
    save_archive(path, a);
}

inline TextTokenPair load_tokens(const std::string& path, std::string* class_name = nullptr) {
    const Archive a = load_archive(path);
    TextTokenPair pair;
    pair.t_plus = a.get("tokens.t_plus");
    pair.t_minus = a.get("tokens.t_minus");
    pair.matrix = a.get("tokens.matrix");
    if (pair.matrix.rank() != 2 || pair.matrix.rows() == 0 || pair.matrix.rows() % 2 != 0) {
        throw_input("'", path, "': tokens.matrix must be 2NxC");
    }
    if (pair.t_plus.numel() != pair.matrix.cols() || pair.t_minus.numel() != pair.matrix.cols()) {
        throw_input("'", path, "': token vectors do not match matrix width");
    }
    if (class_name) *class_name = a.metadata.count("class") ? a.metadata.at("class") : "";
    return pair;
}

// ---- dataset manifest ------------------------------------------------------

struct ManifestEntry {
    std::string image_path;
    std::string mask_path;  // empty for normal images
    std::string class_name;
    int label = 0;
};

// Tab-separated lines: image_path <tab> mask_path|- <tab> class <tab> label.
// Relative paths resolve against the manifest's own directory.
inline std::vector<ManifestEntry> parse_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw_io("cannot open '", path, "' for reading");
    const std::filesystem::path base = std::filesystem::path(path).parent_path();

    auto resolve = [&](const std::string& p) {
        if (p.empty()) return p;
        std::filesystem::path fp(p);
        return fp.is_absolute() ? p : (base / fp).string();
    };

    std::vector<ManifestEntry> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 4) {
            throw_input("'", path, "' line ", line_no, ": expected 4 tab-separated fields, got ",
                        fields.size());
        }
        ManifestEntry e;
        e.image_path = resolve(fields[0]);
        e.mask_path = fields[1] == "-" ? std::string() : resolve(fields[1]);
        e.class_name = fields[2];
        if (fields[3] == "0") {
            e.label = 0;
        } else if (fields[3] == "1") {
            e.label = 1;
        } else {
            throw_input("'", path, "' line ", line_no, ": label must be 0 or 1");
        }
        if (e.label == 1 && e.mask_path.empty()) {
            throw_input("'", path, "' line ", line_no, ": anomalous image needs a mask path");
        }
        if (e.label == 0 && !e.mask_path.empty()) {
            throw_input("'", path, "' line ", line_no, ": normal image must use '-' for the mask");
        }
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw_input("'", path, "': manifest has no entries");
    return entries;
}

// ---- single-image localization ---------------------------------------------

struct LocalizeOptions {
    EncodeMode mode = EncodeMode::VvMulti;
    bool tta = false;
    TtaConfig tta_cfg;
    double tau = 100.0;
    double smooth_sigma = 0.0;
    // 0 means "the decoded image's own size"
    std::size_t out_height = 0;
    std::size_t out_width = 0;
};

struct LocalizeResult {
    double s_ad = 0.0;
    AnomalyMap map;
    std::vector<TraceRow> trace;
};

inline LocalizeResult localize_image(const Model& model, const TextTokenPair& pair, const ImageU8& raw,
                                     const LocalizeOptions& opts) {
    const ImageTensor pre = preprocess(raw, model.cfg);
    const VisualOutput vis = encode_image(pre, model.archive, model.cfg, opts.mode);

    LocalizeResult out;
    out.s_ad = score_image(vis.v, pair, opts.tau);

    std::vector<double> patch_scores;
    if (opts.tta) {
        TtaConfig cfg = opts.tta_cfg;
        cfg.tau = opts.tau;
        TtaResult tta = run_tta(vis.P, pair, cfg);
        out.trace = std::move(tta.trace);
        patch_scores = score_patches(tta.adapted, pair, opts.tau);
    } else {
        patch_scores = score_patches(vis.P, pair, opts.tau);
    }

    const std::size_t oh = opts.out_height ? opts.out_height : raw.height;
    const std::size_t ow = opts.out_width ? opts.out_width : raw.width;
    out.map = build_map(patch_scores, vis.grid_rows, vis.grid_cols, oh, ow, opts.smooth_sigma);
    return out;
}

// ---- dataset evaluation ------------------------------------------------------

inline const std::vector<std::string>& all_metric_names() {
    static const std::vector<std::string> names = {"auroc", "f1max", "aupr", "pro"};
    return names;
}

struct EvalOptions {
    LocalizeOptions loc;
    std::vector<std::string> metrics;  // subset of all_metric_names(); empty = all
    std::uint64_t base_seed = 0;
    double fpr_limit = 0.3;

    bool wants(const std::string& name) const {
        if (metrics.empty()) return true;
        for (const std::string& m : metrics) {
            if (m == name) return true;
        }
        return false;
    }
};

struct ClassResult {
    // key -> value; absent optional renders as null
    std::vector<std::pair<std::string, std::optional<double>>> metrics;
    bool pixel_f1max_subsampled = false;

    std::optional<double> get(const std::string& key) const {
        for (const auto& [k, v] : metrics) {
            if (k == key) return v;
        }
        return std::nullopt;
    }
};

struct EvalReport {
    std::vector<std::string> class_order;
    std::map<std::string, ClassResult> classes;
    ClassResult mean;
    std::size_t images_total = 0;
    std::size_t images_failed = 0;
    std::vector<std::string> warnings;
};

namespace detail {

struct ClassAccum {
    std::vector<float> pixel_scores;
    std::vector<std::uint8_t> pixel_labels;
    std::vector<ProSample> pro_samples;
    std::vector<float> image_scores;
    std::vector<std::uint8_t> image_labels;
};

inline ClassResult class_metrics(const ClassAccum& acc, const EvalOptions& opts) {
    ClassResult r;
    if (opts.wants("auroc")) {
        r.metrics.emplace_back("pixel_auroc", auroc(acc.pixel_scores, acc.pixel_labels));
    }
    if (opts.wants("f1max")) {
        bool sub = false;
        r.metrics.emplace_back("pixel_f1max", f1max(acc.pixel_scores, acc.pixel_labels, &sub));
        r.pixel_f1max_subsampled = sub;
    }
    if (opts.wants("aupr")) {
        r.metrics.emplace_back("pixel_aupr", aupr(acc.pixel_scores, acc.pixel_labels));
    }
    if (opts.wants("pro")) {
        r.metrics.emplace_back("pixel_pro", pro_pooled(acc.pro_samples, opts.fpr_limit));
    }
    if (opts.wants("auroc")) {
        r.metrics.emplace_back("image_auroc", auroc(acc.image_scores, acc.image_labels));
    }
    if (opts.wants("f1max")) {
        r.metrics.emplace_back("image_f1max", f1max(acc.image_scores, acc.image_labels));
    }
    if (opts.wants("aupr")) {
        r.metrics.emplace_back("image_aupr", aupr(acc.image_scores, acc.image_labels));
    }
    return r;
}

}  // namespace detail

// Runs localization over every manifest entry, pools per class, and computes
// the selected metrics. token_provider maps a class name to its TextTokenPair
// (one archive per class, or built on the fly from a prompt bank).
// Per-image failures are recorded as warnings and excluded.
inline EvalReport evaluate_manifest(
    const Model& model, const std::vector<ManifestEntry>& entries,
    const std::function<const TextTokenPair&(const std::string&)>& token_provider,
    const EvalOptions& opts) {
    std::map<std::string, detail::ClassAccum> accums;
    EvalReport report;
    report.images_total = entries.size();

    for (std::size_t idx = 0; idx < entries.size(); ++idx) {
        const ManifestEntry& e = entries[idx];
        try {
            const TextTokenPair& pair = token_provider(e.class_name);
            const ImageU8 raw = load_image(e.image_path);

            LocalizeOptions loc = opts.loc;
            loc.tta_cfg.noise.seed = opts.base_seed + idx;
            const LocalizeResult res = localize_image(model, pair, raw, loc);

            std::vector<std::uint8_t> mask(raw.height * raw.width, 0);
            if (e.label == 1) {
                std::size_t mh = 0, mw = 0;
                mask = load_mask(e.mask_path, &mh, &mw);
                if (mh != raw.height || mw != raw.width) {
                    throw_input("mask '", e.mask_path, "' is ", mh, "x", mw, " but image is ",
                                raw.height, "x", raw.width);
                }
                bool any = false;
                for (std::uint8_t v : mask) any |= v != 0;
                if (!any) throw_input("mask '", e.mask_path, "' is empty but label is 1");
            }

            if (accums.count(e.class_name) == 0) report.class_order.push_back(e.class_name);
            detail::ClassAccum& acc = accums[e.class_name];
            acc.pixel_scores.insert(acc.pixel_scores.end(), res.map.values.begin(), res.map.values.end());
            acc.pixel_labels.insert(acc.pixel_labels.end(), mask.begin(), mask.end());
            if (opts.wants("pro")) {
                acc.pro_samples.push_back(ProSample{res.map.values, mask, raw.height, raw.width});
            }
            acc.image_scores.push_back(static_cast<float>(res.s_ad));
            acc.image_labels.push_back(static_cast<std::uint8_t>(e.label));
        } catch (const Error& err) {
            report.images_failed += 1;
            report.warnings.push_back(concat("image ", idx, " (", e.image_path, "): ", err.what()));
        }
    }

    for (const std::string& cls : report.class_order) {
        report.classes.emplace(cls, detail::class_metrics(accums.at(cls), opts));
    }

    // mean over classes, skipping undefined values per metric
    if (!report.class_order.empty()) {
        const ClassResult& first = report.classes.at(report.class_order.front());
        for (const auto& [key, unused] : first.metrics) {
            double sum = 0.0;
            std::size_t count = 0;
            for (const std::string& cls : report.class_order) {
                const std::optional<double> v = report.classes.at(cls).get(key);
                if (v.has_value()) {
                    sum += *v;
                    ++count;
                }
            }
            report.mean.metrics.emplace_back(
                key, count ? std::optional<double>(sum / count) : std::nullopt);
        }
    }
    return report;
}

// ---- report serialization ----------------------------------------------------

inline nlohmann::json report_to_json(const EvalReport& report) {
    auto result_json = [](const ClassResult& r) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& [k, v] : r.metrics) {
            if (v.has_value()) {
                j[k] = *v;
            } else {
                j[k] = nullptr;
            }
            if (k == "pixel_f1max") j["pixel_f1max_subsampled"] = r.pixel_f1max_subsampled;
        }
        return j;
    };
    nlohmann::json j;
    nlohmann::json classes = nlohmann::json::object();
    for (const std::string& cls : report.class_order) {
        classes[cls] = result_json(report.classes.at(cls));
    }
    j["classes"] = classes;
    j["mean"] = result_json(report.mean);
    j["images"] = {{"total", report.images_total}, {"failed", report.images_failed}};
    j["warnings"] = report.warnings;
    return j;
}

inline std::string report_to_csv(const EvalReport& report) {
    std::string csv = "class";
    for (const auto& [k, unused] : report.mean.metrics) csv += "," + k;
    csv += "\n";
    auto row = [&](const std::string& name, const ClassResult& r) {
        csv += name;
        for (const auto& [k, v] : r.metrics) {
            csv += ",";
            if (v.has_value()) {
                char buf[32];
                std::snprintf(buf, sizeof(buf), "%.6f", *v);
                csv += buf;
            }
        }
        csv += "\n";
    };
    for (const std::string& cls : report.class_order) row(cls, report.classes.at(cls));
    row("mean", report.mean);
    return csv;
}

inline std::string trace_to_csv(const std::vector<TraceRow>& trace) {
    std::string csv = "epoch,loss_d,loss_p,loss_total\n";
    for (const TraceRow& r : trace) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%zu,%.9f,%.9f,%.9f\n", r.epoch, r.loss_d, r.loss_p,
                      r.loss_total);
        csv += buf;
    }
    return csv;
}

// ---- timing bench --------------------------------------------------------------

struct BenchStats {
    double mean_ms = 0.0;
    double std_ms = 0.0;
    std::size_t iters = 0;
    std::string mode;
};

// Times the encode -> score -> map path from an already-preprocessed tensor,
// excluding file I/O and prompt encoding. One warm-up iteration runs first.
inline BenchStats bench_pipeline(const Model& model, const TextTokenPair& pair, const ImageTensor& pre,
                                 const LocalizeOptions& opts, std::size_t iters) {
    if (iters == 0) throw_config("bench: iters must be positive");
    auto once = [&]() {
        const VisualOutput vis = encode_image(pre, model.archive, model.cfg, opts.mode);
        std::vector<double> scores;
        if (opts.tta) {
            TtaConfig cfg = opts.tta_cfg;
            cfg.tau = opts.tau;
            const TtaResult tta = run_tta(vis.P, pair, cfg);
            scores = score_patches(tta.adapted, pair, opts.tau);
        } else {
            scores = score_patches(vis.P, pair, opts.tau);
        }
        const AnomalyMap map = build_map(scores, vis.grid_rows, vis.grid_cols, model.cfg.image_size,
                                         model.cfg.image_size, opts.smooth_sigma);
        return map.values[0];
    };

    volatile double sink = once();  // warm-up
    std::vector<double> times_ms(iters);
    for (std::size_t i = 0; i < iters; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        sink = once();
        const auto t1 = std::chrono::steady_clock::now();
        times_ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    (void)sink;

    BenchStats stats;
    stats.iters = iters;
    stats.mode = opts.tta ? "tta" : "tfa";
    double sum = 0.0;
    for (double t : times_ms) sum += t;
    stats.mean_ms = sum / static_cast<double>(iters);
    double var = 0.0;
    for (double t : times_ms) var += (t - stats.mean_ms) * (t - stats.mean_ms);
    stats.std_ms = iters > 1 ? std::sqrt(var / static_cast<double>(iters - 1)) : 0.0;
    return stats;
}

}  // namespace zeroloc
