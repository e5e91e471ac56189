#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "zeroloc/errors.hpp"

namespace zeroloc {

namespace detail {

inline void check_scored(const std::vector<float>& scores, const std::vector<std::uint8_t>& labels,
                         const char* what) {
    if (scores.size() != labels.size()) throw_shape(what, ": scores and labels differ in length");
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw_input(what, ": non-finite score at index ", i);
        if (labels[i] > 1) throw_input(what, ": label at index ", i, " is not binary");
    }
}

}  // namespace detail

// Mann-Whitney with tie-averaged ranks; equals trapezoidal ROC integration.
// Returns nothing when only one class is present.
inline std::optional<double> auroc(const std::vector<float>& scores,
                                   const std::vector<std::uint8_t>& labels) {
    detail::check_scored(scores, labels, "auroc");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (std::uint8_t l : labels) n_pos += l;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
        for (std::size_t k = i; k < j; ++k) {
            if (labels[order[k]]) rank_sum_pos += avg_rank;
        }
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * (n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

// Maximum F1 over thresholds at midpoints between consecutive unique scores
// plus one below the minimum. Above 10^6 points the sweep uses 10^4 evenly
// spaced score quantiles; *subsampled reports which path ran.
inline std::optional<double> f1max(const std::vector<float>& scores,
                                   const std::vector<std::uint8_t>& labels, bool* subsampled = nullptr) {
    detail::check_scored(scores, labels, "f1max");
    if (subsampled) *subsampled = false;
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (std::uint8_t l : labels) n_pos += l;
    if (n_pos == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    auto f1_at = [&](std::size_t k, std::size_t tp) {
        // top-k predicted positive
        const double denom = static_cast<double>(2 * tp + (k - tp) + (n_pos - tp));
        return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
    };

    double best = 0.0;
    if (n <= 1'000'000) {
        std::size_t tp = 0, i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j < n && scores[order[j]] == scores[order[i]]) {
                tp += labels[order[j]];
                ++j;
            }
            best = std::max(best, f1_at(j, tp));  // threshold just below this group
            i = j;
        }
    } else {
        if (subsampled) *subsampled = true;
        std::vector<std::size_t> tp_prefix(n + 1, 0);
        for (std::size_t k = 0; k < n; ++k) tp_prefix[k + 1] = tp_prefix[k] + labels[order[k]];
        std::vector<float> sorted_desc(n);
        for (std::size_t k = 0; k < n; ++k) sorted_desc[k] = scores[order[k]];
        constexpr std::size_t kQuantiles = 10'000;
        for (std::size_t q = 0; q < kQuantiles; ++q) {
            const std::size_t pos = (q * (n - 1)) / (kQuantiles - 1);
            const float t = sorted_desc[pos];
            // predictions: score >= t; sorted_desc is descending
            const std::size_t k = static_cast<std::size_t>(
                std::upper_bound(sorted_desc.begin(), sorted_desc.end(), t,
                                 [](float a, float b) { return a > b; }) -
                sorted_desc.begin());
            best = std::max(best, f1_at(k, tp_prefix[k]));
        }
    }
    return best;
}

// Average precision: sum of (recall step) * precision over the descending
// sweep, ties processed as one group.
inline std::optional<double> aupr(const std::vector<float>& scores,
                                  const std::vector<std::uint8_t>& labels) {
    detail::check_scored(scores, labels, "aupr");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (std::uint8_t l : labels) n_pos += l;
    if (n_pos == 0) return std::nullopt;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    double ap = 0.0, recall_prev = 0.0;
    std::size_t tp = 0, i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) {
            tp += labels[order[j]];
            ++j;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(j);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    return ap;
}

// One image's pixel scores and binary ground truth for PRO.
struct ProSample {
    std::vector<float> scores;
    std::vector<std::uint8_t> mask;
    std::size_t height = 0;
    std::size_t width = 0;
};

namespace detail {

// 8-connected component labels, -1 for background. Returns component count.
inline std::size_t label_components(const ProSample& s, std::vector<long>& comp, long first_id) {
    comp.assign(s.mask.size(), -1);
    const long h = static_cast<long>(s.height), w = static_cast<long>(s.width);
    long next = first_id;
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < s.mask.size(); ++start) {
        if (!s.mask[start] || comp[start] != -1) continue;
        comp[start] = next;
        stack.push_back(start);
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const long py = static_cast<long>(p) / w, px = static_cast<long>(p) % w;
            for (long dy = -1; dy <= 1; ++dy) {
                for (long dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const long ny = py + dy, nx = px + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    const std::size_t q = static_cast<std::size_t>(ny * w + nx);
                    if (s.mask[q] && comp[q] == -1) {
                        comp[q] = next;
                        stack.push_back(q);
                    }
                }
            }
        }
        ++next;
    }
    return static_cast<std::size_t>(next - first_id);
}

}  // namespace detail

// Per-region overlap curve integrated against FPR up to fpr_limit,
// normalized by fpr_limit. The curve holds its last value between sweep
// points (step integration from an implicit (0,0) anchor), so score sets
// that only reach full overlap at high FPR contribute nothing below that.
// Pooled form: components, overlaps, and FPR run over all samples jointly.
inline std::optional<double> pro_pooled(const std::vector<ProSample>& samples, double fpr_limit = 0.3) {
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw_config("pro: fpr_limit must be in (0, 1]");

    struct Pixel {
        float score;
        long comp;  // -1 for negatives
    };
    std::vector<Pixel> pixels;
    std::vector<std::size_t> comp_size;
    std::size_t neg_total = 0;

    for (const ProSample& s : samples) {
        if (s.scores.size() != s.mask.size() || s.scores.size() != s.height * s.width) {
            throw_shape("pro: sample geometry mismatch");
        }
        for (std::size_t i = 0; i < s.scores.size(); ++i) {
            if (!std::isfinite(s.scores[i])) throw_input("pro: non-finite score");
            if (s.mask[i] > 1) throw_input("pro: mask is not binary");
        }
        std::vector<long> comp;
        const std::size_t added = detail::label_components(s, comp, static_cast<long>(comp_size.size()));
        comp_size.resize(comp_size.size() + added, 0);
        for (std::size_t i = 0; i < comp.size(); ++i) {
            if (comp[i] >= 0) {
                comp_size[static_cast<std::size_t>(comp[i])] += 1;
            } else {
                ++neg_total;
            }
            pixels.push_back(Pixel{s.scores[i], comp[i]});
        }
    }
    if (comp_size.empty()) return std::nullopt;

    std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

    std::vector<std::size_t> hits(comp_size.size(), 0);
    double sum_overlap = 0.0;
    std::size_t fp = 0;
    const double n_comps = static_cast<double>(comp_size.size());

    double area = 0.0, cur_f = 0.0, cur_ov = 0.0;
    auto advance_to = [&](double f, double ov) {
        if (f > cur_f) {
            area += (std::min(f, fpr_limit) - std::min(cur_f, fpr_limit)) * cur_ov;
            cur_f = f;
        }
        cur_ov = ov;
    };

    std::size_t i = 0;
    while (i < pixels.size()) {
        std::size_t j = i;
        while (j < pixels.size() && pixels[j].score == pixels[i].score) {
            const long cidx = pixels[j].comp;
            if (cidx >= 0) {
                const std::size_t ci = static_cast<std::size_t>(cidx);
                sum_overlap -= static_cast<double>(hits[ci]) / comp_size[ci];
                hits[ci] += 1;
                sum_overlap += static_cast<double>(hits[ci]) / comp_size[ci];
            } else {
                ++fp;
            }
            ++j;
        }
        const double f = neg_total ? static_cast<double>(fp) / static_cast<double>(neg_total) : 0.0;
        advance_to(f, sum_overlap / n_comps);
        i = j;
    }
    area += (fpr_limit - std::min(cur_f, fpr_limit)) * cur_ov;
    return area / fpr_limit;
}

inline std::optional<double> pro(const std::vector<float>& scores, const std::vector<std::uint8_t>& mask,
                                 std::size_t height, std::size_t width, double fpr_limit = 0.3) {
    return pro_pooled({ProSample{scores, mask, height, width}}, fpr_limit);
}

}  // namespace zeroloc
