#pragma once

#include "splatsense/cluster.hpp"
#include "splatsense/supervision.hpp"

namespace splatsense {

struct BinaryMask {
    int height = 0, width = 0;
    std::vector<std::uint8_t> m;

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), m(static_cast<std::size_t>(h) * w, 0) {}
    bool at(int y, int x) const { return m[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int y, int x, bool v) { m[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
};

/// IoU with the empty-set conventions: 1 when both masks are empty, 0 when
/// exactly one is.
inline double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.height != b.height || a.width != b.width)
        throw config_error("mask_iou: resolution mismatch");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.m.size(); ++i) {
        const bool pa = a.m[i] != 0, pb = b.m[i] != 0;
        inter += pa && pb;
        uni += pa || pb;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

inline double set_iou(const std::vector<int>& a_sorted, const std::vector<int>& b_sorted) {
    std::size_t inter = 0, ia = 0, ib = 0;
    while (ia < a_sorted.size() && ib < b_sorted.size()) {
        if (a_sorted[ia] == b_sorted[ib]) {
            ++inter;
            ++ia;
            ++ib;
        } else if (a_sorted[ia] < b_sorted[ib])
            ++ia;
        else
            ++ib;
    }
    const std::size_t uni = a_sorted.size() + b_sorted.size() - inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

struct MetricRow {
    std::string query;
    int view = 0;
    double iou = 0;
};

struct MetricReport {
    double miou = 0;
    double macc = 0;  // fraction of rows with IoU >= 0.25
    std::vector<MetricRow> rows;
};

inline constexpr double kAccIouThreshold = 0.25;

inline MetricReport summarize_rows(std::vector<MetricRow> rows) {
    MetricReport rep;
    rep.rows = std::move(rows);
    if (rep.rows.empty()) return rep;
    std::size_t hits = 0;
    for (const auto& r : rep.rows) {
        rep.miou += r.iou;
        hits += r.iou >= kAccIouThreshold;
    }
    rep.miou /= static_cast<double>(rep.rows.size());
    rep.macc = static_cast<double>(hits) / static_cast<double>(rep.rows.size());
    return rep;
}

/// mIoU / mAcc@0.25 over query-view pairs of predicted vs ground-truth masks.
inline MetricReport selection_metrics(const std::vector<std::vector<BinaryMask>>& predicted,
                                      const std::vector<std::vector<BinaryMask>>& ground_truth,
                                      const std::vector<std::string>& query_names = {}) {
    if (predicted.size() != ground_truth.size())
        throw config_error("selection_metrics: query count mismatch");
    std::vector<MetricRow> rows;
    for (std::size_t q = 0; q < predicted.size(); ++q) {
        if (predicted[q].size() != ground_truth[q].size())
            throw config_error("selection_metrics: view count mismatch");
        for (std::size_t v = 0; v < predicted[q].size(); ++v) {
            MetricRow r;
            r.query = q < query_names.size() ? query_names[q] : "q" + std::to_string(q);
            r.view = static_cast<int>(v);
            r.iou = mask_iou(predicted[q][v], ground_truth[q][v]);
            rows.push_back(std::move(r));
        }
    }
    return summarize_rows(std::move(rows));
}

/// Class-agnostic 3D instance metrics: greedy max-IoU matching of ground-truth
/// instances (labels > 0) to predicted instances (labels >= 0) over
/// Gaussian-index sets; unmatched ground truth scores 0.
inline MetricReport instance_seg_metrics(const std::vector<int>& pred_labels,
                                         const std::vector<int>& gt_labels) {
    if (pred_labels.size() != gt_labels.size())
        throw config_error("instance_seg_metrics: length mismatch");
    std::map<int, std::vector<int>> gt_sets, pred_sets;
    for (std::size_t i = 0; i < gt_labels.size(); ++i) {
        if (gt_labels[i] > 0) gt_sets[gt_labels[i]].push_back(static_cast<int>(i));
        if (pred_labels[i] >= 0) pred_sets[pred_labels[i]].push_back(static_cast<int>(i));
    }
    std::vector<std::pair<int, std::vector<int>>> gts(gt_sets.begin(), gt_sets.end());
    std::vector<std::pair<int, std::vector<int>>> preds(pred_sets.begin(), pred_sets.end());

    struct Pair {
        double iou;
        int g, p;
    };
    std::vector<Pair> pairs;
    for (int g = 0; g < static_cast<int>(gts.size()); ++g)
        for (int p = 0; p < static_cast<int>(preds.size()); ++p) {
            const double iou = set_iou(gts[g].second, preds[p].second);
            if (iou > 0) pairs.push_back({iou, g, p});
        }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        if (a.g != b.g) return a.g < b.g;
        return a.p < b.p;
    });
    std::vector<char> g_used(gts.size(), 0), p_used(preds.size(), 0);
    std::vector<double> matched(gts.size(), 0.0);
    for (const auto& pr : pairs) {
        if (g_used[pr.g] || p_used[pr.p]) continue;
        g_used[pr.g] = p_used[pr.p] = 1;
        matched[pr.g] = pr.iou;
    }
    std::vector<MetricRow> rows;
    for (std::size_t g = 0; g < gts.size(); ++g)
        rows.push_back({"instance_" + std::to_string(gts[g].first), 0, matched[g]});
    return summarize_rows(std::move(rows));
}

/// Adjusted Rand index of two labelings; -1 values count as one shared label.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw config_error("adjusted_rand_index: length mismatch");
    const std::size_t n = a.size();
    if (n < 2) return 1.0;
    std::map<std::pair<int, int>, std::size_t> cont;
    std::map<int, std::size_t> ra, rb;
    for (std::size_t i = 0; i < n; ++i) {
        cont[{a[i], b[i]}]++;
        ra[a[i]]++;
        rb[b[i]]++;
    }
    const auto comb2 = [](std::size_t k) {
        return 0.5 * static_cast<double>(k) * static_cast<double>(k - 1);
    };
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (const auto& [k, v] : cont) sum_ij += comb2(v);
    for (const auto& [k, v] : ra) sum_a += comb2(v);
    for (const auto& [k, v] : rb) sum_b += comb2(v);
    const double expected = sum_a * sum_b / comb2(n);
    const double maximum = 0.5 * (sum_a + sum_b);
    if (maximum == expected) return 1.0;
    return (sum_ij - expected) / (maximum - expected);
}

struct QueryResult {
    std::vector<DecodedInstance> instances;  // sorted by descending relevance
    std::vector<BinaryMask> rendered_masks;  // one per requested view
};

inline constexpr double kMaskRatioThreshold = 0.5;
inline constexpr double kMaskAlphaThreshold = 0.2;

/// Renders the union of the given Gaussians as an indicator attribute and
/// thresholds coverage: selected where indicator/alpha > 0.5 and alpha > 0.2.
inline BinaryMask render_selection_mask(const GaussianScene& scene, const Camera& cam,
                                        const std::vector<char>& selected, int threads = 1) {
    FeatureRows ind(static_cast<int>(scene.size()), 1);
    for (std::size_t i = 0; i < scene.size(); ++i) ind.row(static_cast<int>(i))[0] = selected[i];
    const FeatureMap map = render(scene, cam, ind, threads);
    BinaryMask mask(cam.height, cam.width);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const double alpha = map.alpha_at(y, x);
            if (alpha > kMaskAlphaThreshold &&
                map.at(y, x)[0] / alpha > kMaskRatioThreshold)
                mask.set(y, x, true);
        }
    return mask;
}

/// Open-vocabulary object selection: decode instances against the query, then
/// render the selected union into each requested view.
inline QueryResult select_objects(const GaussianScene& scene, const HashFieldStack& stack,
                                  const VecX& query, const DecodeConfig& cfg,
                                  const std::vector<Camera>& views, int threads = 1) {
    QueryResult out;
    const InstanceDecodeResult decoded = decode_instances(scene, stack, cfg, &query);
    out.instances = decoded.clusters;
    std::sort(out.instances.begin(), out.instances.end(), [](const auto& a, const auto& b) {
        if (a.relevance != b.relevance) return a.relevance > b.relevance;
        return a.members.front() < b.members.front();
    });
    std::vector<char> selected(scene.size(), 0);
    for (const auto& inst : out.instances)
        for (const int i : inst.members) selected[i] = 1;
    for (const auto& cam : views)
        out.rendered_masks.push_back(render_selection_mask(scene, cam, selected, threads));
    return out;
}

/// Ground-truth selection mask for a concept: union of that concept's
/// instance masks in the view.
inline BinaryMask concept_gt_mask(const LabelImage& mask, const std::map<int, int>& mask_concepts,
                                  int concept_id) {
    BinaryMask out(mask.height, mask.width);
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x) {
            const int l = mask.at(y, x);
            if (l == 0) continue;
            const auto it = mask_concepts.find(l);
            if (it != mask_concepts.end() && it->second == concept_id) out.set(y, x, true);
        }
    return out;
}

inline void write_selection_csv(const MetricReport& rep, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << "query,view,iou\n";
    for (const auto& r : rep.rows)
        f << r.query << "," << r.view << "," << format_double(r.iou) << "\n";
    if (!f) throw io_error("write failed: " + path);
}

inline std::string metric_summary_text(const MetricReport& rep) {
    std::string s = "{\n";
    s += "  \"pairs\": " + std::to_string(rep.rows.size()) + ",\n";
    s += "  \"miou\": " + format_double(rep.miou) + ",\n";
    s += "  \"macc_at_0.25\": " + format_double(rep.macc) + "\n";
    s += "}\n";
    return s;
}

}  // namespace splatsense
