#pragma once

#include "splatsense/fields.hpp"

#include <map>
#include <numeric>

namespace splatsense {

inline constexpr double kMaxLambda = 1e12;  // 1/distance clamp for coincident points
inline constexpr double kGateTemperature = 1.0;

enum class Extraction { excess_of_mass, leaf };

struct DecodeConfig {
    int min_cluster_size = 25;
    int min_samples = 10;
    double relevance_threshold = 0.6;  // tau
    double dbscan_eps = 0.0;           // <= 0 selects 3x median nearest-neighbor distance
    int dbscan_min_pts = 5;
    Extraction extraction = Extraction::excess_of_mass;
    bool spatial_refinement = true;    // stage 2 toggle (ablation hook)

    void validate() const {
        if (min_cluster_size < 2) throw config_error("min_cluster_size must be >= 2");
        if (min_samples < 1) throw config_error("min_samples must be >= 1");
        if (relevance_threshold <= -1 || relevance_threshold >= 1)
            throw config_error("relevance threshold must lie in (-1, 1)");
        if (dbscan_min_pts < 1) throw config_error("dbscan_min_pts must be >= 1");
    }
};

/// Internals of stage 1: the mutual-reachability MST, the condensed tree and
/// per-candidate stabilities.
struct ClusterHierarchy {
    struct Edge {
        int a = 0, b = 0;
        double weight = 0;
    };
    struct CondensedCluster {
        int parent = -1;
        double lambda_birth = 0;
        double lambda_death = 0;
        int size_at_birth = 0;
        double stability = 0;
        std::vector<int> children;  // child cluster ids
        bool selected = false;
    };
    std::vector<Edge> mst_edges;
    std::vector<CondensedCluster> condensed;
    std::vector<int> point_cluster;    // condensed cluster each point fell out of
    std::vector<double> point_lambda;  // 1/distance at which it fell out
};

namespace detail {

inline double sq_dist(const double* a, const double* b, int d) {
    double acc = 0;
    for (int c = 0; c < d; ++c) {
        const double t = a[c] - b[c];
        acc += t * t;
    }
    return acc;
}

inline double to_lambda(double dist) {
    return dist > 1.0 / kMaxLambda ? 1.0 / dist : kMaxLambda;
}

}  // namespace detail

/// Distance to the min_samples-th nearest neighbor, the point itself counting
/// as the first (so min_samples = 1 gives core distance zero).
inline std::vector<double> core_distances(const FeatureRows& points, int min_samples) {
    const int n = points.rows;
    std::vector<double> core(n, 0.0);
    const int k = std::min(min_samples, n);
    std::vector<double> row(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j)
            row[j] = detail::sq_dist(points.row(i), points.row(j), points.cols);
        std::nth_element(row.begin(), row.begin() + (k - 1), row.end());
        core[i] = std::sqrt(row[k - 1]);
    }
    return core;
}

/// HDBSCAN: mutual-reachability MST, single-linkage condensation with
/// min_cluster_size, stability-based extraction. Unassigned points get -1.
inline std::pair<std::vector<int>, ClusterHierarchy> hdbscan(const FeatureRows& points,
                                                             int min_cluster_size, int min_samples,
                                                             Extraction extraction) {
    const int n = points.rows;
    ClusterHierarchy h;
    std::vector<int> labels(n, -1);
    if (n == 0) return {labels, h};
    if (n == 1) {
        h.point_cluster.assign(1, 0);
        h.point_lambda.assign(1, kMaxLambda);
        h.condensed.resize(1);
        h.condensed[0].size_at_birth = 1;
        return {labels, h};
    }

    const auto core = core_distances(points, min_samples);

    // Prim over the implicit complete mutual-reachability graph.
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::vector<int> from(n, 0);
    std::vector<char> in_tree(n, 0);
    in_tree[0] = 1;
    int current = 0;
    for (int added = 1; added < n; ++added) {
        for (int j = 0; j < n; ++j) {
            if (in_tree[j]) continue;
            const double d = std::sqrt(detail::sq_dist(points.row(current), points.row(j), points.cols));
            const double mr = std::max({core[current], core[j], d});
            if (mr < best[j]) {
                best[j] = mr;
                from[j] = current;
            }
        }
        int pick = -1;
        for (int j = 0; j < n; ++j)
            if (!in_tree[j] && (pick < 0 || best[j] < best[pick])) pick = j;
        h.mst_edges.push_back({from[pick], pick, best[pick]});
        in_tree[pick] = 1;
        current = pick;
    }

    // Single-linkage dendrogram over sorted MST edges.
    std::vector<ClusterHierarchy::Edge> edges = h.mst_edges;
    std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) {
        if (a.weight != b.weight) return a.weight < b.weight;
        if (a.a != b.a) return a.a < b.a;
        return a.b < b.b;
    });
    const int total_nodes = 2 * n - 1;
    std::vector<int> dendro_left(total_nodes, -1), dendro_right(total_nodes, -1);
    std::vector<int> dendro_size(total_nodes, 1);
    std::vector<double> dendro_dist(total_nodes, 0.0);
    std::vector<int> parent_uf(n), node_of(n);
    std::iota(parent_uf.begin(), parent_uf.end(), 0);
    std::iota(node_of.begin(), node_of.end(), 0);
    std::function<int(int)> find = [&](int x) {
        while (parent_uf[x] != x) x = parent_uf[x] = parent_uf[parent_uf[x]];
        return x;
    };
    for (int e = 0; e < static_cast<int>(edges.size()); ++e) {
        const int ra = find(edges[e].a), rb = find(edges[e].b);
        const int node = n + e;
        dendro_left[node] = node_of[ra];
        dendro_right[node] = node_of[rb];
        dendro_size[node] = dendro_size[node_of[ra]] + dendro_size[node_of[rb]];
        dendro_dist[node] = edges[e].weight;
        parent_uf[rb] = ra;
        node_of[ra] = node;
    }
    const int root = total_nodes - 1;

    const auto collect_leaves = [&](int node, std::vector<int>& out) {
        std::vector<int> stack{node};
        while (!stack.empty()) {
            const int cur = stack.back();
            stack.pop_back();
            if (cur < n) {
                out.push_back(cur);
                continue;
            }
            stack.push_back(dendro_left[cur]);
            stack.push_back(dendro_right[cur]);
        }
    };

    // Condense: new clusters only at splits into two >= min_cluster_size sides.
    h.point_cluster.assign(n, 0);
    h.point_lambda.assign(n, kMaxLambda);
    h.condensed.clear();
    h.condensed.push_back({});
    h.condensed[0].size_at_birth = n;
    h.condensed[0].lambda_birth = 0.0;
    std::vector<std::pair<int, int>> walk{{root, 0}};  // (dendro node, condensed cluster)
    std::vector<int> leaves;
    while (!walk.empty()) {
        const auto [node, cluster] = walk.back();
        walk.pop_back();
        if (node < n) {
            h.point_cluster[node] = cluster;
            h.point_lambda[node] = kMaxLambda;
            continue;
        }
        const double lambda = detail::to_lambda(dendro_dist[node]);
        const int l = dendro_left[node], r = dendro_right[node];
        const bool keep_l = dendro_size[l] >= min_cluster_size;
        const bool keep_r = dendro_size[r] >= min_cluster_size;
        if (keep_l && keep_r) {
            h.condensed[cluster].lambda_death = lambda;
            for (const int child : {l, r}) {
                ClusterHierarchy::CondensedCluster c;
                c.parent = cluster;
                c.lambda_birth = lambda;
                c.size_at_birth = dendro_size[child];
                const int id = static_cast<int>(h.condensed.size());
                h.condensed.push_back(c);
                h.condensed[cluster].children.push_back(id);
                walk.emplace_back(child, id);
            }
            continue;
        }
        for (const int child : {l, r}) {
            if (dendro_size[child] >= min_cluster_size) {
                walk.emplace_back(child, cluster);
            } else {
                leaves.clear();
                collect_leaves(child, leaves);
                for (const int p : leaves) {
                    h.point_cluster[p] = cluster;
                    h.point_lambda[p] = lambda;
                }
            }
        }
    }

    // Stability: points leaving the cluster plus mass handed to child clusters.
    for (int i = 0; i < n; ++i) {
        auto& c = h.condensed[h.point_cluster[i]];
        c.stability += h.point_lambda[i] - c.lambda_birth;
    }
    for (std::size_t c = 1; c < h.condensed.size(); ++c) {
        auto& parent = h.condensed[h.condensed[c].parent];
        parent.stability +=
            h.condensed[c].size_at_birth * (h.condensed[c].lambda_birth - parent.lambda_birth);
    }

    // Excess-of-mass (or leaf) selection; the root is never a cluster.
    const int m = static_cast<int>(h.condensed.size());
    std::vector<double> subtree(m, 0.0);
    for (int c = m - 1; c >= 0; --c) {
        auto& cc = h.condensed[c];
        if (cc.children.empty()) {
            cc.selected = c != 0;
            subtree[c] = cc.stability;
            continue;
        }
        double child_sum = 0;
        for (const int ch : cc.children) child_sum += subtree[ch];
        if (extraction == Extraction::leaf) {
            cc.selected = false;
            subtree[c] = child_sum;
            continue;
        }
        if (c != 0 && cc.stability >= child_sum) {
            cc.selected = true;
            subtree[c] = cc.stability;
        } else {
            cc.selected = false;
            subtree[c] = child_sum;
        }
    }
    // A selected ancestor absorbs its descendants.
    std::vector<int> final_id(m, -1);
    int next_label = 0;
    for (int c = 1; c < m; ++c) {
        if (!h.condensed[c].selected) continue;
        bool shadowed = false;
        for (int a = h.condensed[c].parent; a > 0; a = h.condensed[a].parent)
            if (h.condensed[a].selected) {
                shadowed = true;
                break;
            }
        if (shadowed)
            h.condensed[c].selected = false;
        else
            final_id[c] = next_label++;
    }
    for (int i = 0; i < n; ++i) {
        for (int c = h.point_cluster[i]; c > 0; c = h.condensed[c].parent)
            if (final_id[c] >= 0) {
                labels[i] = final_id[c];
                break;
            }
    }
    return {labels, h};
}

/// Classic density-reachability clustering; noise is -1. Deterministic given
/// the input order: clusters are discovered by ascending core index and border
/// points join the first cluster that reaches them.
inline std::vector<int> dbscan(const FeatureRows& points, double eps, int min_pts) {
    const int n = points.rows;
    std::vector<int> labels(n, -1);
    if (n == 0) return labels;
    const double eps2 = eps * eps;

    std::vector<char> core(n, 0);
    for (int i = 0; i < n; ++i) {
        int count = 0;
        for (int j = 0; j < n; ++j)
            if (detail::sq_dist(points.row(i), points.row(j), points.cols) <= eps2) ++count;
        core[i] = count >= min_pts;
    }
    int cid = 0;
    std::vector<int> queue;
    for (int i = 0; i < n; ++i) {
        if (labels[i] != -1 || !core[i]) continue;
        labels[i] = cid;
        queue.assign(1, i);
        std::size_t head = 0;
        while (head < queue.size()) {
            const int q = queue[head++];
            for (int j = 0; j < n; ++j) {
                if (labels[j] != -1) continue;
                if (detail::sq_dist(points.row(q), points.row(j), points.cols) > eps2) continue;
                labels[j] = cid;
                if (core[j]) queue.push_back(j);
            }
        }
        ++cid;
    }
    return labels;
}

/// Scene-adaptive DBSCAN radius: 3x the median nearest-neighbor distance
/// among the Gaussian centers.
inline double auto_dbscan_eps(const std::vector<Vec3>& positions) {
    const int n = static_cast<int>(positions.size());
    if (n < 2) return 1.0;
    std::vector<double> nn(n, std::numeric_limits<double>::infinity());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            nn[i] = std::min(nn[i], (positions[i] - positions[j]).squaredNorm());
        }
    for (auto& v : nn) v = std::sqrt(v);
    std::nth_element(nn.begin(), nn.begin() + n / 2, nn.end());
    return 3.0 * nn[n / 2];
}

/// Scale-modulated mean cosine relevance: each member's cosine against the
/// query is gated by 2 / (1 + exp(|scale - median scale| / T)), which is 1
/// when all scales agree and decays for members off the cluster's granularity.
inline double cluster_relevance(const std::vector<int>& members, const MatX& clip,
                                const VecX& scales, const VecX& query) {
    if (members.empty()) throw config_error("cluster_relevance: empty cluster");
    std::vector<double> s;
    s.reserve(members.size());
    for (const int i : members) s.push_back(scales[i]);
    std::sort(s.begin(), s.end());
    const std::size_t k = s.size();
    const double median = k % 2 ? s[k / 2] : 0.5 * (s[k / 2 - 1] + s[k / 2]);

    double acc = 0;
    for (const int i : members) {
        const double gate = 2.0 / (1.0 + std::exp(std::abs(scales[i] - median) / kGateTemperature));
        acc += clip.col(i).dot(query) * gate;
    }
    return acc / static_cast<double>(members.size());
}

struct DecodedInstance {
    std::vector<int> members;     // ascending Gaussian indices
    int stage1_cluster = -1;
    double relevance = 0;
};

struct InstanceDecodeResult {
    std::vector<int> labels;  // per Gaussian; -1 = noise / unselected
    std::vector<DecodedInstance> clusters;
    std::map<int, std::vector<int>> provenance;  // stage1 id -> final instance ids
};

/// Two-stage decode: HDBSCAN over instance embeddings, optional relevance
/// filtering against a query, then DBSCAN refinement in 3D per cluster.
/// Spatially disjoint subclusters become separate instances; spatial noise is
/// discarded. Final labels are ordered by smallest member index.
inline InstanceDecodeResult decode_instances(const GaussianScene& scene,
                                             const HashFieldStack& stack, const DecodeConfig& cfg,
                                             const VecX* query = nullptr) {
    cfg.validate();
    const int n = static_cast<int>(scene.size());
    InstanceDecodeResult out;
    out.labels.assign(n, -1);
    if (n == 0) return out;

    std::vector<Vec3> positions(n);
    for (int i = 0; i < n; ++i) positions[i] = scene.primitives[i].position;
    const FieldEval ev = evaluate_fields(stack, positions);

    FeatureRows inst(n, stack.cfg.d_inst);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < stack.cfg.d_inst; ++c) inst.row(i)[c] = ev.inst(c, i);

    const auto [stage1_labels, hierarchy] =
        hdbscan(inst, cfg.min_cluster_size, cfg.min_samples, cfg.extraction);
    (void)hierarchy;
    int stage1_count = 0;
    for (const int l : stage1_labels) stage1_count = std::max(stage1_count, l + 1);
    std::vector<std::vector<int>> stage1(stage1_count);
    for (int i = 0; i < n; ++i)
        if (stage1_labels[i] >= 0) stage1[stage1_labels[i]].push_back(i);

    const double eps = cfg.dbscan_eps > 0 ? cfg.dbscan_eps : auto_dbscan_eps(positions);

    std::vector<DecodedInstance> instances;
    for (int c = 0; c < stage1_count; ++c) {
        const auto& members = stage1[c];
        if (members.empty()) continue;
        double rel = 0;
        if (query) {
            rel = cluster_relevance(members, ev.clip, ev.scale, *query);
            if (rel <= cfg.relevance_threshold) continue;
        }
        if (!cfg.spatial_refinement) {
            DecodedInstance inst_rec;
            inst_rec.members = members;
            inst_rec.stage1_cluster = c;
            inst_rec.relevance = rel;
            instances.push_back(std::move(inst_rec));
            continue;
        }
        FeatureRows pts(static_cast<int>(members.size()), 3);
        for (std::size_t i = 0; i < members.size(); ++i)
            for (int a = 0; a < 3; ++a) pts.row(static_cast<int>(i))[a] = positions[members[i]][a];
        const auto sub = dbscan(pts, eps, cfg.dbscan_min_pts);
        int sub_count = 0;
        for (const int l : sub) sub_count = std::max(sub_count, l + 1);
        for (int s = 0; s < sub_count; ++s) {
            DecodedInstance inst_rec;
            inst_rec.stage1_cluster = c;
            inst_rec.relevance = rel;
            for (std::size_t i = 0; i < members.size(); ++i)
                if (sub[i] == s) inst_rec.members.push_back(members[i]);
            instances.push_back(std::move(inst_rec));
        }
    }

    std::sort(instances.begin(), instances.end(), [](const auto& a, const auto& b) {
        return a.members.front() < b.members.front();
    });
    for (std::size_t k = 0; k < instances.size(); ++k) {
        for (const int i : instances[k].members) out.labels[i] = static_cast<int>(k);
        out.provenance[instances[k].stage1_cluster].push_back(static_cast<int>(k));
    }
    out.clusters = std::move(instances);
    return out;
}

inline void write_decode_result(const InstanceDecodeResult& res, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    for (std::size_t i = 0; i < res.labels.size(); ++i) f << i << " " << res.labels[i] << "\n";
    f << "# cluster_id size relevance stage1_id\n";
    for (std::size_t k = 0; k < res.clusters.size(); ++k)
        f << k << " " << res.clusters[k].members.size() << " "
          << format_double(res.clusters[k].relevance) << " " << res.clusters[k].stage1_cluster
          << "\n";
    if (!f) throw io_error("write failed: " + path);
}

}  // namespace splatsense
