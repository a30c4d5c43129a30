#pragma once

#include "splatsense/fields.hpp"
#include "splatsense/image_io.hpp"

#include <map>
#include <set>

namespace splatsense {

/// Synthetic stand-in for CLIP text/image embeddings: one unit vector per
/// concept, pairwise cosine similarity capped at generation.
struct ConceptTable {
    MatX embeddings;  // dim x count, unit columns
    std::vector<std::string> names;

    int size() const { return static_cast<int>(names.size()); }
    int dim() const { return static_cast<int>(embeddings.rows()); }
    int find(const std::string& name) const {
        for (int i = 0; i < size(); ++i)
            if (names[i] == name) return i;
        return -1;
    }
};

inline constexpr double kConceptMaxCosine = 0.3;

inline ConceptTable make_concept_table(int count, int dim, Rng& rng) {
    ConceptTable t;
    t.embeddings = MatX(dim, count);
    for (int k = 0; k < count; ++k) {
        for (int tries = 0;; ++tries) {
            if (tries > 100000) throw config_error("cannot sample concepts under the cosine cap");
            VecX v(dim);
            for (int c = 0; c < dim; ++c) v[c] = normal(rng);
            v.normalize();
            bool ok = true;
            for (int j = 0; j < k && ok; ++j) ok = t.embeddings.col(j).dot(v) <= kConceptMaxCosine;
            if (ok) {
                t.embeddings.col(k) = v;
                break;
            }
        }
        t.names.push_back("concept_" + std::to_string(k));
    }
    return t;
}

inline void save_concept_table(const ConceptTable& t, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << "#splatsense-concepts v1 count=" << t.size() << " dim=" << t.dim() << "\n";
    for (int k = 0; k < t.size(); ++k) {
        f << k << " " << t.names[k];
        for (int c = 0; c < t.dim(); ++c) f << " " << format_double(t.embeddings(c, k));
        f << "\n";
    }
    if (!f) throw io_error("write failed: " + path);
}

inline ConceptTable load_concept_table(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw io_error("empty file: " + path);
    const std::size_t count = detail::parse_header_count(line, "#splatsense-concepts v1");
    const auto dpos = line.find("dim=");
    if (dpos == std::string::npos) throw io_error(path + ": header missing dim= field");
    const int dim = std::stoi(line.substr(dpos + 4));

    ConceptTable t;
    t.embeddings = MatX(dim, count);
    std::size_t record = 0;
    while (std::getline(f, line)) {
        const auto toks = detail::split_tokens(line);
        if (toks.empty()) continue;
        if (toks.size() != static_cast<std::size_t>(dim) + 2)
            throw io_error(path + ": record " + std::to_string(record) + ": expected " +
                           std::to_string(dim + 2) + " fields");
        if (record >= count) throw io_error(path + ": more records than header count");
        t.names.push_back(toks[1]);
        for (int c = 0; c < dim; ++c)
            t.embeddings(c, record) = detail::parse_finite(toks[c + 2], "embedding", record);
        ++record;
    }
    if (record != count) throw io_error(path + ": header count mismatch");
    return t;
}

/// Per-view supervision: instance masks, their concepts, multi-scale language
/// target maps, dense regularization maps and photometric targets.
struct SupervisionSet {
    std::vector<Camera> cameras;
    std::vector<LabelImage> masks;
    std::vector<std::map<int, int>> mask_concepts;            // per view: label -> concept id
    std::vector<std::vector<FeatureMap>> language_targets;    // [view][scale]
    std::vector<FeatureMap> reg_targets;                      // per view
    std::vector<FeatureMap> rgb_targets;                      // per view

    int view_count() const { return static_cast<int>(cameras.size()); }
};

struct SceneSpec {
    int objects = 8;
    int concepts = 4;
    int views = 24;
    int height = 64, width = 64;
    int total_splats = 2500;
    int min_object_splats = 30, max_object_splats = 200;
    double object_region_radius = 1.55;
    double min_center_distance = 0.85;
    double object_radius_min = 0.26, object_radius_max = 0.40;
    double shell_radius = 8.0;
    double camera_radius = 4.0;
    double focal_factor = 0.8;  // focal length = factor * width
    int d_clip = 32;
    int d_reg = 16;
    int scale_levels = 3;
    int base_window = 8;        // box-filter base window w0, pixels
    double reg_noise = 0.05;
};

inline constexpr double kMaskCoverageThreshold = 0.5;

/// Ground-truth masks: per-object indicator channels composited and argmaxed
/// wherever accumulated alpha exceeds the coverage threshold. Channel 0
/// carries the background splats so occluded objects do not leak through.
inline LabelImage ground_truth_masks(const GaussianScene& scene, const Camera& cam,
                                     int object_count, int threads = 1) {
    FeatureRows ind(static_cast<int>(scene.size()), object_count + 1);
    for (std::size_t i = 0; i < scene.size(); ++i)
        ind.row(static_cast<int>(i))[scene.gt_instance_label[i]] = 1.0;
    const FeatureMap m = render(scene, cam, ind, threads);
    LabelImage out(cam.height, cam.width);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            if (m.alpha_at(y, x) <= kMaskCoverageThreshold) continue;
            const double* v = m.at(y, x);
            int best = 0;
            for (int k = 1; k <= object_count; ++k)
                if (v[k] > v[best]) best = k;
            out.at(y, x) = best;
        }
    return out;
}

/// Hybrid multi-scale language target maps: level 0 assigns each pixel its
/// mask's concept embedding; level s box-filters level 0 with a window of
/// (2s+1)*w0 pixels and renormalizes nonzero pixels to unit length.
inline std::vector<FeatureMap> build_language_targets(const LabelImage& mask,
                                                      const std::map<int, int>& mask_concepts,
                                                      const ConceptTable& concepts, int levels,
                                                      int base_window = 8) {
    if (levels < 1) throw config_error("language targets need at least one scale level");
    const int h = mask.height, w = mask.width, d = concepts.dim();
    std::vector<FeatureMap> out;
    out.reserve(levels);
    FeatureMap level0(h, w, d);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int label = mask.at(y, x);
            if (label == 0) continue;
            const auto it = mask_concepts.find(label);
            if (it == mask_concepts.end())
                throw config_error("mask label " + std::to_string(label) + " has no concept");
            double* dst = level0.at(y, x);
            for (int c = 0; c < d; ++c) dst[c] = concepts.embeddings(c, it->second);
        }
    out.push_back(level0);

    // Summed-area table over level 0 (shared by all filter windows).
    std::vector<double> sat(static_cast<std::size_t>(h + 1) * (w + 1) * d, 0.0);
    const auto sat_at = [&](int y, int x) {
        return sat.data() + (static_cast<std::size_t>(y) * (w + 1) + x) * d;
    };
    for (int y = 1; y <= h; ++y)
        for (int x = 1; x <= w; ++x) {
            double* dst = sat_at(y, x);
            const double* up = sat_at(y - 1, x);
            const double* left = sat_at(y, x - 1);
            const double* diag = sat_at(y - 1, x - 1);
            const double* src = level0.at(y - 1, x - 1);
            for (int c = 0; c < d; ++c) dst[c] = src[c] + up[c] + left[c] - diag[c];
        }

    for (int s = 1; s < levels; ++s) {
        const int half = ((2 * s + 1) * base_window) / 2;
        FeatureMap lvl(h, w, d);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int y0 = std::max(0, y - half), y1 = std::min(h - 1, y + half);
                const int x0 = std::max(0, x - half), x1 = std::min(w - 1, x + half);
                const double* a = sat_at(y1 + 1, x1 + 1);
                const double* b = sat_at(y0, x1 + 1);
                const double* c2 = sat_at(y1 + 1, x0);
                const double* dd = sat_at(y0, x0);
                double* dst = lvl.at(y, x);
                double norm2 = 0;
                for (int c = 0; c < d; ++c) {
                    dst[c] = a[c] - b[c] - c2[c] + dd[c];
                    norm2 += dst[c] * dst[c];
                }
                const double norm = std::sqrt(norm2);
                if (norm > detail::kNormFloor)
                    for (int c = 0; c < d; ++c) dst[c] /= norm;
                else
                    for (int c = 0; c < d; ++c) dst[c] = 0.0;
            }
        out.push_back(std::move(lvl));
    }
    return out;
}

/// Dense regularization maps: each instance gets a fixed random vector (stable
/// across views) plus per-pixel noise; background pixels stay exactly zero,
/// giving sharp discontinuities at instance boundaries.
inline std::vector<FeatureMap> build_reg_targets(const std::vector<LabelImage>& masks, int d_reg,
                                                 double noise_sigma, std::uint64_t seed) {
    int max_label = 0;
    for (const auto& m : masks)
        for (const int l : m.labels) max_label = std::max(max_label, l);
    Rng base_rng(seed);
    MatX base(d_reg, max_label + 1);
    base.setZero();
    for (int k = 1; k <= max_label; ++k)
        for (int c = 0; c < d_reg; ++c) base(c, k) = normal(base_rng);

    std::vector<FeatureMap> out;
    out.reserve(masks.size());
    for (std::size_t v = 0; v < masks.size(); ++v) {
        const auto& m = masks[v];
        FeatureMap map(m.height, m.width, d_reg);
        Rng rng(seed + 1000003ull * (v + 1));
        for (int y = 0; y < m.height; ++y)
            for (int x = 0; x < m.width; ++x) {
                const int label = m.at(y, x);
                if (label == 0) continue;
                double* dst = map.at(y, x);
                for (int c = 0; c < d_reg; ++c) dst[c] = base(c, label) + normal(rng, 0, noise_sigma);
            }
        out.push_back(std::move(map));
    }
    return out;
}

struct SyntheticBundle {
    GaussianScene scene_gt;
    GaussianScene scene_init;  // perturbed copy used to start training
    SupervisionSet supervision;
    ConceptTable concepts;
};

/// Builds the full synthetic benchmark: blob objects on a distant background
/// shell, orbiting cameras, ground-truth masks, language / regularization /
/// photometric targets and the concept table. Fully determined by the seed.
inline SyntheticBundle generate_synthetic(const SceneSpec& spec, std::uint64_t seed,
                                          int threads = 1) {
    if (spec.objects < 1 || spec.views < 1) throw config_error("need at least 1 object and 1 view");
    if (spec.objects * spec.min_object_splats > spec.total_splats)
        throw config_error("infeasible spec: more object splats than total splats");
    if (spec.concepts < 1 || spec.concepts > spec.objects)
        throw config_error("concept count must be in [1, objects]");

    Rng rng(seed);
    SyntheticBundle b;
    b.concepts = make_concept_table(spec.concepts, spec.d_clip, rng);

    // Object centers: rejected until pairwise separated.
    std::vector<Vec3> centers;
    for (int k = 0; k < spec.objects; ++k) {
        bool placed = false;
        for (int tries = 0; tries < 20000 && !placed; ++tries) {
            Vec3 c(normal(rng), normal(rng), normal(rng));
            c = c.normalized() * std::cbrt(uniform(rng, 0.0, 1.0)) * spec.object_region_radius;
            placed = true;
            for (const auto& o : centers)
                if ((o - c).norm() < spec.min_center_distance) {
                    placed = false;
                    break;
                }
            if (placed) centers.push_back(c);
        }
        if (!placed) throw config_error("cannot place objects with the requested separation");
    }

    std::vector<int> object_splats(spec.objects);
    int object_total = 0;
    for (int k = 0; k < spec.objects; ++k) {
        object_splats[k] = uniform_int(rng, spec.min_object_splats, spec.max_object_splats);
        object_total += object_splats[k];
    }
    if (object_total > spec.total_splats)
        throw config_error("infeasible spec: drawn object splats exceed total splats");

    auto& scene = b.scene_gt;
    for (int k = 0; k < spec.objects; ++k) {
        const double radius = uniform(rng, spec.object_radius_min, spec.object_radius_max);
        const Vec3 base_color(uniform(rng, 0.15, 0.95), uniform(rng, 0.15, 0.95),
                              uniform(rng, 0.15, 0.95));
        for (int i = 0; i < object_splats[k]; ++i) {
            GaussianPrimitive p;
            p.position = centers[k] + Vec3(normal(rng), normal(rng), normal(rng)) * (radius / 2.0);
            Vec4 q(normal(rng), normal(rng), normal(rng), normal(rng));
            p.rotation = q.normalized();
            for (int a = 0; a < 3; ++a)
                p.log_scale[a] = std::log(uniform(rng, 0.035, 0.075));
            p.opacity_logit = uniform(rng, 1.2, 3.0);
            for (int a = 0; a < 3; ++a)
                p.color[a] = std::clamp(base_color[a] + normal(rng, 0, 0.03), 0.0, 1.0);
            scene.primitives.push_back(p);
            scene.gt_instance_label.push_back(k + 1);
            scene.gt_concept_id.push_back(k % spec.concepts);
        }
    }
    const int background = spec.total_splats - object_total;
    for (int i = 0; i < background; ++i) {
        GaussianPrimitive p;
        Vec3 dir(normal(rng), normal(rng), normal(rng));
        p.position = dir.normalized() * spec.shell_radius * (1.0 + uniform(rng, -0.03, 0.03));
        Vec4 q(normal(rng), normal(rng), normal(rng), normal(rng));
        p.rotation = q.normalized();
        for (int a = 0; a < 3; ++a) p.log_scale[a] = std::log(uniform(rng, 0.3, 0.6));
        p.opacity_logit = uniform(rng, 0.5, 2.0);
        const Vec3 base(0.35, 0.38, 0.42);
        for (int a = 0; a < 3; ++a)
            p.color[a] = std::clamp(base[a] + normal(rng, 0, 0.08), 0.0, 1.0);
        scene.primitives.push_back(p);
        scene.gt_instance_label.push_back(0);
        scene.gt_concept_id.push_back(-1);
    }

    // Orbiting cameras on three elevation rings.
    auto& sup = b.supervision;
    const double focal = spec.focal_factor * spec.width;
    const double elevations[3] = {-0.42, 0.12, 0.60};
    for (int v = 0; v < spec.views; ++v) {
        const int ring = v % 3;
        const int in_ring = v / 3;
        const int ring_count = (spec.views + 2 - ring) / 3;
        const double az = 2.0 * M_PI * in_ring / std::max(1, ring_count) + 0.35 * ring;
        const double el = elevations[ring];
        const Vec3 eye(spec.camera_radius * std::cos(el) * std::cos(az),
                       spec.camera_radius * std::cos(el) * std::sin(az),
                       spec.camera_radius * std::sin(el));
        sup.cameras.push_back(
            look_at_camera(eye, Vec3::Zero(), Vec3(0, 0, 1), focal, focal, spec.width, spec.height));
    }

    for (const auto& cam : sup.cameras) {
        sup.masks.push_back(ground_truth_masks(scene, cam, spec.objects, threads));
        sup.rgb_targets.push_back(render(scene, cam, color_attributes(scene), threads));
    }
    std::map<int, int> concept_of_label;
    for (int k = 0; k < spec.objects; ++k) concept_of_label[k + 1] = k % spec.concepts;
    sup.mask_concepts.assign(sup.cameras.size(), concept_of_label);
    for (std::size_t v = 0; v < sup.cameras.size(); ++v)
        sup.language_targets.push_back(build_language_targets(
            sup.masks[v], sup.mask_concepts[v], b.concepts, spec.scale_levels, spec.base_window));
    sup.reg_targets = build_reg_targets(sup.masks, spec.d_reg, spec.reg_noise, seed ^ 0x9e3779b9ull);

    // Training starts from a perturbed copy: appearance reset, geometry jittered.
    b.scene_init = scene;
    for (auto& p : b.scene_init.primitives) {
        p.position += Vec3(normal(rng), normal(rng), normal(rng)) * 0.02;
        for (int a = 0; a < 3; ++a) p.log_scale[a] += normal(rng, 0, 0.15);
        for (int a = 0; a < 4; ++a) p.rotation[a] += normal(rng, 0, 0.1);
        p.opacity_logit = 1.0 + normal(rng, 0, 0.2);
        for (int a = 0; a < 3; ++a)
            p.color[a] = std::clamp(0.5 + normal(rng, 0, 0.08), 0.02, 0.98);
    }
    return b;
}

// ---------------------------------------------------------------------------
// FeatureMap binary container: magic SPLATFMAP1, u32 header
// (view_count, H, W, D, scale_count), f32 payload view-major then
// scale, row, column, channel.
// ---------------------------------------------------------------------------

inline constexpr char kFmapMagic[10] = {'S', 'P', 'L', 'A', 'T', 'F', 'M', 'A', 'P', '1'};

inline void write_feature_maps(const std::string& path,
                               const std::vector<std::vector<FeatureMap>>& views) {
    if (views.empty() || views[0].empty())
        throw config_error("feature map container needs at least one view and scale");
    const int h = views[0][0].height, w = views[0][0].width, d = views[0][0].dim;
    const std::size_t scales = views[0].size();
    for (const auto& v : views) {
        if (v.size() != scales) throw config_error("inconsistent scale count across views");
        for (const auto& m : v)
            if (m.height != h || m.width != w || m.dim != d)
                throw config_error("inconsistent map dimensions across views");
    }
    detail::BinWriter out(path);
    out.f.write(kFmapMagic, sizeof(kFmapMagic));
    out.u32(static_cast<std::uint32_t>(views.size()));
    out.u32(static_cast<std::uint32_t>(h));
    out.u32(static_cast<std::uint32_t>(w));
    out.u32(static_cast<std::uint32_t>(d));
    out.u32(static_cast<std::uint32_t>(scales));
    for (const auto& v : views)
        for (const auto& m : v) out.f32_array(m.data.data(), m.data.size());
    if (!out.f) throw io_error("write failed: " + path);
}

inline void write_feature_maps(const std::string& path, const std::vector<FeatureMap>& views) {
    std::vector<std::vector<FeatureMap>> nested;
    nested.reserve(views.size());
    for (const auto& m : views) nested.push_back({m});
    write_feature_maps(path, nested);
}

inline std::vector<std::vector<FeatureMap>> read_feature_maps(const std::string& path) {
    detail::BinReader r(path);
    char magic[sizeof(kFmapMagic)];
    r.raw(magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kFmapMagic, sizeof(magic)) != 0)
        throw io_error(path + ": bad magic at byte offset 0 (expected SPLATFMAP1)");
    const std::uint32_t views = r.u32("view count");
    const std::uint32_t h = r.u32("height");
    const std::uint32_t w = r.u32("width");
    const std::uint32_t d = r.u32("dim");
    const std::uint32_t scales = r.u32("scale count");
    if (h < 1 || w < 1 || d < 1 || scales < 1)
        throw io_error(path + ": invalid dimensions in header");
    std::vector<std::vector<FeatureMap>> out(views);
    for (std::uint32_t v = 0; v < views; ++v)
        for (std::uint32_t s = 0; s < scales; ++s) {
            FeatureMap m(static_cast<int>(h), static_cast<int>(w), static_cast<int>(d));
            r.f32_array(m.data.data(), m.data.size(), "payload");
            out[v].push_back(std::move(m));
        }
    char extra;
    if (r.f.read(&extra, 1))
        throw io_error(path + ": trailing bytes after byte offset " + std::to_string(r.offset));
    return out;
}

/// Import path for externally computed maps; the channel count must match the
/// configured dimension.
inline std::vector<std::vector<FeatureMap>> import_feature_maps(const std::string& path,
                                                                int expected_dim) {
    auto maps = read_feature_maps(path);
    if (!maps.empty() && !maps[0].empty() && maps[0][0].dim != expected_dim)
        throw io_error(path + ": dimension mismatch: file declares D=" +
                       std::to_string(maps[0][0].dim) + " but configuration expects D=" +
                       std::to_string(expected_dim));
    return maps;
}

inline void write_mask_sidecar(const std::string& path, const std::map<int, int>& mask_concepts,
                               const ConceptTable& concepts) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    for (const auto& [label, concept] : mask_concepts)
        f << label << " " << concepts.names[concept] << "\n";
    if (!f) throw io_error("write failed: " + path);
}

inline std::map<int, std::string> read_mask_sidecar(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open: " + path);
    std::map<int, std::string> out;
    std::string line;
    std::size_t record = 0;
    while (std::getline(f, line)) {
        const auto toks = detail::split_tokens(line);
        if (toks.empty()) continue;
        if (toks.size() != 2)
            throw io_error(path + ": record " + std::to_string(record) + ": expected 'id name'");
        out[std::stoi(toks[0])] = toks[1];
        ++record;
    }
    return out;
}

}  // namespace splatsense
