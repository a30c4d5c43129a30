#pragma once

#include "splatsense/losses.hpp"
#include "splatsense/supervision.hpp"

namespace splatsense {

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsGaussians = 1e-15;  // splatting convention
inline constexpr double kAdamEpsFields = 1e-8;

struct AdamState {
    std::vector<double> m, v;
    void init(std::size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
    }
};

namespace detail {

/// One Adam step for a scalar. Zero gradients are skipped entirely (sparse
/// apply), so untouched parameters and their moments never move.
inline void adam_scalar(double& p, double g, double& m, double& v, double lr, double bc1,
                        double bc2, double eps) {
    if (g == 0.0) return;
    m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
    v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g * g;
    p -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
}

inline void adam_apply(double* p, const double* g, AdamState& st, std::size_t n, double lr,
                       double bc1, double bc2, double eps, std::size_t state_offset = 0) {
    for (std::size_t i = 0; i < n; ++i)
        adam_scalar(p[i], g[i], st.m[state_offset + i], st.v[state_offset + i], lr, bc1, bc2, eps);
}

inline void adam_apply_rows(std::vector<double>& p, const std::vector<double>& g,
                            const std::vector<std::uint32_t>& rows, int row_width, AdamState& st,
                            double lr, double bc1, double bc2, double eps) {
    for (const auto r : rows) {
        const std::size_t base = static_cast<std::size_t>(r) * row_width;
        for (int c = 0; c < row_width; ++c)
            adam_scalar(p[base + c], g[base + c], st.m[base + c], st.v[base + c], lr, bc1, bc2,
                        eps);
    }
}

}  // namespace detail

enum class TrainVariant { full, no_mhe, no_joint };

inline const char* variant_name(TrainVariant v) {
    switch (v) {
        case TrainVariant::full: return "full";
        case TrainVariant::no_mhe: return "no_mhe";
        case TrainVariant::no_joint: return "no_joint";
    }
    return "?";
}

struct TrainConfig {
    int iterations = 5000;
    double lr_gaussians = 0.0025;
    double lr_fields = 0.001;
    double warmup_rgb_fraction = 0.2;
    LossWeights weights;
    bool geometry_from_semantics = true;
    bool train_opacity = true;
    std::uint64_t seed = 1;
    int views_per_step = 1;
    TrainVariant variant = TrainVariant::full;
    int threads = 1;
    int checkpoint_every = 0;          // 0 disables mid-run checkpoints
    std::string checkpoint_dir;

    int warmup_steps() const { return static_cast<int>(warmup_rgb_fraction * iterations); }

    void validate() const {
        if (iterations < 1) throw config_error("iterations must be >= 1");
        if (lr_gaussians <= 0 || lr_fields <= 0) throw config_error("learning rates must be positive");
        if (warmup_rgb_fraction < 0 || warmup_rgb_fraction >= 1)
            throw config_error("warmup_rgb_fraction must lie in [0, 1)");
        if (views_per_step < 1) throw config_error("views_per_step must be >= 1");
        weights.validate();
    }
};

/// Table-3 style training variants. no_mhe swaps the hash encoding for free
/// per-Gaussian feature tables; no_joint freezes every Gaussian parameter once
/// the photometric warmup ends.
inline TrainConfig ablation_variant(const TrainConfig& base, const std::string& name) {
    TrainConfig cfg = base;
    if (name == "full")
        cfg.variant = TrainVariant::full;
    else if (name == "no_mhe")
        cfg.variant = TrainVariant::no_mhe;
    else if (name == "no_joint")
        cfg.variant = TrainVariant::no_joint;
    else
        throw config_error("unknown ablation variant: " + name);
    return cfg;
}

inline void scene_bbox(const GaussianScene& scene, Vec3& bmin, Vec3& bmax, double margin = 0.02) {
    if (scene.size() == 0) throw config_error("empty scene has no bounding box");
    bmin = bmax = scene.primitives[0].position;
    for (const auto& p : scene.primitives) {
        bmin = bmin.cwiseMin(p.position);
        bmax = bmax.cwiseMax(p.position);
    }
    const Vec3 pad = (bmax - bmin) * margin + Vec3::Constant(1e-6);
    bmin -= pad;
    bmax += pad;
}

inline HashFieldStack make_stack_for_variant(FieldStackConfig cfg, TrainVariant variant,
                                             const GaussianScene& scene, std::uint64_t seed) {
    Vec3 bmin, bmax;
    scene_bbox(scene, bmin, bmax);
    if (variant == TrainVariant::no_mhe) {
        cfg.encoding = FieldEncoding::per_gaussian;
        cfg.point_count = static_cast<int>(scene.size());
    }
    return init_field_stack(cfg, bmin, bmax, seed);
}

struct LossLogRow {
    int step = 0;
    double rgb = 0, clip = 0, pos = 0, neg = 0, reg = 0, total = 0;
};

inline void write_loss_log(const std::vector<LossLogRow>& log, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << "step,rgb,clip,pos,neg,reg,total\n";
    for (const auto& r : log)
        f << r.step << "," << format_double(r.rgb) << "," << format_double(r.clip) << ","
          << format_double(r.pos) << "," << format_double(r.neg) << "," << format_double(r.reg)
          << "," << format_double(r.total) << "\n";
    if (!f) throw io_error("write failed: " + path);
}

struct TrainResult {
    GaussianScene scene;
    HashFieldStack stack;
    std::vector<LossLogRow> log;
};

namespace detail {

struct SceneGrads {
    std::vector<double> pos, rot, scale, oplogit, color;
    void init(std::size_t n) {
        pos.assign(3 * n, 0.0);
        rot.assign(4 * n, 0.0);
        scale.assign(3 * n, 0.0);
        oplogit.assign(n, 0.0);
        color.assign(3 * n, 0.0);
    }
    void clear() {
        std::fill(pos.begin(), pos.end(), 0.0);
        std::fill(rot.begin(), rot.end(), 0.0);
        std::fill(scale.begin(), scale.end(), 0.0);
        std::fill(oplogit.begin(), oplogit.end(), 0.0);
        std::fill(color.begin(), color.end(), 0.0);
    }
    void add_render_grads(const RenderGrads& g, bool geometry, bool color_from_attrs) {
        const std::size_t n = g.d_opacity_logit.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (geometry) {
                for (int a = 0; a < 3; ++a) pos[3 * i + a] += g.d_position[i][a];
                for (int a = 0; a < 4; ++a) rot[4 * i + a] += g.d_rotation[i][a];
                for (int a = 0; a < 3; ++a) scale[3 * i + a] += g.d_log_scale[i][a];
                oplogit[i] += g.d_opacity_logit[i];
            }
            if (color_from_attrs)
                for (int a = 0; a < 3; ++a) color[3 * i + a] += g.d_attributes.row(i)[a];
        }
    }
};

}  // namespace detail

/// Joint optimization of scene geometry and both feature fields. The first
/// warmup fraction of steps trains photometrically only; afterwards all loss
/// terms are active. One uniformly sampled view per step (seeded).
inline TrainResult train(GaussianScene scene, HashFieldStack stack, const SupervisionSet& sup,
                         const TrainConfig& cfg) {
    cfg.validate();
    if (sup.view_count() < 1) throw config_error("training needs at least one supervision view");
    if (stack.cfg.encoding == FieldEncoding::per_gaussian &&
        stack.cfg.point_count != static_cast<int>(scene.size()))
        throw config_error("per-gaussian stack does not match scene size");

    const std::size_t n = scene.size();
    const int dc = stack.cfg.d_clip, di = stack.cfg.d_inst, dr = stack.cfg.d_reg;
    const int d_sem = dc + 1 + di + dr;
    const int warmup = cfg.warmup_steps();

    Rng rng(cfg.seed);
    std::vector<LossLogRow> log;
    log.reserve(cfg.iterations);

    // Optimizer state.
    AdamState st_pos, st_rot, st_scale, st_oplogit, st_color;
    st_pos.init(3 * n);
    st_rot.init(4 * n);
    st_scale.init(3 * n);
    st_oplogit.init(n);
    st_color.init(3 * n);
    detail::SceneGrads sg;
    sg.init(n);

    FieldGrads fg;
    fg.init(stack);
    AdamState st_lang_grid, st_inst_grid, st_free_lang, st_free_inst;
    if (stack.cfg.encoding == FieldEncoding::hash_grid) {
        st_lang_grid.init(stack.language_grid.tables.size());
        if (!stack.cfg.share_grids) st_inst_grid.init(stack.instance_grid.tables.size());
    } else {
        st_free_lang.init(stack.free_language.v.size());
        if (!stack.cfg.share_grids) st_free_inst.init(stack.free_instance.v.size());
    }
    struct HeadState {
        AdamState w1, b1, w2, b2;
        void init(const Mlp& m) {
            w1.init(static_cast<std::size_t>(m.hidden) * m.in);
            b1.init(m.hidden);
            w2.init(static_cast<std::size_t>(m.out) * m.hidden);
            b2.init(m.out);
        }
    };
    HeadState st_lang_head, st_inst_head, st_reg_head;
    st_lang_head.init(stack.language_head);
    st_inst_head.init(stack.instance_head);
    st_reg_head.init(stack.reg_head);

    std::vector<Vec3> positions(n);

    for (int step = 0; step < cfg.iterations; ++step) {
        const bool in_warmup = step < warmup;
        const bool frozen_geometry = cfg.variant == TrainVariant::no_joint && !in_warmup;

        sg.clear();
        if (!in_warmup) fg.clear(stack);
        LossParts parts;
        double pos_part = 0, neg_part = 0;

        for (int vs = 0; vs < cfg.views_per_step; ++vs) {
            const int view = uniform_int(rng, 0, sup.view_count() - 1);
            const Camera& cam = sup.cameras[view];

            if (in_warmup) {
                const FeatureRows attrs = color_attributes(scene);
                const FeatureMap rgb = render(scene, cam, attrs, cfg.threads);
                FeatureMap g_rgb;
                parts.rgb += rgb_loss(rgb, sup.rgb_targets[view], &g_rgb);
                const RenderGrads grads = render_backward(scene, cam, attrs, g_rgb, cfg.threads);
                sg.add_render_grads(grads, /*geometry=*/true, /*color=*/true);
                continue;
            }

            for (std::size_t i = 0; i < n; ++i) positions[i] = scene.primitives[i].position;
            const FieldEval ev = evaluate_fields(stack, positions);

            FeatureRows attrs(static_cast<int>(n), 3 + d_sem);
            for (std::size_t i = 0; i < n; ++i) {
                double* row = attrs.row(static_cast<int>(i));
                for (int a = 0; a < 3; ++a) row[a] = scene.primitives[i].color[a];
                for (int c = 0; c < dc; ++c) row[3 + c] = ev.clip(c, i);
                row[3 + dc] = ev.scale[i];
                for (int c = 0; c < di; ++c) row[3 + dc + 1 + c] = ev.inst(c, i);
                for (int c = 0; c < dr; ++c) row[3 + dc + 1 + di + c] = ev.reg(c, i);
            }
            const FeatureMap full = render(scene, cam, attrs, cfg.threads);

            // Split the stacked map into per-loss views (alpha shared).
            FeatureMap rgb(cam.height, cam.width, 3), lang(cam.height, cam.width, dc),
                scl(cam.height, cam.width, 1), inst(cam.height, cam.width, di),
                regm(cam.height, cam.width, dr);
            rgb.accumulated_alpha = full.accumulated_alpha;
            lang.accumulated_alpha = full.accumulated_alpha;
            for (std::size_t p = 0; p < full.pixel_count(); ++p) {
                const double* src = full.data.data() + p * (3 + d_sem);
                for (int c = 0; c < 3; ++c) rgb.data[p * 3 + c] = src[c];
                for (int c = 0; c < dc; ++c) lang.data[p * dc + c] = src[3 + c];
                scl.data[p] = src[3 + dc];
                for (int c = 0; c < di; ++c) inst.data[p * di + c] = src[3 + dc + 1 + c];
                for (int c = 0; c < dr; ++c) regm.data[p * dr + c] = src[3 + dc + 1 + di + c];
            }

            FeatureMap g_rgb, g_lang, g_scale, g_inst, g_reg;
            parts.rgb += rgb_loss(rgb, sup.rgb_targets[view], &g_rgb);
            parts.clip += language_loss(lang, scl, sup.language_targets[view],
                                        cfg.weights.huber_delta, &g_lang, &g_scale);
            const InstanceLossResult il =
                instance_loss(inst, sup.masks[view], cfg.weights.gamma, cfg.weights.w_neg, &g_inst);
            pos_part += il.pos;
            neg_part += il.neg;
            parts.instance += il.total(cfg.weights.w_neg);
            parts.reg += reg_loss(regm, sup.reg_targets[view], cfg.weights.huber_delta, &g_reg);

            // Photometric pass: color attributes only.
            if (!frozen_geometry) {
                FeatureRows cattrs = color_attributes(scene);
                const RenderGrads ga = render_backward(scene, cam, cattrs, g_rgb, cfg.threads);
                sg.add_render_grads(ga, /*geometry=*/true, /*color=*/true);
            }

            // Semantic pass: stacked semantic channels with loss weights folded in.
            FeatureRows sattrs(static_cast<int>(n), d_sem);
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = attrs.row(static_cast<int>(i));
                double* dst = sattrs.row(static_cast<int>(i));
                for (int c = 0; c < d_sem; ++c) dst[c] = row[3 + c];
            }
            FeatureMap g_sem(cam.height, cam.width, d_sem);
            const double wl = cfg.weights.lambda_lang, wi = cfg.weights.lambda_inst,
                         wr = cfg.weights.lambda_reg;
            for (std::size_t p = 0; p < g_sem.pixel_count(); ++p) {
                double* dst = g_sem.data.data() + p * d_sem;
                for (int c = 0; c < dc; ++c) dst[c] = wl * g_lang.data[p * dc + c];
                dst[dc] = wl * g_scale.data[p];
                for (int c = 0; c < di; ++c) dst[dc + 1 + c] = wi * g_inst.data[p * di + c];
                for (int c = 0; c < dr; ++c) dst[dc + 1 + di + c] = wr * g_reg.data[p * dr + c];
            }
            const RenderGrads gb = render_backward(scene, cam, sattrs, g_sem, cfg.threads);
            const bool sem_to_geometry = cfg.geometry_from_semantics && !frozen_geometry;
            sg.add_render_grads(gb, sem_to_geometry, /*color=*/false);

            // Chain per-splat semantic attribute gradients through the heads/grids.
            MatX d_clip(dc, n), d_inst(di, n), d_reg(dr, n);
            VecX d_scale(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = gb.d_attributes.row(static_cast<int>(i));
                for (int c = 0; c < dc; ++c) d_clip(c, i) = row[c];
                d_scale[i] = row[dc];
                for (int c = 0; c < di; ++c) d_inst(c, i) = row[dc + 1 + c];
                for (int c = 0; c < dr; ++c) d_reg(c, i) = row[dc + 1 + di + c];
            }
            evaluate_fields_backward(stack, positions, ev, d_clip, d_scale, d_inst, d_reg, fg,
                                     sem_to_geometry);
            if (sem_to_geometry)
                for (std::size_t i = 0; i < n; ++i)
                    for (int a = 0; a < 3; ++a) sg.pos[3 * i + a] += fg.d_position[i][a];
        }

        const double inv_views = 1.0 / cfg.views_per_step;
        parts.rgb *= inv_views;
        parts.clip *= inv_views;
        parts.instance *= inv_views;
        parts.reg *= inv_views;
        pos_part *= inv_views;
        neg_part *= inv_views;

        LossLogRow row;
        row.step = step;
        row.rgb = parts.rgb;
        row.clip = parts.clip;
        row.pos = pos_part;
        row.neg = neg_part;
        row.reg = parts.reg;
        try {
            row.total = total_loss(parts, cfg.weights);
        } catch (const numeric_error& e) {
            throw numeric_error("training aborted at step " + std::to_string(step) + ": " +
                                e.what());
        }
        log.push_back(row);

        const int t = step + 1;
        const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
        const double bc2 = 1.0 - std::pow(kAdamBeta2, t);

        if (!frozen_geometry) {
            const double scale_g = inv_views;  // average gradients over sampled views
            if (scale_g != 1.0) {
                for (auto& g : sg.pos) g *= scale_g;
                for (auto& g : sg.rot) g *= scale_g;
                for (auto& g : sg.scale) g *= scale_g;
                for (auto& g : sg.oplogit) g *= scale_g;
                for (auto& g : sg.color) g *= scale_g;
            }
            for (std::size_t i = 0; i < n; ++i) {
                auto& p = scene.primitives[i];
                detail::adam_apply(p.position.data(), &sg.pos[3 * i], st_pos, 3, cfg.lr_gaussians,
                                   bc1, bc2, kAdamEpsGaussians, 3 * i);
                detail::adam_apply(p.rotation.data(), &sg.rot[4 * i], st_rot, 4, cfg.lr_gaussians,
                                   bc1, bc2, kAdamEpsGaussians, 4 * i);
                detail::adam_apply(p.log_scale.data(), &sg.scale[3 * i], st_scale, 3,
                                   cfg.lr_gaussians, bc1, bc2, kAdamEpsGaussians, 3 * i);
                detail::adam_apply(p.color.data(), &sg.color[3 * i], st_color, 3, cfg.lr_gaussians,
                                   bc1, bc2, kAdamEpsGaussians, 3 * i);
                if (cfg.train_opacity)
                    detail::adam_scalar(p.opacity_logit, sg.oplogit[i], st_oplogit.m[i],
                                        st_oplogit.v[i], cfg.lr_gaussians, bc1, bc2,
                                        kAdamEpsGaussians);
            }
        }
        if (!in_warmup) {
            const auto apply_head = [&](Mlp& m, MlpGrads& g, HeadState& st) {
                if (cfg.views_per_step > 1) {
                    g.w1 *= inv_views;
                    g.b1 *= inv_views;
                    g.w2 *= inv_views;
                    g.b2 *= inv_views;
                }
                detail::adam_apply(m.w1.data(), g.w1.data(), st.w1, m.w1.size(), cfg.lr_fields,
                                   bc1, bc2, kAdamEpsFields);
                detail::adam_apply(m.b1.data(), g.b1.data(), st.b1, m.b1.size(), cfg.lr_fields,
                                   bc1, bc2, kAdamEpsFields);
                detail::adam_apply(m.w2.data(), g.w2.data(), st.w2, m.w2.size(), cfg.lr_fields,
                                   bc1, bc2, kAdamEpsFields);
                detail::adam_apply(m.b2.data(), g.b2.data(), st.b2, m.b2.size(), cfg.lr_fields,
                                   bc1, bc2, kAdamEpsFields);
            };
            apply_head(stack.language_head, fg.lang_head, st_lang_head);
            apply_head(stack.instance_head, fg.inst_head, st_inst_head);
            apply_head(stack.reg_head, fg.reg_head, st_reg_head);

            if (stack.cfg.encoding == FieldEncoding::hash_grid) {
                const int fpl = stack.cfg.grid.feats_per_level;
                if (cfg.views_per_step > 1) {
                    for (const auto r : fg.lang_grid.touched)
                        for (int c = 0; c < fpl; ++c)
                            fg.lang_grid.g[static_cast<std::size_t>(r) * fpl + c] *= inv_views;
                    if (!stack.cfg.share_grids)
                        for (const auto r : fg.inst_grid.touched)
                            for (int c = 0; c < fpl; ++c)
                                fg.inst_grid.g[static_cast<std::size_t>(r) * fpl + c] *= inv_views;
                }
                detail::adam_apply_rows(stack.language_grid.tables, fg.lang_grid.g,
                                        fg.lang_grid.touched, fpl, st_lang_grid, cfg.lr_fields,
                                        bc1, bc2, kAdamEpsFields);
                if (!stack.cfg.share_grids)
                    detail::adam_apply_rows(stack.instance_grid.tables, fg.inst_grid.g,
                                            fg.inst_grid.touched, fpl, st_inst_grid,
                                            cfg.lr_fields, bc1, bc2, kAdamEpsFields);
            } else {
                if (cfg.views_per_step > 1) {
                    for (auto& g : fg.d_free_lang.v) g *= inv_views;
                    for (auto& g : fg.d_free_inst.v) g *= inv_views;
                }
                detail::adam_apply(stack.free_language.v.data(), fg.d_free_lang.v.data(),
                                   st_free_lang, stack.free_language.v.size(), cfg.lr_fields, bc1,
                                   bc2, kAdamEpsFields);
                if (!stack.cfg.share_grids)
                    detail::adam_apply(stack.free_instance.v.data(), fg.d_free_inst.v.data(),
                                       st_free_inst, stack.free_instance.v.size(), cfg.lr_fields,
                                       bc1, bc2, kAdamEpsFields);
            }
        }

        if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
            (step + 1) % cfg.checkpoint_every == 0) {
            char tag[32];
            std::snprintf(tag, sizeof(tag), "%06d", step + 1);
            save_field_stack(stack, cfg.checkpoint_dir + "/checkpoint_" + tag + ".fields");
            save_scene(scene, cfg.checkpoint_dir + "/checkpoint_" + tag + ".scene");
        }
    }

    return {std::move(scene), std::move(stack), std::move(log)};
}

}  // namespace splatsense
