#pragma once

#include "splatsense/image_io.hpp"

#include <map>

namespace splatsense {

struct LossWeights {
    double lambda_lang = 0.5;
    double lambda_inst = 1.0;
    double lambda_reg = 0.5;
    double gamma = 1.0;
    double w_neg = 0.1;
    double huber_delta = 1.0;

    void validate() const {
        if (lambda_lang < 0 || lambda_inst < 0 || lambda_reg < 0 || w_neg < 0)
            throw config_error("loss weights must be nonnegative");
        if (gamma <= 0) throw config_error("margin gamma must be positive");
        if (huber_delta <= 0) throw config_error("huber_delta must be positive");
    }
};

inline double huber(double r, double delta) {
    const double a = std::abs(r);
    return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_derivative(double r, double delta) {
    if (r > delta) return delta;
    if (r < -delta) return -delta;
    return r;
}

namespace detail {

// 11-tap Gaussian window (sigma 1.5) used by the SSIM term, zero-padded at
// the borders as in the reference splatting implementation.
inline const std::vector<double>& ssim_kernel() {
    static const std::vector<double> k = [] {
        std::vector<double> v(11);
        double sum = 0;
        for (int i = 0; i < 11; ++i) {
            v[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (1.5 * 1.5));
            sum += v[i];
        }
        for (auto& x : v) x /= sum;
        return v;
    }();
    return k;
}

/// Separable correlation with the SSIM kernel, zero padding; `src` and `dst`
/// are H x W single-channel buffers.
inline void ssim_blur(const std::vector<double>& src, int h, int w, std::vector<double>& tmp,
                      std::vector<double>& dst) {
    const auto& k = ssim_kernel();
    tmp.assign(static_cast<std::size_t>(h) * w, 0.0);
    dst.assign(static_cast<std::size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int t = -5; t <= 5; ++t) {
                const int xx = x + t;
                if (xx < 0 || xx >= w) continue;
                acc += k[t + 5] * src[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0;
            for (int t = -5; t <= 5; ++t) {
                const int yy = y + t;
                if (yy < 0 || yy >= h) continue;
                acc += k[t + 5] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            dst[static_cast<std::size_t>(y) * w + x] = acc;
        }
}

}  // namespace detail

struct RgbLossParts {
    double l1 = 0;
    double ssim = 0;  // mean SSIM in [-1, 1]
};

/// 0.8 * L1 + 0.2 * (1 - SSIM), the composition used by the splatting method
/// this builds on. Optionally writes dLoss/dRendered and the two components.
inline double rgb_loss(const FeatureMap& rendered, const FeatureMap& target,
                       FeatureMap* grad = nullptr, RgbLossParts* parts = nullptr) {
    if (rendered.width != target.width || rendered.height != target.height ||
        rendered.dim != target.dim)
        throw config_error("rgb_loss: shape mismatch");
    const int h = rendered.height, w = rendered.width, d = rendered.dim;
    const std::size_t total = rendered.data.size();
    if (total == 0) return 0.0;

    if (grad) {
        *grad = FeatureMap(h, w, d);
    }
    double l1 = 0;
    for (std::size_t i = 0; i < total; ++i) {
        const double r = rendered.data[i] - target.data[i];
        l1 += std::abs(r);
        if (grad) grad->data[i] = 0.8 * (r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0)) / total;
    }
    l1 /= static_cast<double>(total);

    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    const std::size_t pixels = static_cast<std::size_t>(h) * w;
    std::vector<double> xc(pixels), yc(pixels), x2(pixels), y2(pixels), xy(pixels);
    std::vector<double> mu_x, mu_y, ex2, ey2, exy, tmp;
    std::vector<double> g_mu(pixels), g_x2(pixels), g_xy(pixels), blurred;
    double ssim_sum = 0;
    for (int c = 0; c < d; ++c) {
        for (std::size_t p = 0; p < pixels; ++p) {
            xc[p] = rendered.data[p * d + c];
            yc[p] = target.data[p * d + c];
            x2[p] = xc[p] * xc[p];
            y2[p] = yc[p] * yc[p];
            xy[p] = xc[p] * yc[p];
        }
        detail::ssim_blur(xc, h, w, tmp, mu_x);
        detail::ssim_blur(yc, h, w, tmp, mu_y);
        detail::ssim_blur(x2, h, w, tmp, ex2);
        detail::ssim_blur(y2, h, w, tmp, ey2);
        detail::ssim_blur(xy, h, w, tmp, exy);
        for (std::size_t p = 0; p < pixels; ++p) {
            const double sx2 = ex2[p] - mu_x[p] * mu_x[p];
            const double sy2 = ey2[p] - mu_y[p] * mu_y[p];
            const double sxy = exy[p] - mu_x[p] * mu_y[p];
            const double a1 = 2 * mu_x[p] * mu_y[p] + c1;
            const double a2 = 2 * sxy + c2;
            const double b1 = mu_x[p] * mu_x[p] + mu_y[p] * mu_y[p] + c1;
            const double b2 = sx2 + sy2 + c2;
            const double s = (a1 * a2) / (b1 * b2);
            ssim_sum += s;
            if (grad) {
                const double inv_bb = 1.0 / (b1 * b2);
                const double ds_da1 = a2 * inv_bb;
                const double ds_da2 = a1 * inv_bb;
                const double ds_db1 = -s / b1;
                const double ds_db2 = -s / b2;
                // dLoss/dS = -0.2 / (pixels * channels); fold it in here.
                const double dl_ds = -0.2 / (static_cast<double>(pixels) * d);
                g_mu[p] = dl_ds * (ds_da1 * 2 * mu_y[p] + ds_da2 * (-2 * mu_y[p]) +
                                   ds_db1 * 2 * mu_x[p] + ds_db2 * (-2 * mu_x[p]));
                g_x2[p] = dl_ds * ds_db2;
                g_xy[p] = dl_ds * ds_da2 * 2.0;
            }
        }
        if (grad) {
            detail::ssim_blur(g_mu, h, w, tmp, blurred);
            for (std::size_t p = 0; p < pixels; ++p) grad->data[p * d + c] += blurred[p];
            detail::ssim_blur(g_x2, h, w, tmp, blurred);
            for (std::size_t p = 0; p < pixels; ++p)
                grad->data[p * d + c] += 2.0 * xc[p] * blurred[p];
            detail::ssim_blur(g_xy, h, w, tmp, blurred);
            for (std::size_t p = 0; p < pixels; ++p) grad->data[p * d + c] += yc[p] * blurred[p];
        }
    }
    const double mssim = ssim_sum / (static_cast<double>(pixels) * d);
    if (parts) {
        parts->l1 = l1;
        parts->ssim = mssim;
    }
    return 0.8 * l1 + 0.2 * (1.0 - mssim);
}

/// Huber supervision of the rendered language map against the multi-scale
/// targets. The per-pixel target interpolates the two scale levels bracketing
/// the rendered scale value (renormalized where nonzero), so the scale channel
/// receives gradient through the target. Two averages are summed: one over
/// pixels with a nonzero target, one over pixels the rendering covers.
inline double language_loss(const FeatureMap& lang, const FeatureMap& scale,
                            const std::vector<FeatureMap>& targets, double huber_delta,
                            FeatureMap* d_lang = nullptr, FeatureMap* d_scale = nullptr) {
    if (targets.empty()) throw config_error("language_loss: no target levels");
    const int h = lang.height, w = lang.width, d = lang.dim;
    const int s_levels = static_cast<int>(targets.size());
    for (const auto& t : targets)
        if (t.height != h || t.width != w || t.dim != d)
            throw config_error("language_loss: target shape mismatch");
    if (scale.height != h || scale.width != w || scale.dim != 1)
        throw config_error("language_loss: scale map shape mismatch");

    if (d_lang) *d_lang = FeatureMap(h, w, d);
    if (d_scale) *d_scale = FeatureMap(h, w, 1);

    struct PixelEval {
        bool in_target = false;
        bool in_coverage = false;
        VecX residual;
        VecX d_target_d_scale;
    };
    std::vector<PixelEval> evals(static_cast<std::size_t>(h) * w);
    std::size_t n_target = 0, n_cover = 0;
    VecX m(d), tgt(d), dm_ds(d);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto& ev = evals[static_cast<std::size_t>(y) * w + x];
            const double s_raw = scale.at(y, x)[0];
            const double s_val = std::clamp(s_raw, 0.0, static_cast<double>(s_levels - 1));
            int i0 = std::min(static_cast<int>(std::floor(s_val)), s_levels - 2);
            bool interior = s_raw > 0.0 && s_raw < s_levels - 1.0;
            if (s_levels == 1) {
                i0 = 0;
                interior = false;
            }
            const int i1 = s_levels == 1 ? 0 : i0 + 1;
            const double u = s_levels == 1 ? 0.0 : s_val - i0;

            const double* t0 = targets[i0].at(y, x);
            const double* t1 = targets[i1].at(y, x);
            double norm2 = 0;
            for (int c = 0; c < d; ++c) {
                m[c] = (1 - u) * t0[c] + u * t1[c];
                dm_ds[c] = t1[c] - t0[c];
                norm2 += m[c] * m[c];
            }
            const double norm = std::sqrt(norm2);
            ev.in_target = norm > detail::kNormFloor;
            ev.in_coverage = lang.alpha_at(y, x) > 0.5;
            if (!ev.in_target && !ev.in_coverage) continue;
            if (ev.in_target)
                tgt = m / norm;
            else
                tgt.setZero();
            ev.residual = VecX(d);
            const double* r = lang.at(y, x);
            for (int c = 0; c < d; ++c) ev.residual[c] = r[c] - tgt[c];
            if (ev.in_target && interior) {
                const VecX th = m / norm;
                ev.d_target_d_scale = (dm_ds - th * th.dot(dm_ds)) / norm;
            }
            n_target += ev.in_target;
            n_cover += ev.in_coverage;
        }

    double loss = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto& ev = evals[static_cast<std::size_t>(y) * w + x];
            if (!ev.in_target && !ev.in_coverage) continue;
            double hsum = 0;
            for (int c = 0; c < d; ++c) hsum += huber(ev.residual[c], huber_delta);
            const double weight = (ev.in_target ? 1.0 / n_target : 0.0) +
                                  (ev.in_coverage ? 1.0 / n_cover : 0.0);
            loss += weight * hsum;
            if (!d_lang && !d_scale) continue;
            double ds_acc = 0;
            for (int c = 0; c < d; ++c) {
                const double hd = huber_derivative(ev.residual[c], huber_delta);
                if (d_lang) d_lang->at(y, x)[c] = weight * hd;
                if (ev.d_target_d_scale.size() > 0) ds_acc -= hd * ev.d_target_d_scale[c];
            }
            if (d_scale && ev.d_target_d_scale.size() > 0) d_scale->at(y, x)[0] = weight * ds_acc;
        }
    return loss;
}

/// Mean feature over a mask label (the representative r_{v,k}).
inline VecX representative(const FeatureMap& map, const LabelImage& mask, int label) {
    if (mask.height != map.height || mask.width != map.width)
        throw config_error("representative: mask shape mismatch");
    VecX acc = VecX::Zero(map.dim);
    std::size_t count = 0;
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x)
            if (mask.at(y, x) == label) {
                const double* f = map.at(y, x);
                for (int c = 0; c < map.dim; ++c) acc[c] += f[c];
                ++count;
            }
    if (count == 0) throw config_error("representative: empty mask label " + std::to_string(label));
    return acc / static_cast<double>(count);
}

inline constexpr int kMinMaskPixels = 8;

struct InstanceLossResult {
    double pos = 0;
    double neg = 0;
    double total(double w_neg) const { return pos + w_neg * neg; }
};

/// Contrastive instance objective for one view: pixels pulled toward their
/// mask representative, representatives of distinct masks pushed beyond the
/// margin (ordered pairs). The optional gradient is d(pos + w_neg * neg)/dF.
/// Masks below kMinMaskPixels pixels are skipped.
inline InstanceLossResult instance_loss(const FeatureMap& map, const LabelImage& mask, double gamma,
                                        double w_neg, FeatureMap* grad = nullptr) {
    if (mask.height != map.height || mask.width != map.width)
        throw config_error("instance_loss: mask shape mismatch");
    const int d = map.dim;

    std::map<int, std::vector<std::size_t>> pixels_by_label;
    for (int y = 0; y < map.height; ++y)
        for (int x = 0; x < map.width; ++x) {
            const int l = mask.at(y, x);
            if (l > 0) pixels_by_label[l].push_back(static_cast<std::size_t>(y) * map.width + x);
        }
    std::vector<int> labels;
    for (const auto& [l, px] : pixels_by_label)
        if (px.size() >= kMinMaskPixels) labels.push_back(l);

    InstanceLossResult res;
    if (grad) *grad = FeatureMap(map.height, map.width, d);
    if (labels.empty()) return res;

    const int k = static_cast<int>(labels.size());
    MatX reps(d, k);
    for (int i = 0; i < k; ++i) reps.col(i) = representative(map, mask, labels[i]);

    for (int i = 0; i < k; ++i) {
        const auto& px = pixels_by_label[labels[i]];
        const double inv = 1.0 / static_cast<double>(px.size());
        for (const auto p : px) {
            const double* f = map.data.data() + p * d;
            double acc = 0;
            for (int c = 0; c < d; ++c) {
                const double r = f[c] - reps(c, i);
                acc += r * r;
                // Representative treated as constant: the mean-centering term
                // vanishes identically, so this is also the full gradient.
                if (grad) grad->data[p * d + c] += 2.0 * r * inv;
            }
            res.pos += acc * inv;
        }
    }

    MatX d_reps = MatX::Zero(d, k);
    for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
            if (a == b) continue;
            const VecX diff = reps.col(a) - reps.col(b);
            const double margin = gamma - diff.squaredNorm();
            if (margin <= 0) continue;
            res.neg += margin;
            if (grad) {
                d_reps.col(a) -= 2.0 * diff;
                d_reps.col(b) += 2.0 * diff;
            }
        }
    if (grad) {
        for (int i = 0; i < k; ++i) {
            const auto& px = pixels_by_label[labels[i]];
            const double inv = w_neg / static_cast<double>(px.size());
            for (const auto p : px)
                for (int c = 0; c < d; ++c) grad->data[p * d + c] += inv * d_reps(c, i);
        }
    }
    return res;
}

/// Multi-view sum of the contrastive objective (negatives never cross views).
inline InstanceLossResult instance_loss_views(const std::vector<FeatureMap>& maps,
                                              const std::vector<LabelImage>& masks, double gamma,
                                              double w_neg) {
    if (maps.size() != masks.size()) throw config_error("instance_loss_views: size mismatch");
    InstanceLossResult total;
    for (std::size_t v = 0; v < maps.size(); ++v) {
        const auto r = instance_loss(maps[v], masks[v], gamma, w_neg);
        total.pos += r.pos;
        total.neg += r.neg;
    }
    return total;
}

/// Huber loss against the dense regularization map, averaged over pixels with
/// a nonzero target.
inline double reg_loss(const FeatureMap& rendered, const FeatureMap& target, double huber_delta,
                       FeatureMap* grad = nullptr) {
    if (rendered.width != target.width || rendered.height != target.height ||
        rendered.dim != target.dim)
        throw config_error("reg_loss: shape mismatch");
    const int d = rendered.dim;
    if (grad) *grad = FeatureMap(rendered.height, rendered.width, d);

    std::vector<std::size_t> active;
    for (std::size_t p = 0; p < rendered.pixel_count(); ++p) {
        bool nonzero = false;
        for (int c = 0; c < d && !nonzero; ++c) nonzero = target.data[p * d + c] != 0.0;
        if (nonzero) active.push_back(p);
    }
    if (active.empty()) return 0.0;

    double loss = 0;
    const double inv = 1.0 / static_cast<double>(active.size());
    for (const auto p : active)
        for (int c = 0; c < d; ++c) {
            const double r = rendered.data[p * d + c] - target.data[p * d + c];
            loss += huber(r, huber_delta);
            if (grad) grad->data[p * d + c] = inv * huber_derivative(r, huber_delta);
        }
    return loss * inv;
}

struct LossParts {
    double rgb = 0;
    double clip = 0;
    double instance = 0;
    double reg = 0;
};

inline double total_loss(const LossParts& parts, const LossWeights& w) {
    const auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) throw numeric_error(std::string("non-finite loss term: ") + name);
        return v;
    };
    return check(parts.rgb, "rgb") + w.lambda_lang * check(parts.clip, "clip") +
           w.lambda_inst * check(parts.instance, "instance") +
           w.lambda_reg * check(parts.reg, "reg");
}

}  // namespace splatsense
