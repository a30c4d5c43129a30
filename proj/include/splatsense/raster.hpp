#pragma once

#include "splatsense/scene.hpp"

#include <algorithm>
#include <optional>

namespace splatsense {

/// Dense row-major matrix used for per-primitive attributes and their
/// gradients; kept separate from Eigen so rows are contiguous.
struct FeatureRows {
    int rows = 0, cols = 0;
    std::vector<double> v;

    FeatureRows() = default;
    FeatureRows(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    double* row(int i) { return v.data() + static_cast<std::size_t>(i) * cols; }
    const double* row(int i) const { return v.data() + static_cast<std::size_t>(i) * cols; }
};

/// H x W x D feature grid with an accumulated-alpha channel.
struct FeatureMap {
    int width = 0, height = 0, dim = 0;
    std::vector<double> data;                // row-major, channel innermost
    std::vector<double> accumulated_alpha;   // per pixel, in [0, 1]

    FeatureMap() = default;
    FeatureMap(int h, int w, int d)
        : width(w), height(h), dim(d),
          data(static_cast<std::size_t>(h) * w * d, 0.0),
          accumulated_alpha(static_cast<std::size_t>(h) * w, 0.0) {}

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    double* at(int y, int x) { return data.data() + (static_cast<std::size_t>(y) * width + x) * dim; }
    const double* at(int y, int x) const {
        return data.data() + (static_cast<std::size_t>(y) * width + x) * dim;
    }
    double alpha_at(int y, int x) const {
        return accumulated_alpha[static_cast<std::size_t>(y) * width + x];
    }
};

struct Splat2D {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Zero();
    double depth = 0;
    int primitive_index = -1;
};

inline constexpr double kBlurFloor = 0.3;        // px^2, added to cov2d diagonal
inline constexpr double kAlphaFloor = 1.0 / 255.0;
inline constexpr double kAlphaCap = 0.999;
inline constexpr double kNearPlane = 1e-3;
// 99%-mass radius of a 2D Gaussian: sqrt(2 ln 100).
inline const double kCullRadius = std::sqrt(2.0 * std::log(100.0));
// Beyond this Mahalanobis radius every contribution is below the alpha floor
// (op * exp(-r^2/2) < 1/255 for any op <= kAlphaCap), so pixel loops may stop there.
inline constexpr double kLoopRadius = 3.34;

inline std::optional<Splat2D> project(const GaussianPrimitive& prim, const Camera& cam) {
    const Vec3 t = cam.to_camera(prim.position);
    if (t.z() <= kNearPlane) return std::nullopt;

    const double invz = 1.0 / t.z();
    Splat2D s;
    s.depth = t.z();
    s.mean2d = Vec2(cam.fx * t.x() * invz + cam.cx, cam.fy * t.y() * invz + cam.cy);

    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx * invz, 0, -cam.fx * t.x() * invz * invz,
        0, cam.fy * invz, -cam.fy * t.y() * invz * invz;
    const Mat3 sigma_cam = cam.rotation * assemble_covariance(prim) * cam.rotation.transpose();
    s.cov2d = j * sigma_cam * j.transpose();
    s.cov2d(0, 0) += kBlurFloor;
    s.cov2d(1, 1) += kBlurFloor;

    const double ex = kCullRadius * std::sqrt(s.cov2d(0, 0));
    const double ey = kCullRadius * std::sqrt(s.cov2d(1, 1));
    if (s.mean2d.x() + ex < 0 || s.mean2d.x() - ex > cam.width ||
        s.mean2d.y() + ey < 0 || s.mean2d.y() - ey > cam.height)
        return std::nullopt;
    return s;
}

namespace detail {

struct PreparedSplat {
    int prim = 0;
    double depth = 0;
    double mx = 0, my = 0;       // mean2d
    double qxx = 0, qxy = 0, qyy = 0;  // conic (inverse cov2d)
    double cxx = 0, cxy = 0, cyy = 0;  // cov2d
    double opacity = 0;
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds
    Vec3 tcam = Vec3::Zero();
};

/// Projects, culls and depth-sorts the scene (ties broken by primitive index
/// so storage order never affects the blend order).
inline std::vector<PreparedSplat> prepare(const GaussianScene& scene, const Camera& cam) {
    std::vector<PreparedSplat> out;
    out.reserve(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const auto sp = project(scene.primitives[i], cam);
        if (!sp) continue;
        PreparedSplat p;
        p.prim = static_cast<int>(i);
        p.depth = sp->depth;
        p.mx = sp->mean2d.x();
        p.my = sp->mean2d.y();
        p.cxx = sp->cov2d(0, 0);
        p.cxy = sp->cov2d(0, 1);
        p.cyy = sp->cov2d(1, 1);
        const double det = p.cxx * p.cyy - p.cxy * p.cxy;
        if (det <= 0) continue;  // cannot happen with the blur floor, kept as a guard
        p.qxx = p.cyy / det;
        p.qxy = -p.cxy / det;
        p.qyy = p.cxx / det;
        p.opacity = scene.primitives[i].opacity();
        const double ex = kLoopRadius * std::sqrt(p.cxx);
        const double ey = kLoopRadius * std::sqrt(p.cyy);
        // Pixel centers sit at (ix + 0.5, iy + 0.5).
        p.x0 = std::max(0, static_cast<int>(std::ceil(p.mx - ex - 0.5)));
        p.x1 = std::min(cam.width - 1, static_cast<int>(std::floor(p.mx + ex - 0.5)));
        p.y0 = std::max(0, static_cast<int>(std::ceil(p.my - ey - 0.5)));
        p.y1 = std::min(cam.height - 1, static_cast<int>(std::floor(p.my + ey - 0.5)));
        if (p.x0 > p.x1 || p.y0 > p.y1) continue;
        p.tcam = cam.to_camera(scene.primitives[i].position);
        out.push_back(p);
    }
    std::sort(out.begin(), out.end(), [](const PreparedSplat& a, const PreparedSplat& b) {
        if (a.depth != b.depth) return a.depth < b.depth;
        return a.prim < b.prim;
    });
    return out;
}

inline double splat_alpha(const PreparedSplat& s, double px, double py) {
    const double dx = px - s.mx;
    const double dy = py - s.my;
    const double power = -0.5 * (s.qxx * dx * dx + 2.0 * s.qxy * dx * dy + s.qyy * dy * dy);
    return std::min(kAlphaCap, s.opacity * std::exp(power));
}

}  // namespace detail

/// Front-to-back alpha blending of per-primitive attribute rows (Eq. style
/// sum_i f_i a_i prod_{j<i} (1 - a_j)); D comes from `attrs`.
inline FeatureMap render(const GaussianScene& scene, const Camera& cam, const FeatureRows& attrs,
                         int threads = 1) {
    if (attrs.rows != static_cast<int>(scene.size()))
        throw config_error("attribute rows (" + std::to_string(attrs.rows) +
                           ") do not match primitive count (" + std::to_string(scene.size()) + ")");
    const int d = attrs.cols;
    FeatureMap out(cam.height, cam.width, d);
    const auto splats = detail::prepare(scene, cam);

    std::vector<double> transmittance(out.pixel_count(), 1.0);
    parallel_for(static_cast<std::size_t>(cam.height), threads, [&](std::size_t rb, std::size_t re) {
        const int row_begin = static_cast<int>(rb), row_end = static_cast<int>(re);
        for (const auto& s : splats) {
            const int y0 = std::max(s.y0, row_begin), y1 = std::min(s.y1, row_end - 1);
            const double* f = attrs.row(s.prim);
            for (int y = y0; y <= y1; ++y) {
                const double py = y + 0.5;
                for (int x = s.x0; x <= s.x1; ++x) {
                    const double a = detail::splat_alpha(s, x + 0.5, py);
                    if (a < kAlphaFloor) continue;
                    const std::size_t pix = static_cast<std::size_t>(y) * cam.width + x;
                    const double w = a * transmittance[pix];
                    double* o = out.data.data() + pix * d;
                    for (int c = 0; c < d; ++c) o[c] += w * f[c];
                    out.accumulated_alpha[pix] += w;
                    transmittance[pix] *= 1.0 - a;
                }
            }
        }
    });
    return out;
}

inline FeatureRows color_attributes(const GaussianScene& scene) {
    FeatureRows a(static_cast<int>(scene.size()), 3);
    for (std::size_t i = 0; i < scene.size(); ++i)
        for (int c = 0; c < 3; ++c) a.row(static_cast<int>(i))[c] = scene.primitives[i].color[c];
    return a;
}

struct RenderGrads {
    FeatureRows d_attributes;              // N x D
    std::vector<double> d_opacity_logit;   // N
    std::vector<Vec3> d_position;
    std::vector<Vec3> d_log_scale;
    std::vector<Vec4> d_rotation;
};

namespace detail {

struct BandGrads {
    FeatureRows d_attr;
    std::vector<double> d_oplogit;
    std::vector<double> d_mean;   // N x 2
    std::vector<double> d_cov;    // N x 3 (xx, xy, yy)
    BandGrads(int n, int d)
        : d_attr(n, d), d_oplogit(n, 0.0), d_mean(2 * static_cast<std::size_t>(n), 0.0),
          d_cov(3 * static_cast<std::size_t>(n), 0.0) {}
};

/// Chains mean2d / cov2d gradients of one splat back to position, log-scale
/// and quaternion; the depth ordering itself is treated as constant.
inline void projection_backward(const GaussianPrimitive& prim, const Camera& cam,
                                const PreparedSplat& s, const Vec2& d_mean, const Mat2& d_cov,
                                Vec3& d_position, Vec3& d_log_scale, Vec4& d_rotation) {
    const Vec3 t = s.tcam;
    const double invz = 1.0 / t.z();
    const double invz2 = invz * invz;

    Vec3 d_t = Vec3::Zero();
    d_t.x() += d_mean.x() * cam.fx * invz;
    d_t.z() -= d_mean.x() * cam.fx * t.x() * invz2;
    d_t.y() += d_mean.y() * cam.fy * invz;
    d_t.z() -= d_mean.y() * cam.fy * t.y() * invz2;

    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx * invz, 0, -cam.fx * t.x() * invz2,
        0, cam.fy * invz, -cam.fy * t.y() * invz2;
    const Mat3 sigma = assemble_covariance(prim);
    const Mat3 sigma_cam = cam.rotation * sigma * cam.rotation.transpose();

    // cov2d = J M J^T (plus constant blur):  dL/dJ = 2 G J M,  dL/dM = J^T G J.
    const Eigen::Matrix<double, 2, 3> d_j = 2.0 * d_cov * j * sigma_cam;
    const Mat3 d_sigma_cam = j.transpose() * d_cov * j;

    d_t.x() += d_j(0, 2) * (-cam.fx * invz2);
    d_t.y() += d_j(1, 2) * (-cam.fy * invz2);
    d_t.z() += d_j(0, 0) * (-cam.fx * invz2) + d_j(0, 2) * (2.0 * cam.fx * t.x() * invz2 * invz) +
               d_j(1, 1) * (-cam.fy * invz2) + d_j(1, 2) * (2.0 * cam.fy * t.y() * invz2 * invz);

    d_position += cam.rotation.transpose() * d_t;

    const Mat3 d_sigma = cam.rotation.transpose() * d_sigma_cam * cam.rotation;

    // Sigma = N N^T with N = R diag(exp(s)).
    const double qn = prim.rotation.norm();
    const Vec4 qh = qn > 0 ? Vec4(prim.rotation / qn) : Vec4(1, 0, 0, 0);
    const Mat3 r = rotation_from_quaternion(prim.rotation);
    const Vec3 es = prim.log_scale.array().exp();
    const Mat3 n = r * es.asDiagonal();
    const Mat3 d_n = 2.0 * d_sigma * n;

    for (int k = 0; k < 3; ++k) {
        double acc = 0;
        for (int jj = 0; jj < 3; ++jj) acc += d_n(jj, k) * n(jj, k);
        d_log_scale[k] += acc;
    }
    Mat3 d_r;
    for (int jj = 0; jj < 3; ++jj)
        for (int k = 0; k < 3; ++k) d_r(jj, k) = d_n(jj, k) * es[k];

    const double w = qh[0], x = qh[1], y = qh[2], z = qh[3];
    Mat3 dr_dq[4];
    dr_dq[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    dr_dq[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    dr_dq[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    dr_dq[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    Vec4 d_qh;
    for (int c = 0; c < 4; ++c) d_qh[c] = (d_r.array() * dr_dq[c].array()).sum();
    // Through the normalization q_hat = q / |q|.
    d_rotation += (d_qh - qh * qh.dot(d_qh)) / qn;
}

}  // namespace detail

/// Gradients of a scalar loss (given dL/d output map) with respect to the
/// attribute rows and all geometry parameters. Recomputes the forward
/// intermediates; the per-pixel visitation and skip rules match render().
inline RenderGrads render_backward(const GaussianScene& scene, const Camera& cam,
                                   const FeatureRows& attrs, const FeatureMap& grad_map,
                                   int threads = 1) {
    if (attrs.rows != static_cast<int>(scene.size()))
        throw config_error("attribute rows do not match primitive count");
    if (grad_map.width != cam.width || grad_map.height != cam.height || grad_map.dim != attrs.cols)
        throw config_error("gradient map dimensions do not match render output");

    const int n = attrs.rows;
    const int d = attrs.cols;
    const auto splats = detail::prepare(scene, cam);

    const int bands = std::max(1, std::min(threads, cam.height));
    std::vector<detail::BandGrads> partials;
    partials.reserve(bands);
    for (int b = 0; b < bands; ++b) partials.emplace_back(n, d);

    parallel_for(static_cast<std::size_t>(cam.height), bands, [&](std::size_t rb, std::size_t re) {
        const int row_begin = static_cast<int>(rb), row_end = static_cast<int>(re);
        const std::size_t chunk = (static_cast<std::size_t>(cam.height) + bands - 1) / bands;
        detail::BandGrads& bg = partials[rb / chunk];

        const std::size_t band_pixels = static_cast<std::size_t>(row_end - row_begin) * cam.width;
        std::vector<double> transmittance(band_pixels, 1.0);
        // Forward alpha sweep to obtain the final transmittance per pixel.
        for (const auto& s : splats) {
            const int y0 = std::max(s.y0, row_begin), y1 = std::min(s.y1, row_end - 1);
            for (int y = y0; y <= y1; ++y)
                for (int x = s.x0; x <= s.x1; ++x) {
                    const double a = detail::splat_alpha(s, x + 0.5, y + 0.5);
                    if (a < kAlphaFloor) continue;
                    transmittance[static_cast<std::size_t>(y - row_begin) * cam.width + x] *= 1.0 - a;
                }
        }
        // Reverse sweep: reconstruct per-splat weights and suffix sums.
        std::vector<double> suffix(band_pixels * d, 0.0);
        for (auto it = splats.rbegin(); it != splats.rend(); ++it) {
            const auto& s = *it;
            const int y0 = std::max(s.y0, row_begin), y1 = std::min(s.y1, row_end - 1);
            const double* f = attrs.row(s.prim);
            double* df = bg.d_attr.row(s.prim);
            for (int y = y0; y <= y1; ++y) {
                const double py = y + 0.5;
                for (int x = s.x0; x <= s.x1; ++x) {
                    const double px = x + 0.5;
                    const double dx = px - s.mx;
                    const double dy = py - s.my;
                    const double power =
                        -0.5 * (s.qxx * dx * dx + 2.0 * s.qxy * dx * dy + s.qyy * dy * dy);
                    const double g = std::exp(power);
                    const double a_pre = s.opacity * g;
                    const double a = std::min(kAlphaCap, a_pre);
                    if (a < kAlphaFloor) continue;

                    const std::size_t band_pix =
                        static_cast<std::size_t>(y - row_begin) * cam.width + x;
                    const double t_before = transmittance[band_pix] / (1.0 - a);
                    transmittance[band_pix] = t_before;
                    const double weight = a * t_before;

                    const double* u =
                        grad_map.data.data() +
                        (static_cast<std::size_t>(y) * cam.width + x) * static_cast<std::size_t>(d);
                    double* sfx = suffix.data() + band_pix * d;
                    double uf = 0, us = 0;
                    for (int c = 0; c < d; ++c) {
                        df[c] += weight * u[c];
                        uf += u[c] * f[c];
                        us += u[c] * sfx[c];
                        sfx[c] += weight * f[c];
                    }
                    const double d_alpha = uf * t_before - us / (1.0 - a);

                    if (a_pre >= kAlphaCap) continue;  // clamped: no gradient into alpha inputs
                    bg.d_oplogit[s.prim] += d_alpha * g * s.opacity * (1.0 - s.opacity);
                    const double d_power = d_alpha * s.opacity * g;
                    const double qdx = s.qxx * dx + s.qxy * dy;
                    const double qdy = s.qxy * dx + s.qyy * dy;
                    bg.d_mean[2 * s.prim] += d_power * qdx;
                    bg.d_mean[2 * s.prim + 1] += d_power * qdy;
                    bg.d_cov[3 * s.prim] += d_power * 0.5 * qdx * qdx;
                    bg.d_cov[3 * s.prim + 1] += d_power * qdx * qdy;
                    bg.d_cov[3 * s.prim + 2] += d_power * 0.5 * qdy * qdy;
                }
            }
        }
    });

    RenderGrads out;
    out.d_attributes = FeatureRows(n, d);
    out.d_opacity_logit.assign(n, 0.0);
    out.d_position.assign(n, Vec3::Zero());
    out.d_log_scale.assign(n, Vec3::Zero());
    out.d_rotation.assign(n, Vec4::Zero());

    // Reduce bands in a fixed order, then chain projection derivatives once per splat.
    std::vector<double> d_mean(2 * static_cast<std::size_t>(n), 0.0);
    std::vector<double> d_cov(3 * static_cast<std::size_t>(n), 0.0);
    for (const auto& bg : partials) {
        for (std::size_t i = 0; i < out.d_attributes.v.size(); ++i)
            out.d_attributes.v[i] += bg.d_attr.v[i];
        for (int i = 0; i < n; ++i) out.d_opacity_logit[i] += bg.d_oplogit[i];
        for (std::size_t i = 0; i < d_mean.size(); ++i) d_mean[i] += bg.d_mean[i];
        for (std::size_t i = 0; i < d_cov.size(); ++i) d_cov[i] += bg.d_cov[i];
    }
    for (const auto& s : splats) {
        const Vec2 dm(d_mean[2 * s.prim], d_mean[2 * s.prim + 1]);
        Mat2 dc;
        dc << d_cov[3 * s.prim], 0.5 * d_cov[3 * s.prim + 1], 0.5 * d_cov[3 * s.prim + 1],
            d_cov[3 * s.prim + 2];
        if (dm.isZero(0) && dc.isZero(0)) continue;
        detail::projection_backward(scene.primitives[s.prim], cam, s, dm, dc,
                                    out.d_position[s.prim], out.d_log_scale[s.prim],
                                    out.d_rotation[s.prim]);
    }
    return out;
}

}  // namespace splatsense
