#pragma once

#include "splatsense/core.hpp"

#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

namespace splatsense {

/// One anisotropic Gaussian. Rotation is a quaternion (w, x, y, z) that is
/// renormalized before any covariance assembly; scale is stored as log of the
/// per-axis standard deviation and opacity as a logit, so every field is an
/// unconstrained real for the optimizer.
struct GaussianPrimitive {
    Vec3 position = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0);
    Vec3 log_scale = Vec3::Zero();
    double opacity_logit = 0.0;
    Vec3 color = Vec3::Zero();

    double opacity() const { return sigmoid(opacity_logit); }
};

struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    Mat3 rotation = Mat3::Identity();  // world-to-camera
    Vec3 translation = Vec3::Zero();
    int height = 0, width = 0;

    Vec3 to_camera(const Vec3& x) const { return rotation * x + translation; }
};

struct GaussianScene {
    std::vector<GaussianPrimitive> primitives;
    std::vector<int> gt_instance_label;  // empty or one per primitive; 0 = background
    std::vector<int> gt_concept_id;      // empty or one per primitive; -1 = none

    std::size_t size() const { return primitives.size(); }
    bool has_labels() const { return !gt_instance_label.empty(); }
};

inline Mat3 rotation_from_quaternion(const Vec4& q_raw) {
    const double n = q_raw.norm();
    const Vec4 q = n > 0 ? Vec4(q_raw / n) : Vec4(1, 0, 0, 0);
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// Sigma = R S S^T R^T with S = diag(exp(log_scale)); symmetric PSD by
/// construction for any (possibly unnormalized) quaternion.
inline Mat3 assemble_covariance(const GaussianPrimitive& p) {
    const Mat3 r = rotation_from_quaternion(p.rotation);
    const Vec3 s = p.log_scale.array().exp();
    const Mat3 m = r * s.asDiagonal();
    return m * m.transpose();
}

/// Camera placed at `eye` looking at `target`; +z is the viewing direction.
inline Camera look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up,
                             double fx, double fy, int width, int height) {
    Camera cam;
    Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up).normalized();
    Vec3 down = forward.cross(right).normalized();
    Mat3 r;
    r.row(0) = right;
    r.row(1) = down;
    r.row(2) = forward;
    cam.rotation = r;
    cam.translation = -r * eye;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    cam.width = width;
    cam.height = height;
    return cam;
}

namespace detail {

inline std::vector<std::string> split_tokens(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

inline double parse_finite(const std::string& tok, const char* what, std::size_t record) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0')
        throw io_error("record " + std::to_string(record) + ": unparsable " + what + " '" + tok + "'");
    if (!std::isfinite(v))
        throw io_error("record " + std::to_string(record) + ": non-finite " + what);
    return v;
}

inline std::size_t parse_header_count(const std::string& line, const std::string& magic) {
    if (line.rfind(magic, 0) != 0)
        throw io_error("malformed header: expected '" + magic + " ...', got '" + line + "'");
    const auto pos = line.find("count=");
    if (pos == std::string::npos) throw io_error("malformed header: missing count= field");
    return static_cast<std::size_t>(std::stoull(line.substr(pos + 6)));
}

}  // namespace detail

inline constexpr const char* kSceneMagic = "#splatsense-scene v1";
inline constexpr const char* kCameraMagic = "#splatsense-cams v1";

inline void save_scene(const GaussianScene& scene, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << kSceneMagic << " count=" << scene.size() << "\n";
    const bool inst = !scene.gt_instance_label.empty();
    const bool conc = !scene.gt_concept_id.empty();
    for (std::size_t i = 0; i < scene.size(); ++i) {
        const auto& p = scene.primitives[i];
        const double vals[14] = {p.position[0],  p.position[1],  p.position[2], p.rotation[0],
                                 p.rotation[1],  p.rotation[2],  p.rotation[3], p.log_scale[0],
                                 p.log_scale[1], p.log_scale[2], p.opacity_logit,
                                 p.color[0],     p.color[1],     p.color[2]};
        for (int k = 0; k < 14; ++k) f << (k ? " " : "") << format_double(vals[k]);
        if (inst) f << " " << scene.gt_instance_label[i];
        if (conc) f << " " << scene.gt_concept_id[i];
        f << "\n";
    }
    if (!f) throw io_error("write failed: " + path);
}

inline GaussianScene load_scene(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw io_error("empty file: " + path);
    const std::size_t count = detail::parse_header_count(line, kSceneMagic);

    GaussianScene scene;
    scene.primitives.reserve(count);
    int field_count = -1;
    std::size_t record = 0;
    while (std::getline(f, line)) {
        const auto toks = detail::split_tokens(line);
        if (toks.empty()) continue;
        if (toks.size() < 14 || toks.size() > 16)
            throw io_error("record " + std::to_string(record) + ": expected 14-16 fields, got " +
                           std::to_string(toks.size()));
        if (field_count < 0) field_count = static_cast<int>(toks.size());
        if (static_cast<int>(toks.size()) != field_count)
            throw io_error("record " + std::to_string(record) + ": field-count mismatch (" +
                           std::to_string(toks.size()) + " vs " + std::to_string(field_count) + ")");
        GaussianPrimitive p;
        double v[14];
        static const char* names[14] = {"x",  "y",  "z",  "qw", "qx", "qy", "qz",
                                        "sx", "sy", "sz", "opacity_logit", "r", "g", "b"};
        for (int k = 0; k < 14; ++k) v[k] = detail::parse_finite(toks[k], names[k], record);
        p.position = Vec3(v[0], v[1], v[2]);
        p.rotation = Vec4(v[3], v[4], v[5], v[6]);
        p.log_scale = Vec3(v[7], v[8], v[9]);
        p.opacity_logit = v[10];
        p.color = Vec3(v[11], v[12], v[13]);
        scene.primitives.push_back(p);
        if (field_count >= 15) scene.gt_instance_label.push_back(std::stoi(toks[14]));
        if (field_count == 16) scene.gt_concept_id.push_back(std::stoi(toks[15]));
        ++record;
    }
    if (scene.size() != count)
        throw io_error(path + ": header count=" + std::to_string(count) + " but found " +
                       std::to_string(scene.size()) + " records");
    return scene;
}

inline void save_cameras(const std::vector<Camera>& cams, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << kCameraMagic << " count=" << cams.size() << "\n";
    for (const auto& c : cams) {
        f << format_double(c.fx) << " " << format_double(c.fy) << " " << format_double(c.cx)
          << " " << format_double(c.cy);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) f << " " << format_double(c.rotation(i, j));
        for (int i = 0; i < 3; ++i) f << " " << format_double(c.translation[i]);
        f << " " << c.height << " " << c.width << "\n";
    }
    if (!f) throw io_error("write failed: " + path);
}

inline std::vector<Camera> load_cameras(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw io_error("empty file: " + path);
    const std::size_t count = detail::parse_header_count(line, kCameraMagic);

    std::vector<Camera> cams;
    std::size_t record = 0;
    while (std::getline(f, line)) {
        const auto toks = detail::split_tokens(line);
        if (toks.empty()) continue;
        if (toks.size() != 18)
            throw io_error("record " + std::to_string(record) + ": expected 18 fields, got " +
                           std::to_string(toks.size()));
        Camera c;
        double v[16];
        for (int k = 0; k < 16; ++k) v[k] = detail::parse_finite(toks[k], "camera field", record);
        c.fx = v[0];
        c.fy = v[1];
        c.cx = v[2];
        c.cy = v[3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) c.rotation(i, j) = v[4 + 3 * i + j];
        c.translation = Vec3(v[13], v[14], v[15]);
        c.height = std::stoi(toks[16]);
        c.width = std::stoi(toks[17]);
        if (c.fx <= 0 || c.fy <= 0)
            throw io_error("record " + std::to_string(record) + ": fx, fy must be positive");
        if (c.height < 1 || c.width < 1)
            throw io_error("record " + std::to_string(record) + ": resolution must be >= 1");
        const Mat3 rtr = c.rotation.transpose() * c.rotation;
        if ((rtr - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6 ||
            c.rotation.determinant() < 0)
            throw io_error("record " + std::to_string(record) + ": rotation not orthonormal");
        cams.push_back(c);
        ++record;
    }
    if (cams.size() != count)
        throw io_error(path + ": header count=" + std::to_string(count) + " but found " +
                       std::to_string(cams.size()) + " records");
    return cams;
}

}  // namespace splatsense
