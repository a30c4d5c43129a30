#pragma once

#include "splatsense/raster.hpp"

#include <cstring>
#include <fstream>

namespace splatsense {

struct HashGridConfig {
    int levels = 8;
    int base_resolution = 16;
    double growth = 1.45;
    int table_size = 1 << 16;
    int feats_per_level = 4;
};

/// Multi-resolution hash grid. Levels whose full lattice fits in the table
/// are indexed densely; the rest use the prime-multiply-XOR spatial hash.
struct HashGrid {
    HashGridConfig cfg;
    Vec3 bbox_min = Vec3::Zero();
    Vec3 bbox_max = Vec3::Ones();
    std::vector<int> level_res;
    std::vector<bool> level_dense;
    std::vector<std::size_t> level_offset;  // row offset of each level
    std::size_t total_rows = 0;
    std::vector<double> tables;             // total_rows * feats_per_level

    int output_dim() const { return cfg.levels * cfg.feats_per_level; }

    static HashGrid create(const HashGridConfig& cfg, const Vec3& bmin, const Vec3& bmax) {
        HashGrid g;
        g.cfg = cfg;
        g.bbox_min = bmin;
        g.bbox_max = bmax;
        g.level_res.resize(cfg.levels);
        g.level_dense.resize(cfg.levels);
        g.level_offset.resize(cfg.levels);
        std::size_t rows = 0;
        for (int l = 0; l < cfg.levels; ++l) {
            const int res = static_cast<int>(std::floor(cfg.base_resolution * std::pow(cfg.growth, l)));
            g.level_res[l] = std::max(1, res);
            const std::size_t verts = static_cast<std::size_t>(g.level_res[l] + 1) *
                                      (g.level_res[l] + 1) * (g.level_res[l] + 1);
            g.level_dense[l] = verts <= static_cast<std::size_t>(cfg.table_size);
            g.level_offset[l] = rows;
            rows += g.level_dense[l] ? verts : static_cast<std::size_t>(cfg.table_size);
        }
        g.total_rows = rows;
        g.tables.assign(rows * cfg.feats_per_level, 0.0);
        return g;
    }

    void init_random(Rng& rng, double amplitude = 1e-4) {
        for (auto& t : tables) t = uniform(rng, -amplitude, amplitude);
    }

    std::size_t vertex_row(int level, int ix, int iy, int iz) const {
        const int res = level_res[level];
        if (level_dense[level]) {
            return level_offset[level] +
                   static_cast<std::size_t>(ix) +
                   static_cast<std::size_t>(res + 1) * (static_cast<std::size_t>(iy) +
                                                        static_cast<std::size_t>(res + 1) * iz);
        }
        const std::uint32_t h = static_cast<std::uint32_t>(ix) * 1u ^
                                static_cast<std::uint32_t>(iy) * 2654435761u ^
                                static_cast<std::uint32_t>(iz) * 805459861u;
        return level_offset[level] + h % static_cast<std::uint32_t>(cfg.table_size);
    }
};

namespace detail {

struct VoxelLookup {
    int i0[3];
    double w[3];       // trilinear weights toward the +1 corner
    bool clamped[3];   // position outside the box on that axis
};

inline VoxelLookup locate(const HashGrid& g, int level, const Vec3& x) {
    VoxelLookup v;
    const int res = g.level_res[level];
    for (int a = 0; a < 3; ++a) {
        const double extent = g.bbox_max[a] - g.bbox_min[a];
        double u = extent > 0 ? (x[a] - g.bbox_min[a]) / extent : 0.0;
        v.clamped[a] = u <= 0.0 || u >= 1.0;
        u = std::clamp(u, 0.0, 1.0);
        const double pos = u * res;
        int i0 = static_cast<int>(std::floor(pos));
        i0 = std::min(i0, res - 1);
        v.i0[a] = i0;
        v.w[a] = pos - i0;
    }
    return v;
}

}  // namespace detail

/// Trilinear lookup at every level, concatenated (dimension L * F).
inline void encode(const HashGrid& g, const Vec3& x, double* out) {
    const int f = g.cfg.feats_per_level;
    for (int l = 0; l < g.cfg.levels; ++l) {
        const auto v = detail::locate(g, l, x);
        double* dst = out + static_cast<std::size_t>(l) * f;
        for (int c = 0; c < f; ++c) dst[c] = 0.0;
        for (int cz = 0; cz < 2; ++cz)
            for (int cy = 0; cy < 2; ++cy)
                for (int cx = 0; cx < 2; ++cx) {
                    const double w = (cx ? v.w[0] : 1 - v.w[0]) * (cy ? v.w[1] : 1 - v.w[1]) *
                                     (cz ? v.w[2] : 1 - v.w[2]);
                    const double* row =
                        g.tables.data() +
                        g.vertex_row(l, v.i0[0] + cx, v.i0[1] + cy, v.i0[2] + cz) * f;
                    for (int c = 0; c < f; ++c) dst[c] += w * row[c];
                }
    }
}

inline VecX encode(const HashGrid& g, const Vec3& x) {
    VecX out(g.output_dim());
    encode(g, x, out.data());
    return out;
}

/// Gradient buffer for a hash grid; tracks touched rows so the optimizer can
/// skip untouched entries and clearing stays proportional to use.
struct GridGrad {
    std::vector<double> g;
    std::vector<std::uint32_t> touched;
    std::vector<std::uint8_t> mark;

    void init(const HashGrid& grid) {
        g.assign(grid.tables.size(), 0.0);
        mark.assign(grid.total_rows, 0);
        touched.clear();
    }
    void clear(int feats_per_level) {
        for (const auto r : touched) {
            std::memset(g.data() + static_cast<std::size_t>(r) * feats_per_level, 0,
                        sizeof(double) * feats_per_level);
            mark[r] = 0;
        }
        touched.clear();
    }
};

inline void encode_backward(const HashGrid& grid, const Vec3& x, const double* d_out,
                            GridGrad& gg, Vec3* d_x = nullptr) {
    const int f = grid.cfg.feats_per_level;
    for (int l = 0; l < grid.cfg.levels; ++l) {
        const auto v = detail::locate(grid, l, x);
        const double* du = d_out + static_cast<std::size_t>(l) * f;
        double dw[3] = {0, 0, 0};
        for (int cz = 0; cz < 2; ++cz)
            for (int cy = 0; cy < 2; ++cy)
                for (int cx = 0; cx < 2; ++cx) {
                    const double wx = cx ? v.w[0] : 1 - v.w[0];
                    const double wy = cy ? v.w[1] : 1 - v.w[1];
                    const double wz = cz ? v.w[2] : 1 - v.w[2];
                    const std::size_t row =
                        grid.vertex_row(l, v.i0[0] + cx, v.i0[1] + cy, v.i0[2] + cz);
                    double* dst = gg.g.data() + row * f;
                    const double w = wx * wy * wz;
                    double dot = 0;
                    for (int c = 0; c < f; ++c) {
                        dst[c] += w * du[c];
                        dot += du[c] * grid.tables[row * f + c];
                    }
                    if (!gg.mark[row]) {
                        gg.mark[row] = 1;
                        gg.touched.push_back(static_cast<std::uint32_t>(row));
                    }
                    if (d_x) {
                        dw[0] += (cx ? 1.0 : -1.0) * wy * wz * dot;
                        dw[1] += (cy ? 1.0 : -1.0) * wx * wz * dot;
                        dw[2] += (cz ? 1.0 : -1.0) * wx * wy * dot;
                    }
                }
        if (d_x) {
            for (int a = 0; a < 3; ++a) {
                if (v.clamped[a]) continue;
                const double extent = grid.bbox_max[a] - grid.bbox_min[a];
                if (extent > 0) (*d_x)[a] += dw[a] * grid.level_res[l] / extent;
            }
        }
    }
}

/// One-hidden-layer MLP, rectifier activation, linear output.
struct Mlp {
    int in = 0, hidden = 0, out = 0;
    MatX w1, w2;  // hidden x in, out x hidden
    VecX b1, b2;

    static Mlp create(int in, int hidden, int out, Rng& rng) {
        Mlp m;
        m.in = in;
        m.hidden = hidden;
        m.out = out;
        m.w1 = MatX(hidden, in);
        m.w2 = MatX(out, hidden);
        const double a1 = std::sqrt(6.0 / in);
        const double a2 = std::sqrt(6.0 / hidden);
        for (int i = 0; i < hidden; ++i)
            for (int j = 0; j < in; ++j) m.w1(i, j) = uniform(rng, -a1, a1);
        for (int i = 0; i < out; ++i)
            for (int j = 0; j < hidden; ++j) m.w2(i, j) = uniform(rng, -a2, a2);
        m.b1 = VecX::Zero(hidden);
        m.b2 = VecX::Zero(out);
        return m;
    }
};

struct MlpBatch {
    MatX hidden_pre;  // hidden x B
    MatX output;      // out x B
};

inline MlpBatch mlp_forward(const Mlp& m, const MatX& input) {
    MlpBatch b;
    b.hidden_pre = (m.w1 * input).colwise() + m.b1;
    b.output = (m.w2 * b.hidden_pre.cwiseMax(0.0)).colwise() + m.b2;
    return b;
}

struct MlpGrads {
    MatX w1, w2;
    VecX b1, b2;

    void init(const Mlp& m) {
        w1 = MatX::Zero(m.hidden, m.in);
        w2 = MatX::Zero(m.out, m.hidden);
        b1 = VecX::Zero(m.hidden);
        b2 = VecX::Zero(m.out);
    }
    void clear() {
        w1.setZero();
        w2.setZero();
        b1.setZero();
        b2.setZero();
    }
};

inline void mlp_backward(const Mlp& m, const MatX& input, const MlpBatch& batch, const MatX& d_out,
                         MlpGrads& g, MatX* d_input = nullptr) {
    const MatX hidden_act = batch.hidden_pre.cwiseMax(0.0);
    g.w2 += d_out * hidden_act.transpose();
    g.b2 += d_out.rowwise().sum();
    MatX d_hidden = m.w2.transpose() * d_out;
    d_hidden = (batch.hidden_pre.array() > 0.0).select(d_hidden, 0.0);
    g.w1 += d_hidden * input.transpose();
    g.b1 += d_hidden.rowwise().sum();
    if (d_input) *d_input = m.w1.transpose() * d_hidden;
}

enum class FieldEncoding { hash_grid, per_gaussian };

struct FieldStackConfig {
    HashGridConfig grid;
    int d_clip = 32;
    int d_inst = 8;
    int d_reg = 16;
    int head_hidden = 64;
    int scale_levels = 3;
    bool share_grids = false;
    FieldEncoding encoding = FieldEncoding::hash_grid;
    int point_count = 0;  // only meaningful for per_gaussian encoding
};

/// Language + instance feature fields: grids (or free per-Gaussian tables in
/// the no-MHE ablation) feeding three projection heads. The language head
/// emits a CLIP-space embedding plus a raw scale channel; the regularization
/// head reads the language encoding and is supervised by the dense
/// regularization maps.
struct HashFieldStack {
    FieldStackConfig cfg;
    HashGrid language_grid, instance_grid;
    FeatureRows free_language, free_instance;  // per_gaussian encoding
    Mlp language_head, instance_head, reg_head;

    int encode_dim() const { return cfg.grid.levels * cfg.grid.feats_per_level; }
    double scale_range() const { return cfg.scale_levels - 1.0; }
};

inline HashFieldStack init_field_stack(const FieldStackConfig& cfg, const Vec3& bbox_min,
                                       const Vec3& bbox_max, std::uint64_t seed) {
    HashFieldStack s;
    s.cfg = cfg;
    Rng rng(seed);
    const int enc = cfg.grid.levels * cfg.grid.feats_per_level;
    if (cfg.encoding == FieldEncoding::hash_grid) {
        s.language_grid = HashGrid::create(cfg.grid, bbox_min, bbox_max);
        s.language_grid.init_random(rng);
        if (!cfg.share_grids) {
            s.instance_grid = HashGrid::create(cfg.grid, bbox_min, bbox_max);
            s.instance_grid.init_random(rng);
        }
    } else {
        if (cfg.point_count <= 0)
            throw config_error("per-gaussian encoding requires a positive point count");
        s.free_language = FeatureRows(cfg.point_count, enc);
        for (auto& v : s.free_language.v) v = uniform(rng, -1e-4, 1e-4);
        if (!cfg.share_grids) {
            s.free_instance = FeatureRows(cfg.point_count, enc);
            for (auto& v : s.free_instance.v) v = uniform(rng, -1e-4, 1e-4);
        }
    }
    s.language_head = Mlp::create(enc, cfg.head_hidden, cfg.d_clip + 1, rng);
    s.instance_head = Mlp::create(enc, cfg.head_hidden, cfg.d_inst, rng);
    s.reg_head = Mlp::create(enc, cfg.head_hidden, cfg.d_reg, rng);
    return s;
}

struct FieldEval {
    MatX enc_lang, enc_inst;               // encode_dim x N
    MlpBatch lang_batch, inst_batch, reg_batch;
    MatX clip;                             // d_clip x N, rows L2-normalized
    VecX raw_norm;                         // norm of the raw embedding per point
    VecX scale;                            // in [0, scale_levels - 1]
    VecX scale_raw;
    MatX inst;                             // d_inst x N
    MatX reg;                              // d_reg x N
};

namespace detail {

inline constexpr double kNormFloor = 1e-12;

inline MatX encode_batch(const HashFieldStack& s, bool instance_side,
                         const std::vector<Vec3>& positions) {
    const int enc = s.encode_dim();
    const int n = static_cast<int>(positions.size());
    MatX e(enc, n);
    if (s.cfg.encoding == FieldEncoding::per_gaussian) {
        const FeatureRows& table = (instance_side && !s.cfg.share_grids) ? s.free_instance
                                                                         : s.free_language;
        if (table.rows != n)
            throw config_error("per-gaussian feature table does not match point count");
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < enc; ++c) e(c, i) = table.row(i)[c];
        return e;
    }
    const HashGrid& grid = (instance_side && !s.cfg.share_grids) ? s.instance_grid
                                                                 : s.language_grid;
    std::vector<double> buf(enc);
    for (int i = 0; i < n; ++i) {
        encode(grid, positions[i], buf.data());
        for (int c = 0; c < enc; ++c) e(c, i) = buf[c];
    }
    return e;
}

}  // namespace detail

inline FieldEval evaluate_fields(const HashFieldStack& s, const std::vector<Vec3>& positions) {
    FieldEval ev;
    const int n = static_cast<int>(positions.size());
    ev.enc_lang = detail::encode_batch(s, false, positions);
    ev.enc_inst = s.cfg.share_grids ? ev.enc_lang : detail::encode_batch(s, true, positions);

    ev.lang_batch = mlp_forward(s.language_head, ev.enc_lang);
    ev.inst_batch = mlp_forward(s.instance_head, ev.enc_inst);
    ev.reg_batch = mlp_forward(s.reg_head, ev.enc_lang);

    const int dc = s.cfg.d_clip;
    ev.clip = MatX(dc, n);
    ev.raw_norm = VecX(n);
    ev.scale = VecX(n);
    ev.scale_raw = VecX(n);
    for (int i = 0; i < n; ++i) {
        const auto raw = ev.lang_batch.output.col(i).head(dc);
        const double nn = std::max(raw.norm(), detail::kNormFloor);
        ev.raw_norm[i] = nn;
        ev.clip.col(i) = raw / nn;
        ev.scale_raw[i] = ev.lang_batch.output(dc, i);
        ev.scale[i] = sigmoid(ev.scale_raw[i]) * s.scale_range();
    }
    ev.inst = ev.inst_batch.output;
    ev.reg = ev.reg_batch.output;
    return ev;
}

/// (L2-normalized CLIP embedding, scale in [0, S-1]) at one position.
inline std::pair<VecX, double> language_features(const HashFieldStack& s, const Vec3& x) {
    const FieldEval ev = evaluate_fields(s, {x});
    return {ev.clip.col(0), ev.scale[0]};
}

/// Raw instance embedding (the contrastive loss shapes its geometry).
inline VecX instance_features(const HashFieldStack& s, const Vec3& x) {
    return evaluate_fields(s, {x}).inst.col(0);
}

struct FieldGrads {
    GridGrad lang_grid, inst_grid;
    FeatureRows d_free_lang, d_free_inst;
    MlpGrads lang_head, inst_head, reg_head;
    std::vector<Vec3> d_position;

    void init(const HashFieldStack& s) {
        if (s.cfg.encoding == FieldEncoding::hash_grid) {
            lang_grid.init(s.language_grid);
            if (!s.cfg.share_grids) inst_grid.init(s.instance_grid);
        } else {
            d_free_lang = FeatureRows(s.free_language.rows, s.free_language.cols);
            if (!s.cfg.share_grids)
                d_free_inst = FeatureRows(s.free_instance.rows, s.free_instance.cols);
        }
        lang_head.init(s.language_head);
        inst_head.init(s.instance_head);
        reg_head.init(s.reg_head);
    }
    void clear(const HashFieldStack& s) {
        if (s.cfg.encoding == FieldEncoding::hash_grid) {
            lang_grid.clear(s.cfg.grid.feats_per_level);
            if (!s.cfg.share_grids) inst_grid.clear(s.cfg.grid.feats_per_level);
        } else {
            std::fill(d_free_lang.v.begin(), d_free_lang.v.end(), 0.0);
            std::fill(d_free_inst.v.begin(), d_free_inst.v.end(), 0.0);
        }
        lang_head.clear();
        inst_head.clear();
        reg_head.clear();
        d_position.clear();
    }
};

/// Backpropagates per-point gradients (w.r.t. normalized clip embedding,
/// scale value, instance and regularization features) into grid tables, head
/// weights and optionally the query positions.
inline void evaluate_fields_backward(const HashFieldStack& s, const std::vector<Vec3>& positions,
                                     const FieldEval& ev, const MatX& d_clip, const VecX& d_scale,
                                     const MatX& d_inst, const MatX& d_reg, FieldGrads& grads,
                                     bool want_position_grad) {
    const int n = static_cast<int>(positions.size());
    const int dc = s.cfg.d_clip;

    MatX d_lang_out = MatX::Zero(dc + 1, n);
    for (int i = 0; i < n; ++i) {
        const auto e = ev.clip.col(i);
        const auto de = d_clip.col(i);
        d_lang_out.col(i).head(dc) = (de - e * e.dot(de)) / ev.raw_norm[i];
        const double sg = sigmoid(ev.scale_raw[i]);
        d_lang_out(dc, i) = d_scale[i] * s.scale_range() * sg * (1.0 - sg);
    }

    MatX d_enc_lang, d_enc_inst, d_enc_reg;
    mlp_backward(s.language_head, ev.enc_lang, ev.lang_batch, d_lang_out, grads.lang_head,
                 &d_enc_lang);
    mlp_backward(s.instance_head, ev.enc_inst, ev.inst_batch, d_inst, grads.inst_head,
                 &d_enc_inst);
    mlp_backward(s.reg_head, ev.enc_lang, ev.reg_batch, d_reg, grads.reg_head, &d_enc_reg);
    d_enc_lang += d_enc_reg;
    if (s.cfg.share_grids) {
        d_enc_lang += d_enc_inst;
        d_enc_inst.setZero();
    }

    if (want_position_grad) grads.d_position.assign(n, Vec3::Zero());

    const int enc = s.encode_dim();
    std::vector<double> buf(enc);
    if (s.cfg.encoding == FieldEncoding::per_gaussian) {
        for (int i = 0; i < n; ++i) {
            for (int c = 0; c < enc; ++c) grads.d_free_lang.row(i)[c] += d_enc_lang(c, i);
            if (!s.cfg.share_grids)
                for (int c = 0; c < enc; ++c) grads.d_free_inst.row(i)[c] += d_enc_inst(c, i);
        }
        return;
    }
    for (int i = 0; i < n; ++i) {
        Vec3* dx = want_position_grad ? &grads.d_position[i] : nullptr;
        for (int c = 0; c < enc; ++c) buf[c] = d_enc_lang(c, i);
        encode_backward(s.language_grid, positions[i], buf.data(), grads.lang_grid, dx);
        if (!s.cfg.share_grids) {
            for (int c = 0; c < enc; ++c) buf[c] = d_enc_inst(c, i);
            encode_backward(s.instance_grid, positions[i], buf.data(), grads.inst_grid, dx);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic SPLATFIELD1, u32/f32 config header, then raw
// little-endian f32 parameter arrays in declaration order.
// ---------------------------------------------------------------------------

inline constexpr char kFieldMagic[11] = {'S', 'P', 'L', 'A', 'T', 'F', 'I', 'E', 'L', 'D', '1'};

namespace detail {

struct BinWriter {
    std::ofstream f;
    explicit BinWriter(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw io_error("cannot open for writing: " + path);
    }
    void u32(std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
    void f32(float v) { f.write(reinterpret_cast<const char*>(&v), 4); }
    void f32_array(const double* p, std::size_t count) {
        std::vector<float> tmp(count);
        for (std::size_t i = 0; i < count; ++i) tmp[i] = static_cast<float>(p[i]);
        f.write(reinterpret_cast<const char*>(tmp.data()), 4 * static_cast<std::streamsize>(count));
    }
};

struct BinReader {
    std::ifstream f;
    std::string path;
    std::size_t offset = 0;
    explicit BinReader(const std::string& p) : f(p, std::ios::binary), path(p) {
        if (!f) throw io_error("cannot open: " + p);
    }
    void raw(void* dst, std::size_t bytes, const char* what) {
        f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
        if (static_cast<std::size_t>(f.gcount()) != bytes)
            throw io_error(path + ": truncated while reading " + what + " at byte offset " +
                           std::to_string(offset));
        offset += bytes;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        raw(&v, 4, what);
        return v;
    }
    float f32(const char* what) {
        float v;
        raw(&v, 4, what);
        return v;
    }
    void f32_array(double* p, std::size_t count, const char* what) {
        std::vector<float> tmp(count);
        raw(tmp.data(), 4 * count, what);
        for (std::size_t i = 0; i < count; ++i) p[i] = tmp[i];
    }
};

inline void write_mlp(BinWriter& w, const Mlp& m) {
    for (int i = 0; i < m.hidden; ++i)
        for (int j = 0; j < m.in; ++j) w.f32(static_cast<float>(m.w1(i, j)));
    for (int i = 0; i < m.hidden; ++i) w.f32(static_cast<float>(m.b1[i]));
    for (int i = 0; i < m.out; ++i)
        for (int j = 0; j < m.hidden; ++j) w.f32(static_cast<float>(m.w2(i, j)));
    for (int i = 0; i < m.out; ++i) w.f32(static_cast<float>(m.b2[i]));
}

inline void read_mlp(BinReader& r, Mlp& m) {
    for (int i = 0; i < m.hidden; ++i)
        for (int j = 0; j < m.in; ++j) m.w1(i, j) = r.f32("head weights");
    for (int i = 0; i < m.hidden; ++i) m.b1[i] = r.f32("head bias");
    for (int i = 0; i < m.out; ++i)
        for (int j = 0; j < m.hidden; ++j) m.w2(i, j) = r.f32("head weights");
    for (int i = 0; i < m.out; ++i) m.b2[i] = r.f32("head bias");
}

}  // namespace detail

inline void save_field_stack(const HashFieldStack& s, const std::string& path) {
    detail::BinWriter w(path);
    w.f.write(kFieldMagic, sizeof(kFieldMagic));
    const auto& g = s.cfg.grid;
    w.u32(g.levels);
    w.u32(g.base_resolution);
    w.f32(static_cast<float>(g.growth));
    w.u32(g.table_size);
    w.u32(g.feats_per_level);
    w.u32(s.cfg.head_hidden);
    w.u32(s.cfg.d_clip);
    w.u32(s.cfg.d_inst);
    w.u32(s.cfg.d_reg);
    w.u32(s.cfg.scale_levels);
    w.u32(s.cfg.share_grids ? 1 : 0);
    w.u32(s.cfg.encoding == FieldEncoding::per_gaussian ? 1 : 0);
    w.u32(s.cfg.point_count);
    const Vec3 bmin = s.cfg.encoding == FieldEncoding::hash_grid ? s.language_grid.bbox_min
                                                                 : Vec3::Zero();
    const Vec3 bmax = s.cfg.encoding == FieldEncoding::hash_grid ? s.language_grid.bbox_max
                                                                 : Vec3::Ones();
    for (int a = 0; a < 3; ++a) w.f32(static_cast<float>(bmin[a]));
    for (int a = 0; a < 3; ++a) w.f32(static_cast<float>(bmax[a]));

    if (s.cfg.encoding == FieldEncoding::hash_grid) {
        w.f32_array(s.language_grid.tables.data(), s.language_grid.tables.size());
        if (!s.cfg.share_grids)
            w.f32_array(s.instance_grid.tables.data(), s.instance_grid.tables.size());
    } else {
        w.f32_array(s.free_language.v.data(), s.free_language.v.size());
        if (!s.cfg.share_grids) w.f32_array(s.free_instance.v.data(), s.free_instance.v.size());
    }
    detail::write_mlp(w, s.language_head);
    detail::write_mlp(w, s.instance_head);
    detail::write_mlp(w, s.reg_head);
    if (!w.f) throw io_error("write failed: " + path);
}

inline HashFieldStack load_field_stack(const std::string& path) {
    detail::BinReader r(path);
    char magic[sizeof(kFieldMagic)];
    r.raw(magic, sizeof(magic), "magic");
    if (std::memcmp(magic, kFieldMagic, sizeof(magic)) != 0)
        throw io_error(path + ": bad magic at byte offset 0 (expected SPLATFIELD1)");

    FieldStackConfig cfg;
    cfg.grid.levels = static_cast<int>(r.u32("levels"));
    cfg.grid.base_resolution = static_cast<int>(r.u32("base resolution"));
    cfg.grid.growth = r.f32("growth");
    cfg.grid.table_size = static_cast<int>(r.u32("table size"));
    cfg.grid.feats_per_level = static_cast<int>(r.u32("feats per level"));
    cfg.head_hidden = static_cast<int>(r.u32("head width"));
    cfg.d_clip = static_cast<int>(r.u32("d_clip"));
    cfg.d_inst = static_cast<int>(r.u32("d_inst"));
    cfg.d_reg = static_cast<int>(r.u32("d_reg"));
    cfg.scale_levels = static_cast<int>(r.u32("scale levels"));
    cfg.share_grids = r.u32("share flag") != 0;
    cfg.encoding = r.u32("encoding mode") != 0 ? FieldEncoding::per_gaussian
                                               : FieldEncoding::hash_grid;
    cfg.point_count = static_cast<int>(r.u32("point count"));
    Vec3 bmin, bmax;
    for (int a = 0; a < 3; ++a) bmin[a] = r.f32("bbox");
    for (int a = 0; a < 3; ++a) bmax[a] = r.f32("bbox");

    HashFieldStack s = init_field_stack(cfg, bmin, bmax, /*seed=*/0);
    if (cfg.encoding == FieldEncoding::hash_grid) {
        r.f32_array(s.language_grid.tables.data(), s.language_grid.tables.size(), "language grid");
        if (!cfg.share_grids)
            r.f32_array(s.instance_grid.tables.data(), s.instance_grid.tables.size(),
                        "instance grid");
    } else {
        r.f32_array(s.free_language.v.data(), s.free_language.v.size(), "language table");
        if (!cfg.share_grids)
            r.f32_array(s.free_instance.v.data(), s.free_instance.v.size(), "instance table");
    }
    detail::read_mlp(r, s.language_head);
    detail::read_mlp(r, s.instance_head);
    detail::read_mlp(r, s.reg_head);
    char extra;
    if (r.f.read(&extra, 1))
        throw io_error(path + ": trailing bytes after byte offset " + std::to_string(r.offset));
    return s;
}

}  // namespace splatsense
