#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace splatsense {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

using Rng = std::mt19937_64;

/// Bad or inconsistent configuration / usage (CLI exit code 1).
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// File / format / data problems (CLI exit code 2).
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite values encountered during optimization (CLI exit code 3).
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double inverse_sigmoid(double y) { return std::log(y / (1.0 - y)); }

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double normal(Rng& rng, double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

/// Shortest decimal form that round-trips a double exactly.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Splits [0, n) into `threads` contiguous chunks and runs `fn(begin, end)` on
/// each. Chunk boundaries depend only on (n, threads), so results that are
/// accumulated per-element stay reproducible for a fixed thread count.
inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t, std::size_t)>& fn) {
    if (threads <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) continue;
        pool.emplace_back(fn, begin, end);
    }
    fn(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

inline int default_thread_count() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(std::min(hc, 8u));
}

}  // namespace splatsense
