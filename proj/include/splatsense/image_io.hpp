#pragma once

#include "splatsense/raster.hpp"

#include <fstream>

namespace splatsense {

/// Integer label image (0 = background, k >= 1 = instance).
struct LabelImage {
    int height = 0, width = 0;
    std::vector<int> labels;

    LabelImage() = default;
    LabelImage(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}
    int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
    int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
};

inline void write_ppm(const std::string& path, const FeatureMap& rgb) {
    if (rgb.dim != 3) throw config_error("PPM export needs a 3-channel map");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << "P6\n" << rgb.width << " " << rgb.height << "\n255\n";
    std::vector<unsigned char> buf(rgb.pixel_count() * 3);
    for (std::size_t i = 0; i < rgb.pixel_count() * 3; ++i) {
        const double v = std::clamp(rgb.data[i], 0.0, 1.0);
        buf[i] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw io_error("write failed: " + path);
}

/// Single-channel values clamped to [0, 1] and quantized to 8 bits.
inline void write_pgm(const std::string& path, const FeatureMap& map) {
    if (map.dim != 1) throw config_error("PGM export needs a 1-channel map");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << "P5\n" << map.width << " " << map.height << "\n255\n";
    std::vector<unsigned char> buf(map.pixel_count());
    for (std::size_t i = 0; i < map.pixel_count(); ++i)
        buf[i] = static_cast<unsigned char>(std::lround(std::clamp(map.data[i], 0.0, 1.0) * 255.0));
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw io_error("write failed: " + path);
}

inline void write_mask_pgm(const std::string& path, const LabelImage& mask) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open for writing: " + path);
    f << "P5\n" << mask.width << " " << mask.height << "\n255\n";
    std::vector<unsigned char> buf(mask.labels.size());
    for (std::size_t i = 0; i < mask.labels.size(); ++i) {
        if (mask.labels[i] < 0 || mask.labels[i] > 255)
            throw io_error(path + ": instance id " + std::to_string(mask.labels[i]) +
                           " does not fit 8-bit PGM");
        buf[i] = static_cast<unsigned char>(mask.labels[i]);
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw io_error("write failed: " + path);
}

inline LabelImage read_mask_pgm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("cannot open: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P5") throw io_error(path + ": expected binary PGM (P5), got '" + magic + "'");
    if (w < 1 || h < 1 || maxval != 255) throw io_error(path + ": unsupported PGM header");
    f.get();  // single whitespace after header
    LabelImage img(h, w);
    std::vector<unsigned char> buf(img.labels.size());
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(f.gcount()) != buf.size())
        throw io_error(path + ": truncated pixel payload");
    for (std::size_t i = 0; i < buf.size(); ++i) img.labels[i] = buf[i];
    return img;
}

}  // namespace splatsense
