#pragma once

// RGB images with channel values in [0, 1], plus binary PPM (P6) and PGM
// (P5) file I/O.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "poar/errors.hpp"

namespace poar {

struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> pixels;  // height × width × 3, row-major

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w * 3, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_ppm(const Image& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot write image " + path);
    out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
    std::vector<char> bytes(img.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<char>(to_byte(img.pixels[i]));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

inline std::size_t read_header_int(std::istream& in, const std::string& path) {
    int c = in.peek();
    while (c == ' ' || c == '\n' || c == '\r' || c == '\t' || c == '#') {
        if (c == '#') {
            std::string skip;
            std::getline(in, skip);
        } else {
            in.get();
        }
        c = in.peek();
    }
    std::size_t v = 0;
    if (!(in >> v)) throw parse_error("bad PPM header in " + path);
    return v;
}

}  // namespace detail

inline Image read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error("cannot open image " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw parse_error("not a binary PPM (P6): " + path);
    const std::size_t w = detail::read_header_int(in, path);
    const std::size_t h = detail::read_header_int(in, path);
    const std::size_t maxval = detail::read_header_int(in, path);
    if (maxval != 255 || w == 0 || h == 0) throw parse_error("unsupported PPM format in " + path);
    in.get();
    std::vector<char> bytes(w * h * 3);
    in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw parse_error("truncated PPM " + path);
    Image img(h, w);
    for (std::size_t i = 0; i < bytes.size(); ++i)
        img.pixels[i] = static_cast<unsigned char>(bytes[i]) / 255.0;
    return img;
}

// Grayscale map written as 8-bit PGM, scaled so the maximum maps to 255.
inline void write_pgm(const std::vector<double>& values, std::size_t rows, std::size_t cols, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw error("cannot write image " + path);
    out << "P5\n" << cols << ' ' << rows << "\n255\n";
    const double mx = values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
    for (double v : values) out.put(static_cast<char>(to_byte(mx > 0 ? v / mx : 0.0)));
}

}  // namespace poar
