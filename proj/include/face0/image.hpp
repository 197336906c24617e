#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "face0/errors.hpp"
#include "face0/tensor.hpp"

namespace face0 {

// Images are 3xHxW tensors with values in [-1, 1]; on disk they are binary
// PPM (P6, maxval 255). Quantization rounds to nearest so a write/read
// round-trip of already-quantized data is exact.

inline std::uint8_t quantize_u8(float v) {
    const float scaled = (v + 1.0f) * 127.5f;
    const long r = std::lround(scaled);
    return static_cast<std::uint8_t>(r < 0 ? 0 : (r > 255 ? 255 : r));
}

inline float dequantize_u8(std::uint8_t b) {
    return static_cast<float>(b) / 127.5f - 1.0f;
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError("write_ppm: want 3xHxW, got " + dims_str(image.dims));
    const int h = image.dim(1), w = image.dim(2);
    std::string buf = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    buf.reserve(buf.size() + static_cast<std::size_t>(3) * h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                buf.push_back(static_cast<char>(quantize_u8(image.at3(c, y, x))));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string magic;
    in >> magic;
    if (magic != "P6") throw IoError("'" + path.string() + "' is not a binary PPM");
    int w = 0, h = 0, maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255)
        throw IoError("'" + path.string() + "' has an unsupported PPM header");
    in.get();  // single whitespace after the header
    std::vector<char> raw(static_cast<std::size_t>(3) * w * h);
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (!in) throw IoError("'" + path.string() + "' is truncated");
    Tensor img = Tensor::zeros({3, h, w});
    std::size_t p = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at3(c, y, x) = dequantize_u8(static_cast<std::uint8_t>(raw[p++]));
    return img;
}

// Tiles images (all the same size) into a grid, left-to-right then
// top-to-bottom, with a thin black separator.
inline Tensor mosaic(const std::vector<Tensor>& images, int cols, int gap = 2) {
    if (images.empty()) throw ContractError("mosaic: no images");
    if (cols < 1) throw ContractError("mosaic: cols must be positive");
    const int h = images[0].dim(1), w = images[0].dim(2);
    for (const Tensor& t : images)
        if (t.rank() != 3 || t.dim(0) != 3 || t.dim(1) != h || t.dim(2) != w)
            throw ShapeError("mosaic: mismatched tile dims " + dims_str(t.dims));
    const int n = static_cast<int>(images.size());
    const int rows = (n + cols - 1) / cols;
    Tensor out = Tensor::full({3, rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap}, -1.0f);
    for (int i = 0; i < n; ++i) {
        const int oy = (i / cols) * (h + gap);
        const int ox = (i % cols) * (w + gap);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) out.at3(c, oy + y, ox + x) = images[i].at3(c, y, x);
    }
    return out;
}

}  // namespace face0
