#pragma once

#include <string>
#include <vector>

#include "lirm/common.hpp"

namespace lirm {

// Linear-light float image, row-major, c interleaved channels.
struct Image {
    int w = 0, h = 0, c = 0;
    std::vector<float> px;

    Image() = default;
    Image(int w_, int h_, int c_) : w(w_), h(h_), c(c_), px(static_cast<std::size_t>(w_) * h_ * c_, 0.f) {}

    float& at(int x, int y, int ch) { return px[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    float at(int x, int y, int ch) const { return px[(static_cast<std::size_t>(y) * w + x) * c + ch]; }
    std::size_t size() const { return px.size(); }
    bool empty() const { return px.empty(); }
};

float srgb_encode(float linear);
float srgb_decode(float srgb);

// 8-bit PNG. Values are sRGB-encoded on write and decoded back to linear on read
// unless `linear_values` is set (masks store raw values).
void write_png(const std::string& path, const Image& img, bool linear_values = false);
Image read_png(const std::string& path, bool linear_values = false);

// PFM, little-endian 32-bit float ("PF" for 3 channels, "Pf" for 1).
void write_pfm(const std::string& path, const Image& img);
Image read_pfm(const std::string& path);

// Bilinear sample in pixel units; integer coordinates land on pixel centers.
// Clamps at borders.
void bilinear_sample(const Image& img, double x, double y, float* out);

Image resize_bilinear(const Image& img, int ow, int oh);

} // namespace lirm
