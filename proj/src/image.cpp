#include "lirm/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace lirm {

float srgb_encode(float v) {
    v = std::clamp(v, 0.0f, 1.0f);
    return v <= 0.0031308f ? 12.92f * v : 1.055f * std::pow(v, 1.0f / 2.4f) - 0.055f;
}

float srgb_decode(float v) {
    return v <= 0.04045f ? v / 12.92f : std::pow((v + 0.055f) / 1.055f, 2.4f);
}

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

} // namespace

void write_png(const std::string& path, const Image& img, bool linear_values) {
    require(img.c == 1 || img.c == 3, "write_png supports 1 or 3 channels, got " + std::to_string(img.c));
    FilePtr fp(fopen(path.c_str(), "wb"));
    require(fp != nullptr, "cannot open '" + path + "' for writing");

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("libpng error writing '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.w, img.h, 8,
                 img.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(static_cast<std::size_t>(img.w) * img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            for (int ch = 0; ch < img.c; ++ch) {
                float v = img.at(x, y, ch);
                float enc = linear_values ? std::clamp(v, 0.0f, 1.0f) : srgb_encode(v);
                row[static_cast<std::size_t>(x) * img.c + ch] =
                    static_cast<png_byte>(std::lround(enc * 255.0f));
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png(const std::string& path, bool linear_values) {
    FilePtr fp(fopen(path.c_str(), "rb"));
    require(fp != nullptr, "cannot open '" + path + "' for reading");

    png_byte header[8];
    require(fread(header, 1, 8, fp.get()) == 8 && !png_sig_cmp(header, 0, 8),
            "'" + path + "' is not a PNG file");

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("libpng error reading '" + path + "'");
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_packing(png);
    if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = static_cast<int>(png_get_channels(png, info));
    require(c == 1 || c == 3, "read_png: unsupported channel count " + std::to_string(c));

    Image img(w, h, c);
    std::vector<png_byte> row(static_cast<std::size_t>(w) * c);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                float enc = row[static_cast<std::size_t>(x) * c + ch] / 255.0f;
                img.at(x, y, ch) = linear_values ? enc : srgb_decode(enc);
            }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

void write_pfm(const std::string& path, const Image& img) {
    require(img.c == 1 || img.c == 3, "write_pfm supports 1 or 3 channels");
    FilePtr fp(fopen(path.c_str(), "wb"));
    require(fp != nullptr, "cannot open '" + path + "' for writing");
    fprintf(fp.get(), "%s\n%d %d\n-1.0\n", img.c == 3 ? "PF" : "Pf", img.w, img.h);
    // rows bottom-to-top per the header convention
    for (int y = img.h - 1; y >= 0; --y) {
        const float* src = img.px.data() + static_cast<std::size_t>(y) * img.w * img.c;
        require(fwrite(src, sizeof(float), static_cast<std::size_t>(img.w) * img.c, fp.get()) ==
                    static_cast<std::size_t>(img.w) * img.c,
                "short write to '" + path + "'");
    }
}

Image read_pfm(const std::string& path) {
    FilePtr fp(fopen(path.c_str(), "rb"));
    require(fp != nullptr, "cannot open '" + path + "' for reading");
    char tag[3] = {0, 0, 0};
    int w = 0, h = 0;
    float scale = 0.f;
    require(fscanf(fp.get(), "%2s %d %d %f", tag, &w, &h, &scale) == 4, "bad PFM header in '" + path + "'");
    fgetc(fp.get()); // single whitespace after the scale line
    int c = 0;
    if (strcmp(tag, "PF") == 0) c = 3;
    else if (strcmp(tag, "Pf") == 0) c = 1;
    require(c != 0, "bad PFM tag in '" + path + "'");
    require(scale < 0.f, "big-endian PFM not supported: '" + path + "'");
    Image img(w, h, c);
    for (int y = h - 1; y >= 0; --y) {
        float* dst = img.px.data() + static_cast<std::size_t>(y) * w * c;
        require(fread(dst, sizeof(float), static_cast<std::size_t>(w) * c, fp.get()) ==
                    static_cast<std::size_t>(w) * c,
                "short read from '" + path + "'");
    }
    return img;
}

void bilinear_sample(const Image& img, double x, double y, float* out) {
    const double cx = std::clamp(x, 0.0, static_cast<double>(img.w - 1));
    const double cy = std::clamp(y, 0.0, static_cast<double>(img.h - 1));
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, img.w - 1);
    const int y1 = std::min(y0 + 1, img.h - 1);
    const float fx = static_cast<float>(cx - x0);
    const float fy = static_cast<float>(cy - y0);
    for (int ch = 0; ch < img.c; ++ch) {
        float a = img.at(x0, y0, ch) * (1 - fx) + img.at(x1, y0, ch) * fx;
        float b = img.at(x0, y1, ch) * (1 - fx) + img.at(x1, y1, ch) * fx;
        out[ch] = a * (1 - fy) + b * fy;
    }
}

Image resize_bilinear(const Image& img, int ow, int oh) {
    Image out(ow, oh, img.c);
    std::vector<float> tmp(img.c);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double sx = (x + 0.5) * img.w / ow - 0.5;
            double sy = (y + 0.5) * img.h / oh - 0.5;
            bilinear_sample(img, sx, sy, tmp.data());
            for (int ch = 0; ch < img.c; ++ch) out.at(x, y, ch) = tmp[ch];
        }
    return out;
}

} // namespace lirm
