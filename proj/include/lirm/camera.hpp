#pragma once

#include <string>
#include <vector>

#include "lirm/image.hpp"
#include "lirm/tensor.hpp"
#include "lirm/vecmath.hpp"

namespace lirm {

struct Camera {
    Vec3 position;
    Vec3 target;
    Vec3 up{0, 1, 0};
    double fov_deg = 50.0; // vertical
    int width = 64;
    int height = 64;
};

struct CameraBasis {
    Vec3 right, up, forward;
};

// Right-handed, y-up world. Camera-space z points toward the viewer.
CameraBasis camera_basis(const Camera& cam);

// Per-pixel line encoding (direction, direction x origin); invariant to sliding
// the origin along the ray.
struct RayBundle {
    int w = 0, h = 0;
    std::vector<Vec3> origin, dir, moment;

    std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * w + x; }
};

// Rays through pixel centers at (i+0.5, j+0.5).
RayBundle plucker_rays(const Camera& cam);

struct PixelBox {
    int x0 = 0, y0 = 0, w = 0, h = 0;
};

struct CropResult {
    RayBundle rays;
    std::vector<Image> images;
};

// Rays for the full image come first; the box is then cropped and bilinearly
// resampled together with the given images. Directions are re-normalized and
// moments recomputed from the interpolated origins.
CropResult crop_resize_rays(const RayBundle& rays, const std::vector<Image>& images,
                            const PixelBox& box, int out_w, int out_h);

enum class ViewRole { Input, Output, Extra };

struct SampledViews {
    std::vector<Camera> cams;
    std::vector<ViewRole> roles;
};

struct ViewSampleOptions {
    int width = 64, height = 64;
    double bounding_radius = 0.8;
    int train_count = 32;
};

enum class ViewMode { Train, Eval };

// Eval: elevations {0,20,40} x 16 azimuths, fov 50, 8 inputs alternating between
// the 20/40 rings, 12 outputs drawn from the rest. Train: random fov in [15,85],
// elevation in [-5,70], azimuth in [0,360). Camera distance is the minimal one
// that covers the bounding sphere.
SampledViews sample_views(ViewMode mode, std::uint64_t seed, const ViewSampleOptions& opts);

double cover_distance(double radius, double fov_deg);

// --- tokenization ------------------------------------------------------------

constexpr int kPatchSize = 8;
constexpr int kTokenChannels = 12; // rgb + background rgb + plucker 6

// Interleaved per-pixel channel stack for one view: [h*w*12].
std::vector<float> token_channel_stack(const Image& rgb, const Image& bg, const RayBundle& rays);

// Non-overlapping patches, row-major per view, views concatenated.
// Token length = patch*patch*channels.
std::vector<float> patchify_stack(const std::vector<float>& stack, int w, int h, int channels,
                                  int patch);
std::vector<float> unpatchify_stack(const std::vector<float>& tokens, int w, int h, int channels,
                                    int patch);

template <typename T>
Tensor<T> patchify(const std::vector<const Image*>& rgb, const std::vector<const Image*>& bg,
                   const std::vector<const RayBundle*>& rays, int patch = kPatchSize) {
    require(!rgb.empty() && rgb.size() == bg.size() && rgb.size() == rays.size(),
            "patchify: view lists must be non-empty and the same length");
    std::vector<T> out;
    std::size_t token_len = static_cast<std::size_t>(patch) * patch * kTokenChannels;
    std::size_t n_tokens = 0;
    for (std::size_t v = 0; v < rgb.size(); ++v) {
        const Image& im = *rgb[v];
        require(im.w % patch == 0 && im.h % patch == 0,
                strformat("patchify: image %dx%d not divisible by patch %d; pad or crop first", im.w,
                          im.h, patch));
        std::vector<float> stack = token_channel_stack(im, *bg[v], *rays[v]);
        std::vector<float> toks = patchify_stack(stack, im.w, im.h, kTokenChannels, patch);
        n_tokens += toks.size() / token_len;
        for (float f : toks) out.push_back(static_cast<T>(f));
    }
    return Tensor<T>::from({n_tokens, token_len}, std::move(out));
}

// --- camera file -------------------------------------------------------------

struct ViewMeta {
    Camera cam;
    bool is_input = false;
};

struct CamerasFile {
    std::string scene;
    double bounding_radius = 0.8;
    std::vector<ViewMeta> views;
};

void write_cameras_json(const std::string& path, const CamerasFile& f);
CamerasFile read_cameras_json(const std::string& path);

} // namespace lirm
