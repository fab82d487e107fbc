#include "lirm/camera.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "lirm/rng.hpp"

namespace lirm {

CameraBasis camera_basis(const Camera& cam) {
    require(cam.fov_deg > 0.0 && cam.fov_deg < 180.0,
            strformat("camera fov %.3f out of (0, 180)", cam.fov_deg));
    Vec3 fwd = cam.target - cam.position;
    require(length(fwd) > 1e-12, "camera position equals target");
    fwd = normalize(fwd);
    Vec3 r = cross(fwd, cam.up);
    require(length(r) > 1e-9, "camera up vector is parallel to the view direction");
    r = normalize(r);
    Vec3 u = cross(r, fwd);
    return {r, u, fwd};
}

RayBundle plucker_rays(const Camera& cam) {
    CameraBasis basis = camera_basis(cam);
    const double tan_y = std::tan(deg2rad(cam.fov_deg) * 0.5);
    const double tan_x = tan_y * static_cast<double>(cam.width) / cam.height;

    RayBundle rb;
    rb.w = cam.width;
    rb.h = cam.height;
    const std::size_t n = static_cast<std::size_t>(cam.width) * cam.height;
    rb.origin.resize(n);
    rb.dir.resize(n);
    rb.moment.resize(n);
    for (int y = 0; y < cam.height; ++y) {
        const double py = (1.0 - 2.0 * (y + 0.5) / cam.height) * tan_y;
        for (int x = 0; x < cam.width; ++x) {
            const double px = (2.0 * (x + 0.5) / cam.width - 1.0) * tan_x;
            Vec3 d = normalize(basis.forward + px * basis.right + py * basis.up);
            std::size_t i = rb.idx(x, y);
            rb.origin[i] = cam.position;
            rb.dir[i] = d;
            rb.moment[i] = cross(d, cam.position);
        }
    }
    return rb;
}

namespace {

Vec3 bilerp(const std::vector<Vec3>& v, int w, int h, double x, double y) {
    const double cx = clampd(x, 0.0, w - 1.0);
    const double cy = clampd(y, 0.0, h - 1.0);
    const int x0 = static_cast<int>(std::floor(cx));
    const int y0 = static_cast<int>(std::floor(cy));
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = cx - x0, fy = cy - y0;
    Vec3 a = lerp(v[static_cast<std::size_t>(y0) * w + x0], v[static_cast<std::size_t>(y0) * w + x1], fx);
    Vec3 b = lerp(v[static_cast<std::size_t>(y1) * w + x0], v[static_cast<std::size_t>(y1) * w + x1], fx);
    return lerp(a, b, fy);
}

} // namespace

CropResult crop_resize_rays(const RayBundle& rays, const std::vector<Image>& images,
                            const PixelBox& box, int out_w, int out_h) {
    require(box.w > 0 && box.h > 0, "empty crop box");
    require(box.x0 >= 0 && box.y0 >= 0 && box.x0 + box.w <= rays.w && box.y0 + box.h <= rays.h,
            strformat("crop box (%d,%d,%dx%d) outside %dx%d image", box.x0, box.y0, box.w, box.h,
                      rays.w, rays.h));
    require(out_w > 0 && out_h > 0, "crop output size must be positive");
    for (const Image& im : images)
        require(im.w == rays.w && im.h == rays.h, "crop: image extents do not match the ray bundle");

    CropResult res;
    res.rays.w = out_w;
    res.rays.h = out_h;
    const std::size_t n = static_cast<std::size_t>(out_w) * out_h;
    res.rays.origin.resize(n);
    res.rays.dir.resize(n);
    res.rays.moment.resize(n);
    res.images.reserve(images.size());
    for (const Image& im : images) res.images.emplace_back(out_w, out_h, im.c);

    std::vector<float> tmp(16);
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const double sx = box.x0 + (x + 0.5) * static_cast<double>(box.w) / out_w - 0.5;
            const double sy = box.y0 + (y + 0.5) * static_cast<double>(box.h) / out_h - 0.5;
            const std::size_t i = res.rays.idx(x, y);
            Vec3 o = bilerp(rays.origin, rays.w, rays.h, sx, sy);
            Vec3 d = normalize(bilerp(rays.dir, rays.w, rays.h, sx, sy));
            res.rays.origin[i] = o;
            res.rays.dir[i] = d;
            res.rays.moment[i] = cross(d, o);
            for (std::size_t k = 0; k < images.size(); ++k) {
                bilinear_sample(images[k], sx, sy, tmp.data());
                for (int ch = 0; ch < images[k].c; ++ch) res.images[k].at(x, y, ch) = tmp[ch];
            }
        }
    return res;
}

double cover_distance(double radius, double fov_deg) {
    return radius / std::sin(deg2rad(fov_deg) * 0.5);
}

namespace {

Camera orbit_camera(double elev_deg, double azim_deg, double dist, double fov_deg, int w, int h) {
    const double el = deg2rad(elev_deg), az = deg2rad(azim_deg);
    Camera cam;
    cam.position = Vec3(std::cos(el) * std::cos(az), std::sin(el), std::cos(el) * std::sin(az)) * dist;
    cam.target = Vec3(0, 0, 0);
    cam.up = Vec3(0, 1, 0);
    cam.fov_deg = fov_deg;
    cam.width = w;
    cam.height = h;
    return cam;
}

} // namespace

SampledViews sample_views(ViewMode mode, std::uint64_t seed, const ViewSampleOptions& opts) {
    SampledViews out;
    Rng rng(seed);
    if (mode == ViewMode::Train) {
        for (int i = 0; i < opts.train_count; ++i) {
            const double fov = rng.uniform(15.0, 85.0);
            const double elev = rng.uniform(-5.0, 70.0);
            const double azim = rng.uniform(0.0, 360.0);
            const double dist = cover_distance(opts.bounding_radius, fov);
            out.cams.push_back(orbit_camera(elev, azim, dist, fov, opts.width, opts.height));
            out.roles.push_back(ViewRole::Input);
        }
        return out;
    }

    const double fov = 50.0;
    const double dist = cover_distance(opts.bounding_radius, fov);
    const double elevations[3] = {0.0, 20.0, 40.0};
    for (double el : elevations)
        for (int a = 0; a < 16; ++a)
            out.cams.push_back(orbit_camera(el, a * 22.5, dist, fov, opts.width, opts.height));
    out.roles.assign(out.cams.size(), ViewRole::Extra);

    // 8 inputs on the 20/40 rings: evenly spaced azimuths, alternating rings
    std::vector<std::size_t> input_idx;
    for (int k = 0; k < 8; ++k) {
        const int az = 2 * k;
        const std::size_t ring = (k % 2 == 0) ? 1 : 2;
        input_idx.push_back(ring * 16 + az);
    }
    for (std::size_t i : input_idx) out.roles[i] = ViewRole::Input;

    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < out.cams.size(); ++i)
        if (out.roles[i] == ViewRole::Extra) rest.push_back(i);
    // seeded shuffle without replacement
    for (std::size_t i = rest.size(); i > 1; --i) {
        std::size_t j = rng.next_u32() % i;
        std::swap(rest[i - 1], rest[j]);
    }
    for (std::size_t k = 0; k < 12; ++k) out.roles[rest[k]] = ViewRole::Output;
    return out;
}

std::vector<float> token_channel_stack(const Image& rgb, const Image& bg, const RayBundle& rays) {
    require(rgb.c == 3 && bg.c == 3, "token stack expects 3-channel images");
    require(rgb.w == rays.w && rgb.h == rays.h && bg.w == rays.w && bg.h == rays.h,
            "token stack: image and ray extents differ");
    std::vector<float> stack(static_cast<std::size_t>(rgb.w) * rgb.h * kTokenChannels);
    for (int y = 0; y < rgb.h; ++y)
        for (int x = 0; x < rgb.w; ++x) {
            const std::size_t p = rays.idx(x, y);
            float* dst = stack.data() + p * kTokenChannels;
            for (int ch = 0; ch < 3; ++ch) dst[ch] = rgb.at(x, y, ch);
            for (int ch = 0; ch < 3; ++ch) dst[3 + ch] = bg.at(x, y, ch);
            dst[6] = static_cast<float>(rays.dir[p].x);
            dst[7] = static_cast<float>(rays.dir[p].y);
            dst[8] = static_cast<float>(rays.dir[p].z);
            dst[9] = static_cast<float>(rays.moment[p].x);
            dst[10] = static_cast<float>(rays.moment[p].y);
            dst[11] = static_cast<float>(rays.moment[p].z);
        }
    return stack;
}

std::vector<float> patchify_stack(const std::vector<float>& stack, int w, int h, int channels,
                                  int patch) {
    require(w % patch == 0 && h % patch == 0,
            strformat("patchify: %dx%d not divisible by patch %d; pad or crop first", w, h, patch));
    const int tx = w / patch, ty = h / patch;
    std::vector<float> tokens(stack.size());
    std::size_t o = 0;
    for (int t = 0; t < tx * ty; ++t) {
        const int bx = (t % tx) * patch, by = (t / tx) * patch;
        for (int py = 0; py < patch; ++py)
            for (int px = 0; px < patch; ++px) {
                const std::size_t p = (static_cast<std::size_t>(by + py) * w + bx + px) * channels;
                for (int ch = 0; ch < channels; ++ch) tokens[o++] = stack[p + ch];
            }
    }
    return tokens;
}

std::vector<float> unpatchify_stack(const std::vector<float>& tokens, int w, int h, int channels,
                                    int patch) {
    const int tx = w / patch, ty = h / patch;
    std::vector<float> stack(tokens.size());
    std::size_t o = 0;
    for (int t = 0; t < tx * ty; ++t) {
        const int bx = (t % tx) * patch, by = (t / tx) * patch;
        for (int py = 0; py < patch; ++py)
            for (int px = 0; px < patch; ++px) {
                const std::size_t p = (static_cast<std::size_t>(by + py) * w + bx + px) * channels;
                for (int ch = 0; ch < channels; ++ch) stack[p + ch] = tokens[o++];
            }
    }
    return stack;
}

namespace {

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x, v.y, v.z}); }

Vec3 vec_from_json(const nlohmann::json& j) { return Vec3(j.at(0), j.at(1), j.at(2)); }

} // namespace

void write_cameras_json(const std::string& path, const CamerasFile& f) {
    nlohmann::json j;
    j["scene"] = f.scene;
    j["bounding_radius"] = f.bounding_radius;
    nlohmann::json views = nlohmann::json::array();
    for (const ViewMeta& v : f.views) {
        nlohmann::json e;
        e["position"] = vec_json(v.cam.position);
        e["target"] = vec_json(v.cam.target);
        e["up"] = vec_json(v.cam.up);
        e["fov_deg"] = v.cam.fov_deg;
        e["width"] = v.cam.width;
        e["height"] = v.cam.height;
        e["role"] = v.is_input ? "input" : "output";
        views.push_back(e);
    }
    j["views"] = views;
    std::ofstream out(path);
    require(out.good(), "cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

CamerasFile read_cameras_json(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot read '" + path + "'");
    nlohmann::json j = nlohmann::json::parse(in);
    CamerasFile f;
    f.scene = j.value("scene", std::string());
    f.bounding_radius = j.value("bounding_radius", 0.8);
    for (const auto& e : j.at("views")) {
        ViewMeta v;
        v.cam.position = vec_from_json(e.at("position"));
        v.cam.target = vec_from_json(e.at("target"));
        v.cam.up = vec_from_json(e.at("up"));
        v.cam.fov_deg = e.at("fov_deg");
        v.cam.width = e.at("width");
        v.cam.height = e.at("height");
        v.is_input = e.at("role") == "input";
        f.views.push_back(v);
    }
    return f;
}

} // namespace lirm
