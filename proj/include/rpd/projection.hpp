#pragma once

// Multi-view depth rendering and image patch extraction. The renderer is a
// deliberate simplification of voxel-based projection pipelines: orthographic
// z-buffer splatting plus optional Gaussian smoothing, producing V
// single-channel depth maps with the same interface.

#include <fstream>
#include <string>
#include <vector>

#include "rpd/geometry.hpp"

namespace rpd {

struct ViewPose {
    Tensor rotation;  // [3,3], orthonormal, det +1
    std::string name;
};

inline void check_pose(const ViewPose& pose) {
    const Tensor& r = pose.rotation;
    RPD_CHECK(r.rows == 3 && r.cols == 3, "ViewPose ", pose.name, ": rotation must be 3x3");
    Tensor rtr = matmul(r, r, true, false);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
            RPD_CHECK(std::abs(rtr(i, j) - (i == j ? 1.0 : 0.0)) < 1e-6, "ViewPose ", pose.name,
                      ": not orthonormal");
    double det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) -
                 r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0)) +
                 r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
    RPD_CHECK(std::abs(det - 1.0) < 1e-6, "ViewPose ", pose.name, ": determinant ", det);
}

struct MultiViewSet {
    std::vector<Tensor> images;  // V images [H, W], values in [0,1]
    std::vector<ViewPose> poses;

    int64_t views() const { return int64_t(images.size()); }
};

struct ImagePatchGrid {
    Tensor patches;  // [N_I, P*P], row-major tiles, each flattened row-major
    int64_t patch_size = 0;
};

namespace detail {

inline Tensor rotation_x(double angle) {
    Tensor r(3, 3);
    double c = std::cos(angle), s = std::sin(angle);
    r(0, 0) = 1; r(1, 1) = c; r(1, 2) = -s; r(2, 1) = s; r(2, 2) = c;
    return r;
}

inline Tensor rotation_y(double angle) {
    Tensor r(3, 3);
    double c = std::cos(angle), s = std::sin(angle);
    r(0, 0) = c; r(0, 2) = s; r(1, 1) = 1; r(2, 0) = -s; r(2, 2) = c;
    return r;
}

}  // namespace detail

// Canonical ordered pose list: 6 axis-aligned views then 4 upper-corner views
// (45 degrees above the horizon at azimuths 45/135/225/315). Runs with V < 10
// take the first V entries.
inline std::vector<ViewPose> default_poses(int64_t v) {
    RPD_CHECK(v >= 1 && v <= 10, "default_poses: V must be in [1,10], got ", v);
    std::vector<ViewPose> all;
    auto add = [&all](Tensor r, const std::string& name) {
        all.push_back(ViewPose{std::move(r), name});
    };
    Tensor eye(3, 3);
    eye(0, 0) = eye(1, 1) = eye(2, 2) = 1.0;
    add(eye, "front");
    add(detail::rotation_y(kPi), "back");
    add(detail::rotation_y(kPi / 2.0), "left");
    add(detail::rotation_y(-kPi / 2.0), "right");
    add(detail::rotation_x(kPi / 2.0), "top");
    add(detail::rotation_x(-kPi / 2.0), "bottom");
    for (int i = 0; i < 4; ++i) {
        double az = kPi / 4.0 + double(i) * kPi / 2.0;
        add(matmul(detail::rotation_x(-kPi / 4.0), detail::rotation_y(az)),
            "corner" + std::to_string(i));
    }
    all.resize(size_t(v));
    for (const ViewPose& p : all) check_pose(p);
    return all;
}

namespace detail {

inline void gaussian_smooth(Tensor& img, double sigma) {
    if (sigma <= 0.0) return;
    int64_t radius = int64_t(std::ceil(3.0 * sigma));
    std::vector<double> kernel(size_t(2 * radius + 1));
    double sum = 0.0;
    for (int64_t i = -radius; i <= radius; ++i) {
        double w = std::exp(-0.5 * double(i * i) / (sigma * sigma));
        kernel[size_t(i + radius)] = w;
        sum += w;
    }
    for (double& w : kernel) w /= sum;
    // separable, zero-padded
    Tensor tmp(img.rows, img.cols);
    for (int64_t r = 0; r < img.rows; ++r)
        for (int64_t c = 0; c < img.cols; ++c) {
            double acc = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                int64_t cc = c + i;
                if (cc >= 0 && cc < img.cols) acc += kernel[size_t(i + radius)] * img(r, cc);
            }
            tmp(r, c) = acc;
        }
    for (int64_t r = 0; r < img.rows; ++r)
        for (int64_t c = 0; c < img.cols; ++c) {
            double acc = 0.0;
            for (int64_t i = -radius; i <= radius; ++i) {
                int64_t rr = r + i;
                if (rr >= 0 && rr < img.rows) acc += kernel[size_t(i + radius)] * tmp(rr, c);
            }
            img(r, c) = acc;
        }
}

}  // namespace detail

// Orthographic depth renderer. Per view: rotate by the pose, map x in [-1,1]
// to columns and y in [-1,1] to rows (y up), z-buffer with nearest (smallest
// z) winning over a (2*splat_radius+1)^2 footprint, encode depth as
// 1 - (z - z_min)/(z_max - z_min) so nearer = brighter, empty pixels 0, then
// optionally Gaussian-smooth. Output is order-invariant in the input points.
inline MultiViewSet render_depth_views(const PointCloud& cloud,
                                       const std::vector<ViewPose>& poses, int64_t h, int64_t w,
                                       int64_t splat_radius = 0, double smooth_sigma = 0.0) {
    RPD_CHECK_T(cloud.points.rows >= 1, DegenerateInput, "render_depth_views: empty cloud");
    check_cloud(cloud);
    RPD_CHECK(h >= 16 && w >= 16, "render_depth_views: H, W must be >= 16, got ", h, "x", w);
    RPD_CHECK(splat_radius >= 0, "render_depth_views: negative splat_radius");
    RPD_CHECK(smooth_sigma >= 0.0, "render_depth_views: negative smooth_sigma");
    RPD_CHECK(!poses.empty(), "render_depth_views: no poses");
    for (const ViewPose& p : poses) check_pose(p);

    MultiViewSet out;
    out.poses = poses;
    out.images.reserve(poses.size());
    int64_t n = cloud.size();
    const double inf = std::numeric_limits<double>::infinity();
    for (const ViewPose& pose : poses) {
        Tensor pts = rotate_points(cloud.points, pose.rotation);
        double zmin = inf, zmax = -inf;
        for (int64_t i = 0; i < n; ++i) {
            zmin = std::min(zmin, pts(i, 2));
            zmax = std::max(zmax, pts(i, 2));
        }
        double zrange = zmax - zmin;
        Tensor zbuf = Tensor::full(h, w, inf);
        for (int64_t i = 0; i < n; ++i) {
            int64_t col = std::llround((pts(i, 0) + 1.0) / 2.0 * double(w - 1));
            int64_t row = std::llround((1.0 - pts(i, 1)) / 2.0 * double(h - 1));
            col = std::clamp<int64_t>(col, 0, w - 1);
            row = std::clamp<int64_t>(row, 0, h - 1);
            double z = pts(i, 2);
            for (int64_t dr = -splat_radius; dr <= splat_radius; ++dr)
                for (int64_t dc = -splat_radius; dc <= splat_radius; ++dc) {
                    int64_t r = row + dr, c = col + dc;
                    if (r < 0 || r >= h || c < 0 || c >= w) continue;
                    if (z < zbuf(r, c)) zbuf(r, c) = z;
                }
        }
        Tensor img(h, w);
        for (int64_t r = 0; r < h; ++r)
            for (int64_t c = 0; c < w; ++c) {
                double z = zbuf(r, c);
                if (z == inf) continue;
                img(r, c) = zrange < 1e-12 ? 1.0 : 1.0 - (z - zmin) / zrange;
            }
        detail::gaussian_smooth(img, smooth_sigma);
        out.images.push_back(std::move(img));
    }
    return out;
}

inline ImagePatchGrid image_patchify(const Tensor& view, int64_t p) {
    int64_t h = view.rows, w = view.cols;
    RPD_CHECK(p >= 1 && h % p == 0 && w % p == 0, "image_patchify: P=", p, " must divide H=", h,
              " and W=", w);
    int64_t gh = h / p, gw = w / p;
    ImagePatchGrid grid;
    grid.patch_size = p;
    grid.patches = Tensor(gh * gw, p * p);
    for (int64_t gr = 0; gr < gh; ++gr)
        for (int64_t gc = 0; gc < gw; ++gc) {
            int64_t patch = gr * gw + gc;
            for (int64_t r = 0; r < p; ++r)
                for (int64_t c = 0; c < p; ++c)
                    grid.patches(patch, r * p + c) = view(gr * p + r, gc * p + c);
        }
    return grid;
}

inline Tensor image_unpatchify(const ImagePatchGrid& grid, int64_t h, int64_t w) {
    int64_t p = grid.patch_size;
    RPD_CHECK(p >= 1 && h % p == 0 && w % p == 0, "image_unpatchify: bad dims");
    RPD_CHECK(grid.patches.rows == (h / p) * (w / p) && grid.patches.cols == p * p,
              "image_unpatchify: grid shape mismatch");
    int64_t gw = w / p;
    Tensor view(h, w);
    for (int64_t patch = 0; patch < grid.patches.rows; ++patch) {
        int64_t gr = patch / gw, gc = patch % gw;
        for (int64_t r = 0; r < p; ++r)
            for (int64_t c = 0; c < p; ++c)
                view(gr * p + r, gc * p + c) = grid.patches(patch, r * p + c);
    }
    return view;
}

// Debug export: binary PGM (P5, maxval 255).
inline void write_pgm(const std::string& path, const Tensor& img) {
    std::ofstream f(path, std::ios::binary);
    RPD_CHECK_T(f.good(), Error, "write_pgm: cannot open ", path);
    f << "P5\n" << img.cols << " " << img.rows << "\n255\n";
    for (int64_t i = 0; i < img.size(); ++i) {
        double v = std::clamp(img.v[size_t(i)], 0.0, 1.0);
        unsigned char b = static_cast<unsigned char>(std::llround(v * 255.0));
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
    RPD_CHECK_T(f.good(), Error, "write_pgm: write failed for ", path);
}

}  // namespace rpd
