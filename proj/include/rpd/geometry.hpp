#pragma once

// Point-cloud preprocessing: FPS, KNN patchification, normalization, and the
// domain-shift augmentations (rotate / jitter / drop holes).

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "rpd/common.hpp"
#include "rpd/tensor.hpp"

namespace rpd {

struct PointCloud {
    Tensor points;  // [N, 3]
    std::string id;
    int64_t label = -1;  // -1 = unlabeled

    int64_t size() const { return points.rows; }
};

inline void check_cloud(const PointCloud& pc) {
    RPD_CHECK(pc.points.cols == 3, "PointCloud: expected [N,3], got cols=", pc.points.cols);
    RPD_CHECK(pc.points.rows >= 1, "PointCloud: empty");
    RPD_CHECK_T(pc.points.all_finite(), InvalidArgument, "PointCloud: non-finite coordinate in ",
                pc.id);
}

// Local patches: centroid i occupies neighborhood row i*(k+1), followed by its
// k nearest points (self index excluded, ties by lowest index).
struct PatchSet {
    int64_t n_patches = 0;
    int64_t k = 0;
    Tensor centroids;      // [N_P, 3]
    Tensor neighborhoods;  // [N_P*(k+1), 3], patch-major
    std::vector<int64_t> centroid_indices;

    int64_t patch_row(int64_t patch, int64_t j) const { return patch * (k + 1) + j; }
};

inline double dist2_rows(const Tensor& a, int64_t i, const Tensor& b, int64_t j) {
    double s = 0.0;
    for (int64_t c = 0; c < 3; ++c) {
        double d = a(i, c) - b(j, c);
        s += d * d;
    }
    return s;
}

// FPS with an explicit start index. Each pick maximizes the minimum squared
// distance to the selected set; ties go to the lowest index.
inline std::vector<int64_t> fps_from(const Tensor& pts, int64_t m, int64_t start) {
    int64_t n = pts.rows;
    RPD_CHECK(m >= 1 && m <= n, "fps: need 1 <= m <= N, got m=", m, " N=", n);
    RPD_CHECK(start >= 0 && start < n, "fps: bad start ", start);
    std::vector<int64_t> out;
    out.reserve(size_t(m));
    out.push_back(start);
    std::vector<double> mind(static_cast<size_t>(n));
    std::vector<char> taken(size_t(n), 0);
    taken[size_t(start)] = 1;
    for (int64_t i = 0; i < n; ++i) mind[size_t(i)] = dist2_rows(pts, i, pts, start);
    for (int64_t pick = 1; pick < m; ++pick) {
        int64_t best = -1;
        double bestd = -1.0;
        for (int64_t i = 0; i < n; ++i) {
            if (taken[size_t(i)]) continue;
            if (mind[size_t(i)] > bestd) {
                bestd = mind[size_t(i)];
                best = i;
            }
        }
        out.push_back(best);
        taken[size_t(best)] = 1;
        for (int64_t i = 0; i < n; ++i)
            mind[size_t(i)] = std::min(mind[size_t(i)], dist2_rows(pts, i, pts, best));
    }
    return out;
}

// Seeded FPS: the start index is a uniform draw so repeated epochs see varied
// patchifications.
inline std::vector<int64_t> fps(const PointCloud& cloud, int64_t m, uint64_t seed) {
    check_cloud(cloud);
    Rng rng(derive_seed(seed, "fps.start"));
    int64_t start = rng.uniform_int(cloud.size());
    return fps_from(cloud.points, m, start);
}

// Indices of the k nearest points to pts[center] (center excluded), ordered by
// (squared distance, index).
inline std::vector<int64_t> knn(const Tensor& pts, int64_t center, int64_t k) {
    int64_t n = pts.rows;
    RPD_CHECK(k >= 1 && k <= n - 1, "knn: need 1 <= k <= N-1, got k=", k, " N=", n);
    std::vector<std::pair<double, int64_t>> d;
    d.reserve(size_t(n - 1));
    for (int64_t i = 0; i < n; ++i)
        if (i != center) d.emplace_back(dist2_rows(pts, i, pts, center), i);
    std::sort(d.begin(), d.end());
    std::vector<int64_t> out(static_cast<size_t>(k));
    for (int64_t i = 0; i < k; ++i) out[size_t(i)] = d[size_t(i)].second;
    return out;
}

inline PatchSet patchify(const PointCloud& cloud, int64_t n_patches, int64_t k, uint64_t seed) {
    check_cloud(cloud);
    int64_t n = cloud.size();
    RPD_CHECK(n_patches >= 1 && n_patches <= n, "patchify: need 1 <= n_patches <= N, got ",
              n_patches, " with N=", n);
    RPD_CHECK(k >= 1 && k <= n - 1, "patchify: need 1 <= k <= N-1 (centroid excluded), got k=", k,
              " with N=", n);
    PatchSet ps;
    ps.n_patches = n_patches;
    ps.k = k;
    ps.centroid_indices = fps(cloud, n_patches, seed);
    ps.centroids = Tensor(n_patches, 3);
    ps.neighborhoods = Tensor(n_patches * (k + 1), 3);
    for (int64_t p = 0; p < n_patches; ++p) {
        int64_t ci = ps.centroid_indices[size_t(p)];
        for (int64_t c = 0; c < 3; ++c) {
            ps.centroids(p, c) = cloud.points(ci, c);
            ps.neighborhoods(ps.patch_row(p, 0), c) = cloud.points(ci, c);
        }
        std::vector<int64_t> nb = knn(cloud.points, ci, k);
        for (int64_t j = 0; j < k; ++j)
            for (int64_t c = 0; c < 3; ++c)
                ps.neighborhoods(ps.patch_row(p, j + 1), c) = cloud.points(nb[size_t(j)], c);
    }
    return ps;
}

// Center at the mean point, scale so the farthest point sits on the unit sphere.
inline PointCloud normalize_unit_sphere(const PointCloud& cloud) {
    check_cloud(cloud);
    int64_t n = cloud.size();
    double mean[3] = {0, 0, 0};
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < 3; ++c) mean[c] += cloud.points(i, c);
    for (double& m : mean) m /= double(n);
    PointCloud out = cloud;
    double maxn2 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double n2 = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
            out.points(i, c) = cloud.points(i, c) - mean[c];
            n2 += out.points(i, c) * out.points(i, c);
        }
        maxn2 = std::max(maxn2, n2);
    }
    RPD_CHECK_T(maxn2 > 1e-24, DegenerateInput,
                "normalize_unit_sphere: all points identical in ", cloud.id);
    double inv = 1.0 / std::sqrt(maxn2);
    for (double& x : out.points.v) x *= inv;
    return out;
}

struct AugmentSpec {
    bool rotate = false;
    bool jitter = false;
    bool drop_holes = false;
    double jitter_sigma = 0.01;
    double drop_fraction = 0.0;
    uint64_t seed = 0;
};

inline void check_augment_spec(const AugmentSpec& s) {
    RPD_CHECK(s.jitter_sigma >= 0.0, "AugmentSpec: jitter_sigma < 0");
    RPD_CHECK(s.drop_fraction >= 0.0 && s.drop_fraction < 1.0,
              "AugmentSpec: drop_fraction must be in [0,1), got ", s.drop_fraction);
}

inline Tensor rotation_z(double angle) {
    Tensor r(3, 3);
    double c = std::cos(angle), s = std::sin(angle);
    r(0, 0) = c;  r(0, 1) = -s; r(0, 2) = 0;
    r(1, 0) = s;  r(1, 1) = c;  r(1, 2) = 0;
    r(2, 0) = 0;  r(2, 1) = 0;  r(2, 2) = 1;
    return r;
}

inline Tensor rotate_points(const Tensor& pts, const Tensor& rot) {
    RPD_CHECK(pts.cols == 3 && rot.rows == 3 && rot.cols == 3, "rotate_points: bad shapes");
    return matmul(pts, rot, false, true);
}

// Applies the enabled modes in a fixed order: rotate about the gravity (z)
// axis, then jitter, then drop_holes. drop_holes removes the
// min(ceil(fraction*N), N-32) points nearest to a seeded random cloud point
// (smallest sphere reaching the fraction), keeping survivors in input order.
inline PointCloud augment(const PointCloud& cloud, const AugmentSpec& spec) {
    check_cloud(cloud);
    check_augment_spec(spec);
    PointCloud out = cloud;
    if (spec.rotate) {
        Rng rng(derive_seed(spec.seed, "aug.rotate"));
        out.points = rotate_points(out.points, rotation_z(rng.uniform(0.0, 2.0 * kPi)));
    }
    if (spec.jitter && spec.jitter_sigma > 0.0) {
        Rng rng(derive_seed(spec.seed, "aug.jitter"));
        for (double& x : out.points.v) x += rng.normal(0.0, spec.jitter_sigma);
    }
    if (spec.drop_holes && spec.drop_fraction > 0.0) {
        int64_t n = out.size();
        int64_t want = int64_t(std::ceil(spec.drop_fraction * double(n) - 1e-9));
        int64_t target = std::min(want, n - 32);
        if (target > 0) {
            Rng rng(derive_seed(spec.seed, "aug.drop"));
            int64_t center = rng.uniform_int(n);
            std::vector<std::pair<double, int64_t>> d;
            d.reserve(size_t(n));
            for (int64_t i = 0; i < n; ++i)
                d.emplace_back(dist2_rows(out.points, i, out.points, center), i);
            std::sort(d.begin(), d.end());
            std::vector<char> drop(size_t(n), 0);
            for (int64_t i = 0; i < target; ++i) drop[size_t(d[size_t(i)].second)] = 1;
            Tensor kept(n - target, 3);
            int64_t r = 0;
            for (int64_t i = 0; i < n; ++i) {
                if (drop[size_t(i)]) continue;
                for (int64_t c = 0; c < 3; ++c) kept(r, c) = out.points(i, c);
                ++r;
            }
            out.points = std::move(kept);
        }
    }
    return out;
}

// Seeded uniform resampling to exactly n points: distinct draws when shrinking,
// all originals plus with-replacement draws when growing.
inline PointCloud resample_to(const PointCloud& cloud, int64_t n, uint64_t seed) {
    check_cloud(cloud);
    RPD_CHECK(n >= 1, "resample_to: n must be >= 1");
    int64_t m = cloud.size();
    if (m == n) return cloud;
    PointCloud out = cloud;
    out.points = Tensor(n, 3);
    Rng rng(derive_seed(seed, "resample"));
    if (m > n) {
        std::vector<int64_t> idx = rng.sample_without_replacement(m, n);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t c = 0; c < 3; ++c) out.points(i, c) = cloud.points(idx[size_t(i)], c);
    } else {
        for (int64_t i = 0; i < m; ++i)
            for (int64_t c = 0; c < 3; ++c) out.points(i, c) = cloud.points(i, c);
        for (int64_t i = m; i < n; ++i) {
            int64_t j = rng.uniform_int(m);
            for (int64_t c = 0; c < 3; ++c) out.points(i, c) = cloud.points(j, c);
        }
    }
    return out;
}

}  // namespace rpd
