// Geometry module: FPS/KNN against brute-force oracles, normalization,
// augmentations.

#include <gtest/gtest.h>

#include <set>

#include "rpd/geometry.hpp"
#include "test_util.hpp"

using namespace rpd;
using rpdtest::random_tensor;

namespace {

PointCloud random_cloud(uint64_t seed, int64_t n) {
    Rng rng(seed);
    PointCloud pc;
    pc.points = random_tensor(rng, n, 3);
    pc.id = "test";
    return pc;
}

// Independent FPS oracle: re-derives every pick by exhaustive min-distance
// maximization over all candidates.
std::vector<int64_t> fps_oracle(const Tensor& pts, int64_t m, int64_t start) {
    std::vector<int64_t> sel = {start};
    while (int64_t(sel.size()) < m) {
        int64_t best = -1;
        double bestd = -1.0;
        for (int64_t i = 0; i < pts.rows; ++i) {
            if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
            double mind = std::numeric_limits<double>::infinity();
            for (int64_t s : sel) mind = std::min(mind, dist2_rows(pts, i, pts, s));
            if (mind > bestd) {
                bestd = mind;
                best = i;
            }
        }
        sel.push_back(best);
    }
    return sel;
}

}  // namespace

TEST(Geometry, FpsSinglePickIsStart) {
    PointCloud pc = random_cloud(1, 16);
    EXPECT_EQ(fps_from(pc.points, 1, 7), std::vector<int64_t>({7}));
}

TEST(Geometry, FpsThreePointExample) {
    PointCloud pc;
    pc.points = Tensor(3, 3);
    pc.points(1, 0) = 1.0;
    pc.points(2, 0) = 10.0;
    EXPECT_EQ(fps_from(pc.points, 2, 0), std::vector<int64_t>({0, 2}));
}

TEST(Geometry, FpsFullSelectionIsPermutation) {
    PointCloud pc = random_cloud(2, 20);
    auto sel = fps_from(pc.points, 20, 3);
    std::set<int64_t> s(sel.begin(), sel.end());
    EXPECT_EQ(s.size(), 20u);
    EXPECT_EQ(*s.begin(), 0);
    EXPECT_EQ(*s.rbegin(), 19);
}

TEST(Geometry, FpsMatchesExhaustiveOracle) {
    for (uint64_t seed : {3u, 4u, 5u}) {
        PointCloud pc = random_cloud(seed, 40);
        for (int64_t start : {0, 11, 39}) {
            auto got = fps_from(pc.points, 12, start);
            auto want = fps_oracle(pc.points, 12, start);
            EXPECT_EQ(got, want) << "seed=" << seed << " start=" << start;
        }
    }
}

TEST(Geometry, FpsPermutationStability) {
    PointCloud pc = random_cloud(6, 30);
    Rng rng(99);
    std::vector<int64_t> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    PointCloud shuffled;
    shuffled.points = Tensor(30, 3);
    shuffled.id = "shuffled";
    for (int64_t i = 0; i < 30; ++i)
        for (int64_t c = 0; c < 3; ++c) shuffled.points(i, c) = pc.points(perm[size_t(i)], c);

    int64_t start_orig = 5;
    int64_t start_shuf = -1;
    for (int64_t i = 0; i < 30; ++i)
        if (perm[size_t(i)] == start_orig) start_shuf = i;

    auto a = fps_from(pc.points, 10, start_orig);
    auto b = fps_from(shuffled.points, 10, start_shuf);
    for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], perm[size_t(b[i])]);
}

TEST(Geometry, FpsErrors) {
    PointCloud pc = random_cloud(7, 5);
    EXPECT_THROW(fps_from(pc.points, 0, 0), InvalidArgument);
    EXPECT_THROW(fps_from(pc.points, 6, 0), InvalidArgument);
    EXPECT_THROW(fps(pc, 6, 1), InvalidArgument);
}

TEST(Geometry, FpsSeededStartIsDeterministic) {
    PointCloud pc = random_cloud(8, 64);
    EXPECT_EQ(fps(pc, 8, 42), fps(pc, 8, 42));
    bool any_diff = false;
    auto base = fps(pc, 8, 42);
    for (uint64_t s = 0; s < 8 && !any_diff; ++s) any_diff = (fps(pc, 8, s) != base);
    EXPECT_TRUE(any_diff);
}

TEST(Geometry, KnnMatchesBruteForce) {
    PointCloud pc = random_cloud(9, 64);
    PatchSet ps = patchify(pc, 4, 8, 123);
    EXPECT_EQ(ps.n_patches, 4);
    EXPECT_EQ(ps.k, 8);
    EXPECT_EQ(ps.neighborhoods.rows, 4 * 9);
    for (int64_t p = 0; p < 4; ++p) {
        int64_t ci = ps.centroid_indices[size_t(p)];
        // brute-force sorted-distance oracle
        std::vector<std::pair<double, int64_t>> d;
        for (int64_t i = 0; i < 64; ++i)
            if (i != ci) d.emplace_back(dist2_rows(pc.points, i, pc.points, ci), i);
        std::sort(d.begin(), d.end());
        for (int64_t c = 0; c < 3; ++c) {
            EXPECT_EQ(ps.neighborhoods(ps.patch_row(p, 0), c), pc.points(ci, c));
            EXPECT_EQ(ps.centroids(p, c), pc.points(ci, c));
        }
        for (int64_t j = 0; j < 8; ++j)
            for (int64_t c = 0; c < 3; ++c)
                EXPECT_EQ(ps.neighborhoods(ps.patch_row(p, j + 1), c),
                          pc.points(d[size_t(j)].second, c));
    }
}

TEST(Geometry, PatchifyTinyKExample) {
    // Cloud of exactly n_patches points with k=1: every patch is the centroid
    // plus its nearest other point.
    PointCloud pc;
    pc.points = Tensor(4, 3);
    pc.points(0, 0) = 0.0;
    pc.points(1, 0) = 1.0;
    pc.points(2, 0) = 3.0;
    pc.points(3, 0) = 7.0;
    PatchSet ps = patchify(pc, 4, 1, 5);
    std::set<int64_t> seen(ps.centroid_indices.begin(), ps.centroid_indices.end());
    EXPECT_EQ(seen.size(), 4u);
    for (int64_t p = 0; p < 4; ++p) {
        int64_t ci = ps.centroid_indices[size_t(p)];
        int64_t want_nb = (ci <= 1) ? 1 - ci : (ci == 2 ? 1 : 2);
        EXPECT_EQ(ps.neighborhoods(ps.patch_row(p, 1), 0), pc.points(want_nb, 0));
    }
}

TEST(Geometry, PatchifyErrors) {
    PointCloud pc = random_cloud(10, 16);
    EXPECT_THROW(patchify(pc, 17, 4, 0), InvalidArgument);
    EXPECT_THROW(patchify(pc, 4, 16, 0), InvalidArgument);
    EXPECT_THROW(patchify(pc, 4, 17, 0), InvalidArgument);
    EXPECT_THROW(patchify(pc, 0, 4, 0), InvalidArgument);
}

TEST(Geometry, NormalizeTwoPointExample) {
    PointCloud pc;
    pc.points = Tensor(2, 3);
    pc.points(1, 0) = 2.0;
    PointCloud out = normalize_unit_sphere(pc);
    EXPECT_NEAR(out.points(0, 0), -1.0, 1e-12);
    EXPECT_NEAR(out.points(1, 0), 1.0, 1e-12);
}

TEST(Geometry, NormalizeInvariantsAndIdempotence) {
    PointCloud pc = random_cloud(11, 100);
    for (double& x : pc.points.v) x = x * 3.0 + 0.7;
    PointCloud n1 = normalize_unit_sphere(pc);
    double mean[3] = {0, 0, 0}, maxn = 0.0;
    for (int64_t i = 0; i < 100; ++i) {
        double n2 = 0.0;
        for (int64_t c = 0; c < 3; ++c) {
            mean[c] += n1.points(i, c);
            n2 += n1.points(i, c) * n1.points(i, c);
        }
        maxn = std::max(maxn, std::sqrt(n2));
    }
    for (double m : mean) EXPECT_NEAR(m / 100.0, 0.0, 1e-6);
    EXPECT_NEAR(maxn, 1.0, 1e-6);

    PointCloud n2c = normalize_unit_sphere(n1);
    for (int64_t i = 0; i < n1.points.size(); ++i)
        EXPECT_NEAR(n1.points.v[size_t(i)], n2c.points.v[size_t(i)], 1e-6);
}

TEST(Geometry, NormalizeDegenerate) {
    PointCloud pc;
    pc.points = Tensor::full(5, 3, 2.5);
    EXPECT_THROW(normalize_unit_sphere(pc), DegenerateInput);
}

TEST(Geometry, AugmentEmptyIsIdentity) {
    PointCloud pc = random_cloud(12, 50);
    AugmentSpec spec;
    spec.seed = 9;
    PointCloud out = augment(pc, spec);
    for (int64_t i = 0; i < pc.points.size(); ++i)
        EXPECT_EQ(out.points.v[size_t(i)], pc.points.v[size_t(i)]);
}

TEST(Geometry, RotatePreservesDistancesAndGravityAxis) {
    PointCloud pc = random_cloud(13, 40);
    AugmentSpec spec;
    spec.rotate = true;
    spec.seed = 77;
    PointCloud out = augment(pc, spec);
    for (int64_t i = 0; i < 40; ++i) {
        EXPECT_NEAR(out.points(i, 2), pc.points(i, 2), 1e-12);
        for (int64_t j = i + 1; j < 40; ++j)
            EXPECT_NEAR(std::sqrt(dist2_rows(out.points, i, out.points, j)),
                        std::sqrt(dist2_rows(pc.points, i, pc.points, j)), 1e-5);
    }
    bool moved = false;
    for (int64_t i = 0; i < pc.points.size() && !moved; ++i)
        moved = std::abs(out.points.v[size_t(i)] - pc.points.v[size_t(i)]) > 1e-9;
    EXPECT_TRUE(moved);
}

TEST(Geometry, JitterPerturbsAtSigmaScale) {
    PointCloud pc = random_cloud(14, 200);
    AugmentSpec spec;
    spec.jitter = true;
    spec.jitter_sigma = 0.01;
    spec.seed = 3;
    PointCloud out = augment(pc, spec);
    double sq = 0.0;
    for (int64_t i = 0; i < pc.points.size(); ++i) {
        double d = out.points.v[size_t(i)] - pc.points.v[size_t(i)];
        sq += d * d;
    }
    double rms = std::sqrt(sq / double(pc.points.size()));
    EXPECT_NEAR(rms, 0.01, 0.002);
}

TEST(Geometry, DropHolesSizeAndDeterminism) {
    PointCloud pc = random_cloud(15, 1000);
    AugmentSpec spec;
    spec.drop_holes = true;
    spec.drop_fraction = 0.3;
    spec.seed = 21;
    PointCloud a = augment(pc, spec);
    EXPECT_EQ(a.size(), 700);
    PointCloud b = augment(pc, spec);
    for (int64_t i = 0; i < a.points.size(); ++i)
        EXPECT_EQ(a.points.v[size_t(i)], b.points.v[size_t(i)]);
    spec.seed = 22;
    PointCloud c = augment(pc, spec);
    bool differs = (c.size() != a.size());
    for (int64_t i = 0; !differs && i < std::min(a.points.size(), c.points.size()); ++i)
        differs = (a.points.v[size_t(i)] != c.points.v[size_t(i)]);
    EXPECT_TRUE(differs);
}

TEST(Geometry, DropHolesNeverBelow32) {
    PointCloud pc = random_cloud(16, 40);
    AugmentSpec spec;
    spec.drop_holes = true;
    spec.drop_fraction = 0.9;
    spec.seed = 5;
    PointCloud out = augment(pc, spec);
    EXPECT_EQ(out.size(), 32);

    PointCloud tiny = random_cloud(17, 20);
    PointCloud out2 = augment(tiny, spec);
    EXPECT_EQ(out2.size(), 20);
}

TEST(Geometry, DropHolesRemovesASphere) {
    // Survivors must all be farther from the hole center than every removed
    // point (the removed set is the tightest sphere around the center).
    PointCloud pc = random_cloud(18, 300);
    AugmentSpec spec;
    spec.drop_holes = true;
    spec.drop_fraction = 0.25;
    spec.seed = 11;
    PointCloud out = augment(pc, spec);
    ASSERT_EQ(out.size(), 225);
    // Recover which original points survived (points are unique almost surely).
    auto key = [](const Tensor& t, int64_t r) {
        return std::tuple<double, double, double>(t(r, 0), t(r, 1), t(r, 2));
    };
    std::set<std::tuple<double, double, double>> kept;
    for (int64_t i = 0; i < out.size(); ++i) kept.insert(key(out.points, i));
    // The hole center is one of the original points; find the one explaining
    // the removal: all removed points closer than all kept points.
    bool found_center = false;
    for (int64_t c = 0; c < 300 && !found_center; ++c) {
        double max_removed = -1.0, min_kept = std::numeric_limits<double>::infinity();
        for (int64_t i = 0; i < 300; ++i) {
            double d = dist2_rows(pc.points, i, pc.points, c);
            if (kept.count(key(pc.points, i)))
                min_kept = std::min(min_kept, d);
            else
                max_removed = std::max(max_removed, d);
        }
        found_center = max_removed <= min_kept;
    }
    EXPECT_TRUE(found_center);
}

TEST(Geometry, ResampleShrinkGrowIdentity) {
    PointCloud pc = random_cloud(19, 100);
    PointCloud same = resample_to(pc, 100, 1);
    for (int64_t i = 0; i < pc.points.size(); ++i)
        EXPECT_EQ(same.points.v[size_t(i)], pc.points.v[size_t(i)]);

    PointCloud small = resample_to(pc, 60, 2);
    EXPECT_EQ(small.size(), 60);
    std::set<std::tuple<double, double, double>> rows;
    for (int64_t i = 0; i < 60; ++i)
        rows.insert({small.points(i, 0), small.points(i, 1), small.points(i, 2)});
    EXPECT_EQ(rows.size(), 60u);  // distinct draws when shrinking

    PointCloud big = resample_to(pc, 130, 3);
    EXPECT_EQ(big.size(), 130);
    for (int64_t i = 0; i < 100; ++i)
        for (int64_t c = 0; c < 3; ++c) EXPECT_EQ(big.points(i, c), pc.points(i, c));
}

TEST(Geometry, AugmentSpecValidation) {
    PointCloud pc = random_cloud(20, 40);
    AugmentSpec bad;
    bad.drop_fraction = 1.0;
    EXPECT_THROW(augment(pc, bad), InvalidArgument);
    bad.drop_fraction = 0.0;
    bad.jitter_sigma = -0.1;
    EXPECT_THROW(augment(pc, bad), InvalidArgument);
}
