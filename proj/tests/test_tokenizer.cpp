// Tokenizer module: linearity of the patch projection, permutation and
// translation invariance of the point tokenizer, sequence layout, gradients.

#include <gtest/gtest.h>

#include "rpd/tokenizer.hpp"
#include "test_util.hpp"

using namespace rpd;
using rpdtest::random_tensor;

namespace {

TokenizerConfig toy_cfg() {
    TokenizerConfig cfg;
    cfg.d1 = 16;
    cfg.channels = 3;
    cfg.patch_size = 4;
    cfg.n_image_tokens = 4;  // 8x8 image, P=4
    cfg.point_knn = 4;
    cfg.edge_hidden = 8;
    cfg.pos_hidden = 8;
    return cfg;
}

PatchSet random_patchset(uint64_t seed, int64_t np, int64_t k) {
    Rng rng(seed);
    PatchSet ps;
    ps.n_patches = np;
    ps.k = k;
    ps.centroids = random_tensor(rng, np, 3);
    ps.neighborhoods = Tensor(np * (k + 1), 3);
    for (int64_t p = 0; p < np; ++p) {
        for (int64_t c = 0; c < 3; ++c)
            ps.neighborhoods(ps.patch_row(p, 0), c) = ps.centroids(p, c);
        for (int64_t j = 1; j <= k; ++j)
            for (int64_t c = 0; c < 3; ++c)
                ps.neighborhoods(ps.patch_row(p, j), c) =
                    ps.centroids(p, c) + rng.normal() * 0.1;
        ps.centroid_indices.push_back(p);
    }
    return ps;
}

std::vector<ImagePatchGrid> random_grids(uint64_t seed, int64_t views, int64_t n_tokens,
                                         int64_t p) {
    Rng rng(seed);
    std::vector<ImagePatchGrid> grids;
    for (int64_t v = 0; v < views; ++v) {
        ImagePatchGrid g;
        g.patch_size = p;
        g.patches = Tensor(n_tokens, p * p);
        for (double& x : g.patches.v) x = rng.uniform();
        grids.push_back(std::move(g));
    }
    return grids;
}

}  // namespace

TEST(Tokenizer, ImageSequenceLayout) {
    ParamStore ps;
    Rng rng(201);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());
    auto grids = random_grids(1, 2, 4, 4);
    Tape t;
    auto seqs = tokenize_images(t, grids, tp);
    ASSERT_EQ(seqs.size(), 2u);
    for (const auto& s : seqs) {
        EXPECT_EQ(t.val(s.tokens).rows, 5);
        EXPECT_EQ(t.val(s.tokens).cols, 16);
        EXPECT_TRUE(t.val(s.tokens).all_finite());
    }
    EXPECT_EQ(seqs[0].view_index, 0);
    EXPECT_EQ(seqs[1].view_index, 1);
    // class token row = cls + pos[0], independent of the image
    for (int64_t c = 0; c < 16; ++c)
        EXPECT_NEAR(t.val(seqs[1].tokens)(0, c),
                    tp.image_cls->value(0, c) + tp.image_pos->value(0, c), 1e-12);
}

TEST(Tokenizer, PaperDimsImageShape) {
    ParamStore ps;
    Rng rng(202);
    TokenizerConfig cfg;
    cfg.d1 = 768;
    cfg.channels = 3;
    cfg.patch_size = 16;
    cfg.n_image_tokens = 196;
    TokenizerParams tp = make_tokenizer(ps, rng, cfg);
    auto grids = random_grids(2, 1, 196, 16);
    Tape t;
    auto seqs = tokenize_images(t, grids, tp);
    EXPECT_EQ(t.val(seqs[0].tokens).rows, 197);
    EXPECT_EQ(t.val(seqs[0].tokens).cols, 768);
}

TEST(Tokenizer, ImageProjectionLinearity) {
    ParamStore ps;
    Rng rng(203);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());
    // isolate the projection: zero bias, zero positional table, zero cls
    tp.image_patch.b->value.fill(0.0);
    tp.image_pos->value.fill(0.0);
    tp.image_cls->value.fill(0.0);

    auto zero = random_grids(3, 1, 4, 4);
    zero[0].patches.fill(0.0);
    Tape t;
    auto z = tokenize_images(t, zero, tp);
    for (double v : t.val(z[0].tokens).v) EXPECT_EQ(v, 0.0);

    auto g1 = random_grids(4, 1, 4, 4);
    auto g2 = g1;
    for (double& x : g2[0].patches.v) x *= 2.0;
    auto s1 = tokenize_images(t, g1, tp);
    auto s2 = tokenize_images(t, g2, tp);
    for (int64_t i = 0; i < t.val(s1[0].tokens).size(); ++i)
        EXPECT_NEAR(2.0 * t.val(s1[0].tokens).v[size_t(i)], t.val(s2[0].tokens).v[size_t(i)],
                    1e-12);
}

TEST(Tokenizer, ImageDimensionErrors) {
    ParamStore ps;
    Rng rng(204);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());
    Tape t;
    auto bad_len = random_grids(5, 1, 4, 5);  // 25-pixel patches
    EXPECT_THROW(tokenize_images(t, bad_len, tp), InvalidArgument);
    auto bad_count = random_grids(6, 1, 9, 4);
    EXPECT_THROW(tokenize_images(t, bad_count, tp), InvalidArgument);
}

TEST(Tokenizer, PointSequenceLayoutAndFiniteness) {
    ParamStore ps;
    Rng rng(205);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());
    PatchSet patches = random_patchset(7, 8, 6);
    Tape t;
    TokenSeq seq = tokenize_points(t, patches, tp);
    EXPECT_EQ(t.val(seq.tokens).rows, 9);
    EXPECT_EQ(t.val(seq.tokens).cols, 16);
    EXPECT_TRUE(t.val(seq.tokens).all_finite());
    EXPECT_EQ(seq.view_index, -1);
    for (int64_t c = 0; c < 16; ++c)
        EXPECT_NEAR(t.val(seq.tokens)(0, c),
                    tp.point_cls->value(0, c) + tp.point_cls_pos->value(0, c), 1e-12);
}

TEST(Tokenizer, TwentySevenPatchesGiveTwentyEightTokens) {
    ParamStore ps;
    Rng rng(206);
    TokenizerConfig cfg = toy_cfg();
    cfg.d1 = 768;
    TokenizerParams tp = make_tokenizer(ps, rng, cfg);
    PatchSet patches = random_patchset(8, 27, 4);
    Tape t;
    TokenSeq seq = tokenize_points(t, patches, tp);
    EXPECT_EQ(t.val(seq.tokens).rows, 28);
    EXPECT_EQ(t.val(seq.tokens).cols, 768);
}

TEST(Tokenizer, PointPermutationInvariance) {
    ParamStore ps;
    Rng rng(207);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());
    PatchSet patches = random_patchset(9, 4, 6);

    PatchSet shuffled = patches;
    // permute the non-centroid points of patch 2
    std::vector<int64_t> perm = {4, 1, 6, 3, 5, 2};
    for (int64_t j = 0; j < 6; ++j)
        for (int64_t c = 0; c < 3; ++c)
            shuffled.neighborhoods(shuffled.patch_row(2, j + 1), c) =
                patches.neighborhoods(patches.patch_row(2, perm[size_t(j)]), c);

    Tape t;
    TokenSeq a = tokenize_points(t, patches, tp);
    TokenSeq b = tokenize_points(t, shuffled, tp);
    for (int64_t i = 0; i < t.val(a.tokens).size(); ++i)
        EXPECT_NEAR(t.val(a.tokens).v[size_t(i)], t.val(b.tokens).v[size_t(i)], 1e-5);
}

TEST(Tokenizer, PointTranslationInvariancePrePositional) {
    ParamStore ps;
    Rng rng(208);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());

    // two patches with identical local geometry at different centroids
    Rng geo(91);
    Tensor offsets = random_tensor(geo, 6, 3, 0.1);
    PatchSet patches;
    patches.n_patches = 2;
    patches.k = 6;
    patches.centroids = Tensor(2, 3);
    patches.centroids(1, 0) = 3.0;
    patches.centroids(1, 1) = -2.0;
    patches.neighborhoods = Tensor(2 * 7, 3);
    for (int64_t p = 0; p < 2; ++p) {
        for (int64_t c = 0; c < 3; ++c)
            patches.neighborhoods(patches.patch_row(p, 0), c) = patches.centroids(p, c);
        for (int64_t j = 0; j < 6; ++j)
            for (int64_t c = 0; c < 3; ++c)
                patches.neighborhoods(patches.patch_row(p, j + 1), c) =
                    patches.centroids(p, c) + offsets(j, c);
    }
    patches.centroid_indices = {0, 1};

    {
        // full tokens differ (positional term sees the centroid)
        Tape t;
        TokenSeq seq = tokenize_points(t, patches, tp);
        double diff = 0.0;
        for (int64_t c = 0; c < 16; ++c)
            diff += std::abs(t.val(seq.tokens)(1, c) - t.val(seq.tokens)(2, c));
        EXPECT_GT(diff, 1e-4);
    }
    {
        // silence the positional MLP: pre-positional tokens are identical
        tp.pos2.w->value.fill(0.0);
        tp.pos2.b->value.fill(0.0);
        Tape t;
        TokenSeq seq = tokenize_points(t, patches, tp);
        for (int64_t c = 0; c < 16; ++c)
            EXPECT_NEAR(t.val(seq.tokens)(1, c), t.val(seq.tokens)(2, c), 1e-9);
    }
}

TEST(Tokenizer, PointShapeErrors) {
    ParamStore ps;
    Rng rng(209);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());
    PatchSet bad = random_patchset(10, 4, 6);
    bad.neighborhoods = Tensor(4 * 7 - 1, 3);
    Tape t;
    EXPECT_THROW(tokenize_points(t, bad, tp), InvalidArgument);
}

TEST(Tokenizer, GradientsReachAllPointParams) {
    ParamStore ps;
    Rng rng(210);
    TokenizerParams tp = make_tokenizer(ps, rng, toy_cfg());
    PatchSet patches = random_patchset(11, 4, 6);
    ps.zero_grad();
    Tape t;
    TokenSeq seq = tokenize_points(t, patches, tp);
    t.backward(t.sum_all(seq.tokens));
    for (Param* p : ps.in_group("tokenizer.point")) {
        double norm = 0.0;
        for (double g : p->grad.v) norm += std::abs(g);
        EXPECT_GT(norm, 0.0) << p->name;
    }
}

TEST(Tokenizer, PointTokenizerGradcheck) {
    ParamStore ps;
    Rng rng(211);
    TokenizerConfig cfg = toy_cfg();
    cfg.d1 = 6;
    cfg.edge_hidden = 4;
    cfg.pos_hidden = 4;
    TokenizerParams tp = make_tokenizer(ps, rng, cfg);
    PatchSet patches = random_patchset(12, 3, 4);

    auto loss_fn = [&]() {
        Tape t;
        TokenSeq seq = tokenize_points(t, patches, tp);
        Rng wr(55);
        Tensor w = random_tensor(wr, 4, 6);
        return t.val(t.sum_all(t.mul(seq.tokens, t.constant(w)))).v[0];
    };
    ps.zero_grad();
    {
        Tape t;
        TokenSeq seq = tokenize_points(t, patches, tp);
        Rng wr(55);
        Tensor w = random_tensor(wr, 4, 6);
        t.backward(t.sum_all(t.mul(seq.tokens, t.constant(w))));
    }
    for (const char* name : {"tokenizer.point.ec1.w", "tokenizer.point.ec2.w",
                             "tokenizer.point.ec1_ln.g", "tokenizer.point.ec2_ln.b",
                             "tokenizer.point.pos1.w", "tokenizer.point.pos2.b",
                             "tokenizer.point.cls", "tokenizer.point.cls_pos"}) {
        Param& p = ps.get(name);
        Tensor fd = rpdtest::fd_grad(loss_fn, p.value);
        EXPECT_LT(rpdtest::max_grad_rel_err(p.grad, fd), 1e-5) << name;
    }
}
