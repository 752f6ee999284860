#pragma once

// Masked point-patch reconstruction: seeded mask/drop plans, the two-layer
// cross+self attention decoder over kept image tokens, and patch-level EMD
// scoring with the optimal matching held fixed per step.

#include <fstream>
#include <vector>

#include "rpd/assignment.hpp"
#include "rpd/encoder.hpp"

namespace rpd {

struct MaskPlan {
    std::vector<int64_t> masked_indices;         // point patches, sorted, size M_P
    std::vector<int64_t> kept_indices;           // sorted, size R_P = N_P - M_P
    std::vector<int64_t> dropped_image_indices;  // global non-class token ids, sorted
    std::vector<int64_t> kept_image_indices;     // sorted, size R_I
    uint64_t seed = 0;
};

namespace detail {

inline void split_indices(int64_t n, int64_t take, Rng& rng, std::vector<int64_t>* chosen,
                          std::vector<int64_t>* rest) {
    *chosen = rng.sample_without_replacement(n, take);
    std::sort(chosen->begin(), chosen->end());
    rest->clear();
    size_t c = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (c < chosen->size() && (*chosen)[c] == i)
            ++c;
        else
            rest->push_back(i);
    }
}

}  // namespace detail

// n_image_tokens counts non-class image tokens across all views (N_I * V).
inline MaskPlan make_mask_plan(int64_t n_point_tokens, int64_t n_image_tokens,
                               double mask_ratio, double drop_ratio, uint64_t seed) {
    RPD_CHECK(n_point_tokens >= 1 && n_image_tokens >= 1, "make_mask_plan: empty token sets");
    RPD_CHECK(mask_ratio >= 0.0 && mask_ratio < 1.0 && drop_ratio >= 0.0 && drop_ratio < 1.0,
              "make_mask_plan: ratios must be in [0,1)");
    MaskPlan plan;
    plan.seed = seed;
    int64_t masked = floor_count(mask_ratio, n_point_tokens);
    Rng rp(derive_seed(seed, "mask.point"));
    detail::split_indices(n_point_tokens, masked, rp, &plan.masked_indices, &plan.kept_indices);

    int64_t kept_img = floor_count(1.0 - drop_ratio, n_image_tokens);
    Rng ri(derive_seed(seed, "mask.image"));
    detail::split_indices(n_image_tokens, kept_img, ri, &plan.kept_image_indices,
                          &plan.dropped_image_indices);
    return plan;
}

// Collects the kept non-class image tokens (ascending global id v*N_I + i)
// from per-view encoded sequences, skipping each view's class row.
inline Var gather_kept_image_tokens(Tape& t, const std::vector<Var>& view_tokens,
                                    const MaskPlan& plan, int64_t n_image_tokens_per_view) {
    RPD_CHECK(!view_tokens.empty(), "gather_kept_image_tokens: no views");
    int64_t views = int64_t(view_tokens.size());
    int64_t total = views * n_image_tokens_per_view;
    std::vector<Var> parts;
    size_t c = 0;
    for (int64_t v = 0; v < views; ++v) {
        RPD_CHECK(t.val(view_tokens[size_t(v)]).rows == n_image_tokens_per_view + 1,
                  "gather_kept_image_tokens: view ", v, " has ",
                  t.val(view_tokens[size_t(v)]).rows, " rows, want ",
                  n_image_tokens_per_view + 1);
        std::vector<int64_t> local;
        while (c < plan.kept_image_indices.size() &&
               plan.kept_image_indices[c] < (v + 1) * n_image_tokens_per_view) {
            int64_t g = plan.kept_image_indices[c];
            RPD_CHECK(g >= 0 && g < total, "gather_kept_image_tokens: index ", g,
                      " outside [0,", total, ")");
            local.push_back(g - v * n_image_tokens_per_view + 1);  // +1 skips the class row
            ++c;
        }
        if (!local.empty()) parts.push_back(t.gather_rows(view_tokens[size_t(v)], local));
    }
    RPD_CHECK(c == plan.kept_image_indices.size(),
              "gather_kept_image_tokens: plan does not fit view count");
    RPD_CHECK(!parts.empty(), "gather_kept_image_tokens: plan keeps no tokens");
    return parts.size() == 1 ? parts[0] : t.concat_rows(parts);
}

// Decoder forward (Eq.-9 style): masked slots start from their mask embedding,
// kept slots from the encoded point token; every slot receives the positional
// encoding of its centroid; two rounds of cross-attention onto the kept image
// tokens followed by self-attention; a final linear head emits k
// centroid-relative coordinates per masked slot, rows in ascending masked
// patch order.
inline Var decode_masked(Tape& t, const MaskPlan& plan, Var point_tokens, Var image_kept,
                         const Tensor& centroids, const ModelState& ms) {
    int64_t np = ms.cfg.n_point_patches;
    int64_t d2 = ms.cfg.encoder.token_out_width;
    RPD_CHECK(int64_t(plan.masked_indices.size() + plan.kept_indices.size()) == np,
              "decode_masked: plan covers ", plan.masked_indices.size() + plan.kept_indices.size(),
              " patches, config has ", np);
    RPD_CHECK(t.val(point_tokens).rows == np && t.val(point_tokens).cols == d2,
              "decode_masked: point tokens are ", t.val(point_tokens).rows, "x",
              t.val(point_tokens).cols, ", want ", np, "x", d2);
    RPD_CHECK(t.val(image_kept).rows == int64_t(plan.kept_image_indices.size()) &&
                  t.val(image_kept).cols == d2,
              "decode_masked: image memory is ", t.val(image_kept).rows, "x",
              t.val(image_kept).cols, ", want ", plan.kept_image_indices.size(), "x", d2);
    RPD_CHECK(centroids.rows == np && centroids.cols == 3, "decode_masked: bad centroids");
    RPD_CHECK(int64_t(plan.masked_indices.size()) == ms.mask_emb->value.rows,
              "decode_masked: ", plan.masked_indices.size(), " masked slots but ",
              ms.mask_emb->value.rows, " mask embeddings");

    const DecoderParams& dec = ms.decoder;
    Var pos = linear(t, t.gelu(linear(t, t.input(centroids), dec.pos1)), dec.pos2);

    // Slot j reads mask embedding rank(j) if masked, else its encoded token.
    std::vector<int64_t> source(size_t(np), -1);
    for (size_t r = 0; r < plan.masked_indices.size(); ++r)
        source[size_t(plan.masked_indices[r])] = int64_t(r);
    for (int64_t j : plan.kept_indices) {
        RPD_CHECK(j >= 0 && j < np && source[size_t(j)] == -1,
                  "decode_masked: plan is not a partition");
        source[size_t(j)] = ms.mask_emb->value.rows + j;
    }
    Var pool = t.concat_rows({leaf(t, *ms.mask_emb), point_tokens});
    Var x = t.add(t.gather_rows(pool, source), pos);

    Var mem = layernorm(t, image_kept, dec.mem_ln);
    for (const DecoderLayer& dl : dec.layers) {
        Var q = linear(t, layernorm(t, x, dl.ln_q), dl.ca_q);
        Var ca = attention_core(t, q, linear(t, mem, dl.ca_k), linear(t, mem, dl.ca_v),
                                ms.cfg.dec_heads);
        x = t.add(x, linear(t, ca, dl.ca_out));
        Var h = layernorm(t, x, dl.ln_s);
        Var qkv = linear(t, h, dl.sa_qkv);
        Var sa = attention_core(t, t.slice_cols(qkv, 0, d2), t.slice_cols(qkv, d2, 2 * d2),
                                t.slice_cols(qkv, 2 * d2, 3 * d2), ms.cfg.dec_heads);
        x = t.add(x, linear(t, sa, dl.sa_out));
    }
    return linear(t, t.gather_rows(x, plan.masked_indices), dec.out);  // [M_P, k*3]
}

// Scalar EMD between a predicted point set and a fixed target, with the
// optimal matching frozen for the backward pass (envelope subgradient).
inline Var emd_loss(Tape& t, Var predicted, const Tensor& target) {
    const Tensor& p = t.val(predicted);
    RPD_CHECK(p.cols == 3 && target.cols == 3, "emd_loss: point sets must be n x 3");
    RPD_CHECK(p.rows == target.rows, "emd_loss: cardinality mismatch ", p.rows, " vs ",
              target.rows);
    auto [dist, match] = emd_with_matching(p, target);
    int64_t n = target.rows;
    Tensor tgt = target;
    return t.custom(predicted, Tensor::scalar(dist),
                    [n, match, tgt](const Tensor& pv, const Tensor& gout) {
                        double g = gout(0, 0);
                        Tensor gx(pv.rows, pv.cols);
                        for (int64_t i = 0; i < n; ++i) {
                            double dx = pv(i, 0) - tgt(match[size_t(i)], 0);
                            double dy = pv(i, 1) - tgt(match[size_t(i)], 1);
                            double dz = pv(i, 2) - tgt(match[size_t(i)], 2);
                            double d = std::sqrt(dx * dx + dy * dy + dz * dz);
                            if (d > 1e-12) {
                                double s = g / (double(n) * d);
                                gx(i, 0) = s * dx;
                                gx(i, 1) = s * dy;
                                gx(i, 2) = s * dz;
                            }
                        }
                        return gx;
                    });
}

// Mean over masked patches of EMD between (prediction + centroid) and the
// patch's true k neighbors.
inline Var recon_loss(Tape& t, Var predicted, const MaskPlan& plan, const PatchSet& patches) {
    int64_t mp = int64_t(plan.masked_indices.size());
    RPD_CHECK(mp >= 1, "recon_loss: nothing masked");
    const Tensor& p = t.val(predicted);
    RPD_CHECK(p.rows == mp && p.cols == 3 * patches.k, "recon_loss: predictions are ", p.rows,
              "x", p.cols, ", want ", mp, "x", 3 * patches.k);
    Var total;
    for (int64_t r = 0; r < mp; ++r) {
        int64_t j = plan.masked_indices[size_t(r)];
        RPD_CHECK(j >= 0 && j < patches.n_patches, "recon_loss: masked index ", j,
                  " outside patch set");
        Var pred = t.reshape(t.slice_rows(predicted, r, r + 1), patches.k, 3);
        Tensor centroid(1, 3);
        for (int64_t c = 0; c < 3; ++c) centroid(0, c) = patches.centroids(j, c);
        Var pred_abs = t.add_row(pred, t.input(centroid));
        Tensor target(patches.k, 3);
        for (int64_t i = 0; i < patches.k; ++i)
            for (int64_t c = 0; c < 3; ++c)
                target(i, c) = patches.neighborhoods(patches.patch_row(j, i + 1), c);
        Var e = emd_loss(t, pred_abs, target);
        total = total.valid() ? t.add(total, e) : e;
    }
    return t.scale(total, 1.0 / double(mp));
}

// Whitespace xyz text dump, one point per line.
inline void write_xyz(const std::string& path, const Tensor& pts) {
    RPD_CHECK(pts.cols == 3, "write_xyz: points must be n x 3");
    std::ofstream f(path, std::ios::trunc);
    RPD_CHECK_T(f.good(), LoadError, "cannot open '", path, "' for writing");
    f.precision(17);
    for (int64_t i = 0; i < pts.rows; ++i)
        f << pts(i, 0) << " " << pts(i, 1) << " " << pts(i, 2) << "\n";
    RPD_CHECK_T(f.good(), LoadError, "short write to '", path, "'");
}

// Fig.-6-style triple: the full input cloud, the kept (visible) patch points,
// and the reconstructed masked patches in absolute coordinates.
inline void dump_recon_triple(const std::string& prefix, const PointCloud& input,
                              const MaskPlan& plan, const PatchSet& patches,
                              const Tensor& predicted) {
    write_xyz(prefix + ".input.xyz", input.points);

    Tensor kept(int64_t(plan.kept_indices.size()) * patches.k, 3);
    int64_t r = 0;
    for (int64_t j : plan.kept_indices)
        for (int64_t i = 0; i < patches.k; ++i, ++r)
            for (int64_t c = 0; c < 3; ++c)
                kept(r, c) = patches.neighborhoods(patches.patch_row(j, i + 1), c);
    write_xyz(prefix + ".kept.xyz", kept);

    RPD_CHECK(predicted.rows == int64_t(plan.masked_indices.size()) &&
                  predicted.cols == 3 * patches.k,
              "dump_recon_triple: bad prediction shape");
    Tensor recon(predicted.rows * patches.k, 3);
    r = 0;
    for (int64_t m = 0; m < predicted.rows; ++m) {
        int64_t j = plan.masked_indices[size_t(m)];
        for (int64_t i = 0; i < patches.k; ++i, ++r)
            for (int64_t c = 0; c < 3; ++c)
                recon(r, c) = predicted(m, i * 3 + c) + patches.centroids(j, c);
    }
    write_xyz(prefix + ".recon.xyz", recon);
}

}  // namespace rpd
