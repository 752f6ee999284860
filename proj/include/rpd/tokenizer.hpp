#pragma once

// Modality tokenizers: linear patch projection for depth views (single channel
// replicated to the projection's expected channel count) and a mini edge-conv
// network for point patches. Both emit [(T+1) x D1] sequences with the class
// token at row 0 and positional encodings added.

#include <string>
#include <vector>

#include "rpd/geometry.hpp"
#include "rpd/nn.hpp"
#include "rpd/projection.hpp"

namespace rpd {

struct TokenizerConfig {
    int64_t d1 = 64;
    int64_t channels = 3;
    int64_t patch_size = 8;       // P
    int64_t n_image_tokens = 16;  // N_I = (H/P) * (W/P)
    int64_t point_knn = 16;       // k' of the intra-patch graph
    int64_t edge_hidden = 64;
    int64_t pos_hidden = 64;
};

struct TokenSeq {
    Var tokens;               // [(T+1), D1], class token at row 0
    int64_t view_index = -1;  // -1 for point sequences
};

struct TokenizerParams {
    TokenizerConfig cfg;
    // image side, group "tokenizer.image"
    Linear image_patch;  // channels*P*P -> D1
    Param* image_pos = nullptr;  // [N_I+1, D1]
    Param* image_cls = nullptr;  // [1, D1]
    // point side, group "tokenizer.point"
    Linear ec1;  // 6 -> edge_hidden
    LayerNormP ec1_ln;
    Linear ec2;  // 2*edge_hidden -> D1
    LayerNormP ec2_ln;
    Linear pos1;  // 3 -> pos_hidden
    Linear pos2;  // pos_hidden -> D1
    Param* point_cls = nullptr;      // [1, D1]
    Param* point_cls_pos = nullptr;  // [1, D1]
};

// Fixed sinusoidal table covering T+1 slots (row 0 = class token slot); used
// when no pretrained table is imported.
inline void init_sinusoidal(Tensor& pos) {
    int64_t d = pos.cols;
    for (int64_t i = 0; i < pos.rows; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double angle = double(i) / std::pow(10000.0, double(2 * (j / 2)) / double(d));
            pos(i, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
}

inline TokenizerParams make_tokenizer(ParamStore& ps, Rng& rng, const TokenizerConfig& cfg) {
    RPD_CHECK(cfg.d1 >= 2 && cfg.channels >= 1 && cfg.patch_size >= 1 &&
                  cfg.n_image_tokens >= 1 && cfg.point_knn >= 1 && cfg.edge_hidden >= 1 &&
                  cfg.pos_hidden >= 1,
              "TokenizerConfig: bad dimensions");
    TokenizerParams tp;
    tp.cfg = cfg;
    int64_t pin = cfg.channels * cfg.patch_size * cfg.patch_size;
    tp.image_patch = make_linear(ps, rng, "tokenizer.image.patch", "tokenizer.image", pin,
                                 cfg.d1, fanin_std(pin));
    tp.image_pos = &ps.add("tokenizer.image.pos", "tokenizer.image", cfg.n_image_tokens + 1, cfg.d1);
    init_sinusoidal(tp.image_pos->value);
    tp.image_cls = &ps.add("tokenizer.image.cls", "tokenizer.image", 1, cfg.d1);
    init_trunc_normal(rng, tp.image_cls->value);

    tp.ec1 = make_linear(ps, rng, "tokenizer.point.ec1", "tokenizer.point", 6, cfg.edge_hidden,
                         fanin_std(6));
    tp.ec1_ln = make_layernorm(ps, "tokenizer.point.ec1_ln", "tokenizer.point", cfg.edge_hidden);
    tp.ec2 = make_linear(ps, rng, "tokenizer.point.ec2", "tokenizer.point", 2 * cfg.edge_hidden,
                         cfg.d1, fanin_std(2 * cfg.edge_hidden));
    tp.ec2_ln = make_layernorm(ps, "tokenizer.point.ec2_ln", "tokenizer.point", cfg.d1);
    tp.pos1 = make_linear(ps, rng, "tokenizer.point.pos1", "tokenizer.point", 3, cfg.pos_hidden,
                          fanin_std(3));
    tp.pos2 = make_linear(ps, rng, "tokenizer.point.pos2", "tokenizer.point", cfg.pos_hidden,
                          cfg.d1, fanin_std(cfg.pos_hidden));
    tp.point_cls = &ps.add("tokenizer.point.cls", "tokenizer.point", 1, cfg.d1);
    init_trunc_normal(rng, tp.point_cls->value);
    tp.point_cls_pos = &ps.add("tokenizer.point.cls_pos", "tokenizer.point", 1, cfg.d1);
    init_trunc_normal(rng, tp.point_cls_pos->value);
    return tp;
}

// One [(N_I+1) x D1] sequence per view. The single positional table is shared
// across views.
inline std::vector<TokenSeq> tokenize_images(Tape& t, const std::vector<ImagePatchGrid>& grids,
                                             const TokenizerParams& tp) {
    RPD_CHECK(!grids.empty(), "tokenize_images: no views");
    const TokenizerConfig& cfg = tp.cfg;
    int64_t pp = cfg.patch_size * cfg.patch_size;
    std::vector<TokenSeq> out;
    out.reserve(grids.size());
    Var pos = leaf(t, *tp.image_pos);
    Var pos_cls = t.slice_rows(pos, 0, 1);
    Var pos_rest = t.slice_rows(pos, 1, cfg.n_image_tokens + 1);
    for (size_t v = 0; v < grids.size(); ++v) {
        const ImagePatchGrid& g = grids[v];
        RPD_CHECK(g.patches.cols == pp, "tokenize_images: patch length ", g.patches.cols,
                  " does not match projection input ", pp);
        RPD_CHECK(g.patches.rows == cfg.n_image_tokens, "tokenize_images: got ", g.patches.rows,
                  " patches, config says ", cfg.n_image_tokens);
        // replicate the single depth channel, channel-major
        Tensor rep(g.patches.rows, cfg.channels * pp);
        for (int64_t r = 0; r < g.patches.rows; ++r)
            for (int64_t c = 0; c < cfg.channels; ++c)
                for (int64_t i = 0; i < pp; ++i) rep(r, c * pp + i) = g.patches(r, i);
        Var tok = linear(t, t.constant(std::move(rep)), tp.image_patch);
        Var cls_row = t.add(leaf(t, *tp.image_cls), pos_cls);
        TokenSeq seq;
        seq.tokens = t.concat_rows({cls_row, t.add(tok, pos_rest)});
        seq.view_index = int64_t(v);
        out.push_back(seq);
    }
    return out;
}

// Mini edge-conv tokenizer. Local coordinates are centroid-relative, the
// intra-patch k' graph is static (built once from coordinates), each edge conv
// is linear -> layernorm -> GELU with max aggregation over neighbors, and the
// patch token is the max over its points. The centroid's positional MLP output
// and the class token (with its own positional vector) complete the sequence.
inline TokenSeq tokenize_points(Tape& t, const PatchSet& patches, const TokenizerParams& tp) {
    const TokenizerConfig& cfg = tp.cfg;
    RPD_CHECK(patches.n_patches >= 1 && patches.k >= 1, "tokenize_points: empty PatchSet");
    RPD_CHECK(patches.neighborhoods.cols == 3 &&
                  patches.neighborhoods.rows == patches.n_patches * (patches.k + 1),
              "tokenize_points: PatchSet shape mismatch");
    int64_t np = patches.n_patches;
    int64_t s = patches.k + 1;
    int64_t keff = std::min(cfg.point_knn, s - 1);

    // centroid-relative coordinates
    Tensor rel(np * s, 3);
    for (int64_t p = 0; p < np; ++p)
        for (int64_t j = 0; j < s; ++j)
            for (int64_t c = 0; c < 3; ++c)
                rel(p * s + j, c) =
                    patches.neighborhoods(p * s + j, c) - patches.centroids(p, c);

    // static intra-patch graph: k' nearest by (squared distance, local index)
    std::vector<int64_t> edge_src, edge_dst, group_of_edge;
    edge_src.reserve(size_t(np * s * keff));
    edge_dst.reserve(size_t(np * s * keff));
    group_of_edge.reserve(size_t(np * s * keff));
    std::vector<std::pair<double, int64_t>> d;
    d.reserve(static_cast<size_t>(s));
    for (int64_t p = 0; p < np; ++p)
        for (int64_t i = 0; i < s; ++i) {
            int64_t gi = p * s + i;
            d.clear();
            for (int64_t j = 0; j < s; ++j) {
                if (j == i) continue;
                d.emplace_back(dist2_rows(rel, gi, rel, p * s + j), j);
            }
            std::sort(d.begin(), d.end());
            for (int64_t e = 0; e < keff; ++e) {
                edge_src.push_back(gi);
                edge_dst.push_back(p * s + d[size_t(e)].second);
                group_of_edge.push_back(gi);
            }
        }

    Var x = t.constant(std::move(rel));
    Var e_src = t.gather_rows(x, edge_src);
    Var e_dst = t.gather_rows(x, edge_dst);
    Var e1 = t.concat_cols({e_src, t.sub(e_dst, e_src)});
    Var f1 = t.rowmax_groups(
        t.gelu(layernorm(t, linear(t, e1, tp.ec1), tp.ec1_ln)), group_of_edge, np * s);

    Var f_src = t.gather_rows(f1, edge_src);
    Var f_dst = t.gather_rows(f1, edge_dst);
    Var e2 = t.concat_cols({f_src, t.sub(f_dst, f_src)});
    Var f2 = t.rowmax_groups(
        t.gelu(layernorm(t, linear(t, e2, tp.ec2), tp.ec2_ln)), group_of_edge, np * s);

    // max over the points of each patch
    std::vector<int64_t> patch_of_point(static_cast<size_t>(np * s));
    for (int64_t p = 0; p < np; ++p)
        for (int64_t j = 0; j < s; ++j) patch_of_point[size_t(p * s + j)] = p;
    Var tokens = t.rowmax_groups(f2, patch_of_point, np);

    Var pos = linear(t, t.gelu(linear(t, t.constant(patches.centroids), tp.pos1)), tp.pos2);
    Var cls_row = t.add(leaf(t, *tp.point_cls), leaf(t, *tp.point_cls_pos));
    TokenSeq seq;
    seq.tokens = t.concat_rows({cls_row, t.add(tokens, pos)});
    return seq;
}

}  // namespace rpd
