#pragma once

// Shared transformer trunk and model assembly: pre-norm blocks, the D1->D2
// token projection, per-modality Proj heads and classifiers, the masked-patch
// decoder parameters, and the partial freeze policy. One parameter store
// serves both modalities; the 2D and 3D paths run through the same blocks.

#include <string>
#include <vector>

#include "rpd/nn.hpp"
#include "rpd/tokenizer.hpp"

namespace rpd {

struct EncoderConfig {
    int64_t depth = 4;
    int64_t heads = 4;
    int64_t width = 64;            // D1
    int64_t token_out_width = 32;  // D2
    int64_t feature_dim = 32;      // d
    int64_t trainable_tail = 3;
    int64_t mlp_ratio = 4;
};

struct ModelConfig {
    EncoderConfig encoder;
    TokenizerConfig tokenizer;
    int64_t dec_layers = 2;
    int64_t dec_heads = 4;
    int64_t n_classes = 5;
    int64_t views = 4;
    int64_t n_point_patches = 8;  // N_P
    int64_t point_k = 16;         // neighbors per patch
    double dropout = 0.5;
    double mask_ratio = 0.85;
    double drop_ratio = 0.85;
};

inline void check_model_config(const ModelConfig& mc) {
    const EncoderConfig& e = mc.encoder;
    RPD_CHECK_T(e.depth >= 1 && e.heads >= 1 && e.width >= 2 && e.token_out_width >= 2 &&
                    e.feature_dim >= 2 && e.mlp_ratio >= 1,
                ConfigError, "EncoderConfig: bad dimensions");
    RPD_CHECK_T(e.width % e.heads == 0, ConfigError, "EncoderConfig: width ", e.width,
                " not divisible by heads ", e.heads);
    RPD_CHECK_T(e.trainable_tail >= 0 && e.trainable_tail <= e.depth, ConfigError,
                "EncoderConfig: trainable_tail ", e.trainable_tail, " exceeds depth ", e.depth);
    RPD_CHECK_T(e.feature_dim % 2 == 0, ConfigError,
                "EncoderConfig: feature_dim must be even (heads use d/2 hidden)");
    RPD_CHECK_T(mc.tokenizer.d1 == e.width, ConfigError, "tokenizer D1 ", mc.tokenizer.d1,
                " must equal encoder width ", e.width);
    RPD_CHECK_T(mc.dec_layers >= 1 && mc.dec_heads >= 1, ConfigError, "bad decoder dims");
    RPD_CHECK_T(e.token_out_width % mc.dec_heads == 0, ConfigError, "decoder width ",
                e.token_out_width, " not divisible by decoder heads ", mc.dec_heads);
    RPD_CHECK_T(mc.n_classes >= 2, ConfigError, "need at least 2 classes");
    RPD_CHECK_T(mc.views >= 1 && mc.views <= 10, ConfigError, "views must be in [1,10]");
    RPD_CHECK_T(mc.n_point_patches >= 1 && mc.point_k >= 1, ConfigError, "bad patch config");
    RPD_CHECK_T(mc.dropout >= 0.0 && mc.dropout < 1.0, ConfigError, "bad dropout");
    RPD_CHECK_T(mc.mask_ratio >= 0.0 && mc.mask_ratio < 1.0 && mc.drop_ratio >= 0.0 &&
                    mc.drop_ratio < 1.0,
                ConfigError, "mask/drop ratios must be in [0,1)");
}

struct Block {
    LayerNormP ln1;
    Linear qkv;   // D1 -> 3*D1
    Linear proj;  // D1 -> D1
    LayerNormP ln2;
    Linear fc1;  // D1 -> ratio*D1
    Linear fc2;  // ratio*D1 -> D1
};

struct Mlp3 {
    Linear fc1, fc2, fc3;
};

struct DecoderLayer {
    LayerNormP ln_q;  // pre-norm before cross-attention
    Linear ca_q, ca_k, ca_v, ca_out;
    LayerNormP ln_s;  // pre-norm before self-attention
    Linear sa_qkv, sa_out;
};

struct DecoderParams {
    LayerNormP mem_ln;  // applied once to the image memory
    std::vector<DecoderLayer> layers;
    Linear pos1, pos2;  // centroid xyz -> D2 positional MLP
    Linear out;         // D2 -> k*3 coordinate head (FCL)
};

struct ModelState {
    ModelConfig cfg;
    ParamStore params;
    TokenizerParams tokenizer;
    std::vector<Block> blocks;
    LayerNormP final_norm;
    Linear token_proj;  // D1 -> D2
    Mlp3 proj_image, proj_point;  // Proj heads -> d
    Mlp3 cls_image, cls_point;    // d -> C classifiers
    DecoderParams decoder;
    Param* mask_emb = nullptr;  // [M_P, D2]

    int64_t masked_count() const { return floor_count(cfg.mask_ratio, cfg.n_point_patches); }
};

namespace detail {

inline Mlp3 make_mlp3(ParamStore& ps, Rng& rng, const std::string& prefix,
                      const std::string& group, int64_t in, int64_t h1, int64_t h2,
                      int64_t out) {
    Mlp3 m;
    m.fc1 = make_linear(ps, rng, prefix + ".fc1", group, in, h1, fanin_std(in));
    m.fc2 = make_linear(ps, rng, prefix + ".fc2", group, h1, h2, fanin_std(h1));
    m.fc3 = make_linear(ps, rng, prefix + ".fc3", group, h2, out, fanin_std(h2));
    return m;
}

}  // namespace detail

inline ModelState make_model(const ModelConfig& mc, uint64_t seed) {
    check_model_config(mc);
    ModelState ms;
    ms.cfg = mc;
    Rng rng(derive_seed(seed, "init"));
    ParamStore& ps = ms.params;
    const EncoderConfig& e = mc.encoder;

    ms.tokenizer = make_tokenizer(ps, rng, mc.tokenizer);

    for (int64_t i = 0; i < e.depth; ++i) {
        std::string pre = "encoder.block" + std::to_string(i);
        std::string grp = pre;
        Block b;
        b.ln1 = make_layernorm(ps, pre + ".ln1", grp, e.width);
        b.qkv = make_linear(ps, rng, pre + ".qkv", grp, e.width, 3 * e.width);
        b.proj = make_linear(ps, rng, pre + ".proj", grp, e.width, e.width);
        b.ln2 = make_layernorm(ps, pre + ".ln2", grp, e.width);
        b.fc1 = make_linear(ps, rng, pre + ".fc1", grp, e.width, e.mlp_ratio * e.width);
        b.fc2 = make_linear(ps, rng, pre + ".fc2", grp, e.mlp_ratio * e.width, e.width);
        ms.blocks.push_back(b);
    }
    ms.final_norm = make_layernorm(ps, "encoder.norm", "encoder.norm", e.width);
    ms.token_proj = make_linear(ps, rng, "encoder.token_proj", "encoder.token_proj", e.width,
                                e.token_out_width, fanin_std(e.width));

    int64_t d = e.feature_dim, d2 = e.token_out_width;
    ms.proj_point =
        detail::make_mlp3(ps, rng, "head.proj_point", "head.proj_point", d2, d, d / 2, d);
    ms.cls_point = detail::make_mlp3(ps, rng, "head.cls_point", "head.cls_point", d, d, d / 2,
                                     mc.n_classes);
    ms.proj_image = detail::make_mlp3(ps, rng, "head.proj_image", "head.proj_image",
                                      mc.views * d2, d, d / 2, d);
    ms.cls_image = detail::make_mlp3(ps, rng, "head.cls_image", "head.cls_image", d, d, d / 2,
                                     mc.n_classes);

    ms.decoder.mem_ln = make_layernorm(ps, "decoder.mem_ln", "decoder", d2);
    for (int64_t i = 0; i < mc.dec_layers; ++i) {
        std::string pre = "decoder.layer" + std::to_string(i);
        DecoderLayer dl;
        dl.ln_q = make_layernorm(ps, pre + ".ln_q", "decoder", d2);
        dl.ca_q = make_linear(ps, rng, pre + ".ca_q", "decoder", d2, d2);
        dl.ca_k = make_linear(ps, rng, pre + ".ca_k", "decoder", d2, d2);
        dl.ca_v = make_linear(ps, rng, pre + ".ca_v", "decoder", d2, d2);
        dl.ca_out = make_linear(ps, rng, pre + ".ca_out", "decoder", d2, d2);
        dl.ln_s = make_layernorm(ps, pre + ".ln_s", "decoder", d2);
        dl.sa_qkv = make_linear(ps, rng, pre + ".sa_qkv", "decoder", d2, 3 * d2);
        dl.sa_out = make_linear(ps, rng, pre + ".sa_out", "decoder", d2, d2);
        ms.decoder.layers.push_back(dl);
    }
    ms.decoder.pos1 = make_linear(ps, rng, "decoder.pos1", "decoder", 3, mc.tokenizer.pos_hidden);
    ms.decoder.pos2 = make_linear(ps, rng, "decoder.pos2", "decoder", mc.tokenizer.pos_hidden, d2);
    ms.decoder.out = make_linear(ps, rng, "decoder.out", "decoder", d2, mc.point_k * 3);

    ms.mask_emb = &ps.add("decoder.mask_emb", "decoder.mask", ms.masked_count(), d2);
    init_normal(rng, ms.mask_emb->value, 0.0, 0.02);
    return ms;
}

// Frozen set: first (depth - trainable_tail) encoder blocks plus the whole
// image tokenizer (patch projection, positional table, class token).
// Everything else trainable. Idempotent.
inline void apply_freeze_policy(ModelState& ms) {
    for (Param* p : ms.params.all()) p->trainable = true;
    int64_t frozen_blocks = ms.cfg.encoder.depth - ms.cfg.encoder.trainable_tail;
    for (int64_t i = 0; i < frozen_blocks; ++i)
        ms.params.set_group_trainable("encoder.block" + std::to_string(i), false);
    ms.params.set_group_trainable("tokenizer.image", false);
}

inline std::vector<std::string> frozen_groups(const ModelState& ms) {
    std::vector<std::string> out;
    int64_t frozen_blocks = ms.cfg.encoder.depth - ms.cfg.encoder.trainable_tail;
    for (int64_t i = 0; i < frozen_blocks; ++i)
        out.push_back("encoder.block" + std::to_string(i));
    out.push_back("tokenizer.image");
    return out;
}

// Captured attention probability matrices (one Var per head per attention
// call, each [n_q, n_k]).
struct AttnCapture {
    std::vector<Var> probs;
};

// Multi-head scaled dot-product attention core; returns the concatenated head
// outputs (pre output-projection).
inline Var attention_core(Tape& t, Var q, Var k, Var v, int64_t heads,
                          AttnCapture* cap = nullptr) {
    int64_t dim = t.val(q).cols;
    RPD_CHECK(dim % heads == 0, "attention_core: dim ", dim, " not divisible by heads ", heads);
    RPD_CHECK(t.val(k).cols == dim && t.val(v).cols == dim, "attention_core: width mismatch");
    int64_t hd = dim / heads;
    double scale = 1.0 / std::sqrt(double(hd));
    std::vector<Var> outs;
    outs.reserve(size_t(heads));
    for (int64_t h = 0; h < heads; ++h) {
        Var qh = t.slice_cols(q, h * hd, (h + 1) * hd);
        Var kh = t.slice_cols(k, h * hd, (h + 1) * hd);
        Var vh = t.slice_cols(v, h * hd, (h + 1) * hd);
        Var att = t.softmax_rows(t.scale(t.matmul(qh, kh, false, true), scale));
        if (cap) cap->probs.push_back(att);
        outs.push_back(t.matmul(att, vh));
    }
    return t.concat_cols(outs);
}

inline Var block_forward(Tape& t, Var x, const Block& b, int64_t heads,
                         AttnCapture* cap = nullptr) {
    int64_t dim = t.val(x).cols;
    Var h = layernorm(t, x, b.ln1);
    Var qkv = linear(t, h, b.qkv);
    Var q = t.slice_cols(qkv, 0, dim);
    Var k = t.slice_cols(qkv, dim, 2 * dim);
    Var v = t.slice_cols(qkv, 2 * dim, 3 * dim);
    x = t.add(x, linear(t, attention_core(t, q, k, v, heads, cap), b.proj));
    Var m = linear(t, t.gelu(linear(t, layernorm(t, x, b.ln2), b.fc1)), b.fc2);
    return t.add(x, m);
}

// Pre-norm trunk then the shared D1->D2 token projection.
inline Var encode_sequence(Tape& t, Var seq, const ModelState& ms, AttnCapture* cap = nullptr) {
    RPD_CHECK(t.val(seq).cols == ms.cfg.encoder.width, "encode_sequence: width ",
              t.val(seq).cols, " does not match D1=", ms.cfg.encoder.width);
    Var x = seq;
    for (const Block& b : ms.blocks) x = block_forward(t, x, b, ms.cfg.encoder.heads, cap);
    x = layernorm(t, x, ms.final_norm);
    return linear(t, x, ms.token_proj);
}

// Three-layer perceptron head: GELU + dropout after each hidden layer.
inline Var mlp3_forward(Tape& t, Var x, const Mlp3& m, double dropout_p, bool training,
                        uint64_t seed) {
    Var h = t.gelu(linear(t, x, m.fc1));
    h = t.dropout(h, dropout_p, derive_seed(seed, "mlp3.d1"), training);
    h = t.gelu(linear(t, h, m.fc2));
    h = t.dropout(h, dropout_p, derive_seed(seed, "mlp3.d2"), training);
    return linear(t, h, m.fc3);
}

struct FeatureBundle {
    Var token_features;           // point path: [(N_P+1) x D2]
    std::vector<Var> view_tokens; // image path: V entries [(N_I+1) x D2]
    Var class_feature;            // [1, D2] (point) or [1, V*D2] (image)
    Var fused_feature;            // [1, d]
    Var logits;                   // [1, C]
};

struct ForwardCtx {
    uint64_t seed = 0;
    bool training = false;
};

// Point path from an existing PatchSet (the trainer reuses one PatchSet per
// sample per step across the KD and reconstruction branches).
inline FeatureBundle point_forward(Tape& t, const PatchSet& patches, const ModelState& ms,
                                   const ForwardCtx& ctx, AttnCapture* cap = nullptr) {
    RPD_CHECK(patches.n_patches == ms.cfg.n_point_patches && patches.k == ms.cfg.point_k,
              "point_forward: PatchSet (", patches.n_patches, ",", patches.k,
              ") does not match config (", ms.cfg.n_point_patches, ",", ms.cfg.point_k, ")");
    FeatureBundle f;
    TokenSeq seq = tokenize_points(t, patches, ms.tokenizer);
    f.token_features = encode_sequence(t, seq.tokens, ms, cap);
    f.class_feature = t.slice_rows(f.token_features, 0, 1);
    f.fused_feature = mlp3_forward(t, f.class_feature, ms.proj_point, ms.cfg.dropout,
                                   ctx.training, derive_seed(ctx.seed, "head.proj_point"));
    f.logits = mlp3_forward(t, f.fused_feature, ms.cls_point, ms.cfg.dropout, ctx.training,
                            derive_seed(ctx.seed, "head.cls_point"));
    return f;
}

inline FeatureBundle image_forward(Tape& t, const std::vector<ImagePatchGrid>& grids,
                                   const ModelState& ms, const ForwardCtx& ctx,
                                   AttnCapture* cap = nullptr) {
    RPD_CHECK(int64_t(grids.size()) == ms.cfg.views, "image_forward: got ", grids.size(),
              " views, config says ", ms.cfg.views);
    FeatureBundle f;
    std::vector<TokenSeq> seqs = tokenize_images(t, grids, ms.tokenizer);
    std::vector<Var> class_rows;
    for (const TokenSeq& s : seqs) {
        Var enc = encode_sequence(t, s.tokens, ms, cap);
        f.view_tokens.push_back(enc);
        class_rows.push_back(t.slice_rows(enc, 0, 1));
    }
    f.class_feature = t.concat_cols(class_rows);  // [1, V*D2]
    f.fused_feature = mlp3_forward(t, f.class_feature, ms.proj_image, ms.cfg.dropout,
                                   ctx.training, derive_seed(ctx.seed, "head.proj_image"));
    f.logits = mlp3_forward(t, f.fused_feature, ms.cls_image, ms.cfg.dropout, ctx.training,
                            derive_seed(ctx.seed, "head.cls_image"));
    return f;
}

// Full point path from a raw (normalized) cloud; patchification is seeded.
inline FeatureBundle extract_point_feature(Tape& t, const PointCloud& cloud,
                                           const ModelState& ms, const ForwardCtx& ctx) {
    PatchSet patches = patchify(cloud, ms.cfg.n_point_patches, ms.cfg.point_k,
                                derive_seed(ctx.seed, "patchify"));
    return point_forward(t, patches, ms, ctx);
}

// Full image path from rendered views.
inline FeatureBundle extract_image_feature(Tape& t, const MultiViewSet& views,
                                           const ModelState& ms, const ForwardCtx& ctx) {
    RPD_CHECK(views.views() == ms.cfg.views, "extract_image_feature: view count mismatch");
    std::vector<ImagePatchGrid> grids;
    grids.reserve(size_t(views.views()));
    for (const Tensor& img : views.images)
        grids.push_back(image_patchify(img, ms.cfg.tokenizer.patch_size));
    return image_forward(t, grids, ms, ctx);
}

}  // namespace rpd
