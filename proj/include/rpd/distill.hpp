#pragma once

// Online cross-modal distillation: the KL alignment loss, the two-branch
// supervised loss, the alternating teacher/student phase schedule, and the
// combined training step (KD + masked reconstruction + supervised terms) with
// phase-gated optimizer updates.

#include <string>
#include <vector>

#include "rpd/projection.hpp"
#include "rpd/reconstruct.hpp"

namespace rpd {

struct PhasePlan {
    int64_t epoch = 0;
    bool teacher_trainable = true;
    bool student_trainable = true;  // always
    bool decoder_trainable = true;  // always
};

inline PhasePlan schedule_phase(int64_t epoch) {
    RPD_CHECK(epoch >= 0, "schedule_phase: negative epoch ", epoch);
    PhasePlan p;
    p.epoch = epoch;
    p.teacher_trainable = (epoch % 10) < 5;
    return p;
}

// Teacher-owned parameter groups for scheduling: the image Proj head and the
// image classifier. The shared trunk tail belongs to the student and updates
// in both phases; the image tokenizer is frozen outright.
inline const std::vector<std::string>& teacher_groups() {
    static const std::vector<std::string> g = {"head.proj_image", "head.cls_image"};
    return g;
}

inline bool group_active_in_phase(const PhasePlan& plan, const std::string& group) {
    if (plan.teacher_trainable) return true;
    for (const std::string& tg : teacher_groups())
        if (group == tg) return false;
    return true;
}

struct LossReport {
    double kd = 0.0;
    double cls_source = 0.0;
    double cls_target = 0.0;
    double emd = 0.0;
    double total = 0.0;
};

// D_KL(softmax(student/T) || softmax(teacher/T)).
inline Var kd_loss(Tape& t, Var student_logits, Var teacher_logits, double temperature = 1.0) {
    const Tensor& s = t.val(student_logits);
    const Tensor& tt = t.val(teacher_logits);
    RPD_CHECK(s.rows == 1 && tt.rows == 1 && s.cols == tt.cols,
              "kd_loss: logit rows must be 1x C each, got ", s.rows, "x", s.cols, " and ",
              tt.rows, "x", tt.cols);
    RPD_CHECK(temperature > 0.0, "kd_loss: temperature must be positive");
    RPD_CHECK_T(s.all_finite() && tt.all_finite(), NumericError, "kd_loss: non-finite logits");
    Var sv = temperature == 1.0 ? student_logits : t.scale(student_logits, 1.0 / temperature);
    Var tv = temperature == 1.0 ? teacher_logits : t.scale(teacher_logits, 1.0 / temperature);
    Var ls = t.log_softmax_rows(sv);
    Var lt = t.log_softmax_rows(tv);
    return t.sum_all(t.mul(t.softmax_rows(sv), t.sub(ls, lt)));
}

// Smoothed cross-entropy of one logit row: weight 1-s+s/C on the label,
// s/C elsewhere.
inline Var cross_entropy(Tape& t, Var logits, int64_t label, double smoothing = 0.0) {
    const Tensor& L = t.val(logits);
    RPD_CHECK(L.rows == 1, "cross_entropy: logits must be one row");
    RPD_CHECK(label >= 0 && label < L.cols, "cross_entropy: label ", label, " outside [0,",
              L.cols, ")");
    RPD_CHECK(smoothing >= 0.0 && smoothing < 1.0, "cross_entropy: bad smoothing ", smoothing);
    Tensor w(1, L.cols);
    for (int64_t j = 0; j < L.cols; ++j) w(0, j) = smoothing / double(L.cols);
    w(0, label) += 1.0 - smoothing;
    return t.scale(t.sum_all(t.mul(t.log_softmax_rows(logits), t.input(w))), -1.0);
}

// -log(p^P_label * p^I_label): the two branch cross-entropies added.
inline Var supervised_cls_loss(Tape& t, Var point_logits, Var image_logits, int64_t label,
                               double smoothing = 0.0) {
    return t.add(cross_entropy(t, point_logits, label, smoothing),
                 cross_entropy(t, image_logits, label, smoothing));
}

struct TrainWeights {
    double alpha = 1.0;  // L_emd
    double beta = 1.0;   // L_cls^s
    double eta = 1.0;    // L_cls^t (pseudo-labels, stage 2)
    double label_smoothing = 0.0;
    double kd_temperature = 1.0;
};

struct RenderSpec {
    int64_t h = 32, w = 32;
    int64_t splat_radius = 0;
    double smooth_sigma = 0.0;
    std::vector<ViewPose> poses;
};

inline MultiViewSet render_for_model(const PointCloud& cloud, const RenderSpec& rs) {
    return render_depth_views(cloud, rs.poses, rs.h, rs.w, rs.splat_radius, rs.smooth_sigma);
}

// One sample through both branches plus the KD and reconstruction losses.
struct SampleForward {
    FeatureBundle point;
    FeatureBundle image;
    PatchSet patches;
    MaskPlan plan;
    Var kd;
    Var emd;
};

inline SampleForward forward_sample(Tape& t, const PointCloud& cloud, const ModelState& ms,
                                    const RenderSpec& rs, const TrainWeights& w,
                                    bool detach_teacher_kd, uint64_t seed, bool training) {
    RPD_CHECK(int64_t(rs.poses.size()) == ms.cfg.views, "forward_sample: ", rs.poses.size(),
              " poses for ", ms.cfg.views, " views");
    SampleForward sf;
    sf.patches = patchify(cloud, ms.cfg.n_point_patches, ms.cfg.point_k,
                          derive_seed(seed, "patchify"));
    ForwardCtx ctx{seed, training};
    sf.point = point_forward(t, sf.patches, ms, ctx);

    MultiViewSet views = render_for_model(cloud, rs);
    std::vector<ImagePatchGrid> grids;
    grids.reserve(views.images.size());
    for (const Tensor& img : views.images)
        grids.push_back(image_patchify(img, ms.cfg.tokenizer.patch_size));
    sf.image = image_forward(t, grids, ms, ctx);

    Var teacher = detach_teacher_kd ? t.detach(sf.image.logits) : sf.image.logits;
    sf.kd = kd_loss(t, sf.point.logits, teacher, w.kd_temperature);

    int64_t np = ms.cfg.n_point_patches;
    int64_t ni = ms.cfg.tokenizer.n_image_tokens;
    sf.plan = make_mask_plan(np, ms.cfg.views * ni, ms.cfg.mask_ratio, ms.cfg.drop_ratio,
                             derive_seed(seed, "maskplan"));
    Var pt_tokens = t.slice_rows(sf.point.token_features, 1, np + 1);
    Var mem = gather_kept_image_tokens(t, sf.image.view_tokens, sf.plan, ni);
    Var pred = decode_masked(t, sf.plan, pt_tokens, mem, sf.patches.centroids, ms);
    sf.emd = recon_loss(t, pred, sf.plan, sf.patches);
    return sf;
}

enum class StepMode { kRpd, kSourceOnly };

// One optimizer step. Source samples must be labeled; target samples
// contribute KD/EMD always and the eta term when they carry a (pseudo) label.
// kSourceOnly is the ablation baseline: supervised loss only, no KD, no
// reconstruction, target batch ignored.
inline LossReport train_step(ModelState& ms, Adam& opt, const std::vector<PointCloud>& source,
                             const std::vector<PointCloud>& target, const PhasePlan& plan,
                             const TrainWeights& w, const RenderSpec& rs, uint64_t step_seed,
                             StepMode mode = StepMode::kRpd) {
    RPD_CHECK(!source.empty(), "train_step: empty source batch");
    ms.params.zero_grad();
    Tape t;
    Var kd_sum, emd_sum, cls_sum, cls_t_sum;
    auto add_to = [&t](Var& acc, Var x) { acc = acc.valid() ? t.add(acc, x) : x; };
    int64_t n_src = int64_t(source.size());
    int64_t n_all = n_src + int64_t(target.size());
    int64_t n_pseudo = 0;

    for (int64_t i = 0; i < n_all; ++i) {
        const PointCloud& cloud = i < n_src ? source[size_t(i)] : target[size_t(i - n_src)];
        uint64_t seed = derive_seed(step_seed, {uint64_t(i)});
        if (mode == StepMode::kSourceOnly) {
            if (i >= n_src) continue;
            RPD_CHECK(cloud.label >= 0, "train_step: unlabeled source sample '", cloud.id, "'");
            PatchSet patches = patchify(cloud, ms.cfg.n_point_patches, ms.cfg.point_k,
                                        derive_seed(seed, "patchify"));
            ForwardCtx ctx{seed, true};
            FeatureBundle point = point_forward(t, patches, ms, ctx);
            MultiViewSet views = render_for_model(cloud, rs);
            std::vector<ImagePatchGrid> grids;
            for (const Tensor& img : views.images)
                grids.push_back(image_patchify(img, ms.cfg.tokenizer.patch_size));
            FeatureBundle image = image_forward(t, grids, ms, ctx);
            add_to(cls_sum, supervised_cls_loss(t, point.logits, image.logits, cloud.label,
                                                w.label_smoothing));
            continue;
        }
        SampleForward sf =
            forward_sample(t, cloud, ms, rs, w, !plan.teacher_trainable, seed, true);
        add_to(kd_sum, sf.kd);
        add_to(emd_sum, sf.emd);
        if (i < n_src) {
            RPD_CHECK(cloud.label >= 0, "train_step: unlabeled source sample '", cloud.id, "'");
            add_to(cls_sum, supervised_cls_loss(t, sf.point.logits, sf.image.logits, cloud.label,
                                                w.label_smoothing));
        } else if (cloud.label >= 0) {
            // pseudo-label objective: -log(p^P_c * p^I_c), never smoothed
            add_to(cls_t_sum, supervised_cls_loss(t, sf.point.logits, sf.image.logits,
                                                  cloud.label));
            ++n_pseudo;
        }
    }

    LossReport rep;
    Var total;
    if (kd_sum.valid()) {
        Var kd_mean = t.scale(kd_sum, 1.0 / double(n_all));
        Var emd_mean = t.scale(emd_sum, 1.0 / double(n_all));
        rep.kd = t.val(kd_mean)(0, 0);
        rep.emd = t.val(emd_mean)(0, 0);
        total = t.add(kd_mean, t.scale(emd_mean, w.alpha));
    }
    {
        Var cls_mean = t.scale(cls_sum, 1.0 / double(n_src));
        rep.cls_source = t.val(cls_mean)(0, 0);
        Var term = t.scale(cls_mean, w.beta);
        total = total.valid() ? t.add(total, term) : term;
    }
    if (cls_t_sum.valid()) {
        Var cls_t_mean = t.scale(cls_t_sum, 1.0 / double(n_pseudo));
        rep.cls_target = t.val(cls_t_mean)(0, 0);
        total = t.add(total, t.scale(cls_t_mean, w.eta));
    }
    rep.total = t.val(total)(0, 0);

    t.backward(total);
    opt.step([&plan](const Param& p) { return group_active_in_phase(plan, p.group); });
    return rep;
}

// Stage-1 wrapper: target labels are never consulted (clouds pass through
// with the label field ignored by construction).
inline LossReport train_step_stage1(ModelState& ms, Adam& opt,
                                    const std::vector<PointCloud>& source,
                                    const std::vector<PointCloud>& target, const PhasePlan& plan,
                                    const TrainWeights& w, const RenderSpec& rs,
                                    uint64_t step_seed) {
    std::vector<PointCloud> unlabeled = target;
    for (PointCloud& c : unlabeled) c.label = -1;
    return train_step(ms, opt, source, unlabeled, plan, w, rs, step_seed, StepMode::kRpd);
}

}  // namespace rpd
