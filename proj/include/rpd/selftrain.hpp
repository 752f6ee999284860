#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "rpd/distill.hpp"

namespace rpd {

struct SPSTConfig {
    double theta_init = 0.8;
    double epsilon = 0.05;
    int64_t rounds = 10;
    int64_t epochs_per_round = 5;
    double theta_cap = 0.95;
};

inline void check_spst_config(const SPSTConfig& c) {
    if (!(c.theta_init > 0.0 && c.theta_init <= c.theta_cap && c.theta_cap < 1.0))
        throw ConfigError("SPSTConfig: need 0 < theta_init <= theta_cap < 1");
    if (!(c.epsilon >= 0.0)) throw ConfigError("SPSTConfig: epsilon must be >= 0");
    if (c.rounds < 1 || c.epochs_per_round < 1)
        throw ConfigError("SPSTConfig: rounds and epochs_per_round must be >= 1");
}

struct PseudoLabelEntry {
    int64_t cls = -1;
    double confidence = 0.0;
};

struct PseudoLabelTable {
    std::map<std::string, PseudoLabelEntry> entries;  // sample id -> (class, confidence)
    int64_t round = 0;
    double theta = 0.0;
};

inline double threshold_for_round(int64_t round, const SPSTConfig& cfg) {
    check_spst_config(cfg);
    RPD_CHECK(round >= 0 && round < cfg.rounds, "threshold_for_round: round ", round,
              " outside [0, ", cfg.rounds, ")");
    return std::min(cfg.theta_init + double(round) * cfg.epsilon, cfg.theta_cap);
}

// Element-wise mean of the two branches' logits (the Avg of the ensembling rule).
inline Tensor ensemble_logits(const Tensor& point_logits, const Tensor& image_logits) {
    RPD_CHECK(point_logits.rows == 1 && image_logits.rows == 1 &&
                  point_logits.cols == image_logits.cols,
              "ensemble_logits: widths differ (", point_logits.cols, " vs ", image_logits.cols,
              ")");
    Tensor out(1, point_logits.cols);
    for (int64_t i = 0; i < out.size(); ++i)
        out.v[size_t(i)] = 0.5 * (point_logits.v[size_t(i)] + image_logits.v[size_t(i)]);
    return out;
}

inline std::vector<double> softmax_row(const Tensor& logits) {
    RPD_CHECK(logits.rows == 1 && logits.cols >= 1, "softmax_row: want a 1 x C row");
    double mx = logits.v[0];
    for (double v : logits.v) mx = std::max(mx, v);
    std::vector<double> p(logits.v.size());
    double z = 0.0;
    for (size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits.v[i] - mx));
    for (double& x : p) x /= z;
    return p;
}

// Deterministic eval-mode forward of both branches; the patch seed comes from
// the sample id so tables do not depend on dataset order.
inline std::pair<Tensor, Tensor> eval_logits(ModelState& ms, const PointCloud& cloud,
                                             const RenderSpec& rs) {
    RPD_CHECK(int64_t(rs.poses.size()) == ms.cfg.views, "eval_logits: pose count ",
              rs.poses.size(), " != configured views ", ms.cfg.views);
    uint64_t seed = derive_seed(hash_str(cloud.id), "eval");
    Tape t;
    ForwardCtx ctx{seed, false};
    PatchSet patches = patchify(cloud, ms.cfg.n_point_patches, ms.cfg.point_k,
                                derive_seed(seed, "patchify"));
    FeatureBundle point = point_forward(t, patches, ms, ctx);

    MultiViewSet views = render_for_model(cloud, rs);
    std::vector<ImagePatchGrid> grids;
    grids.reserve(views.images.size());
    for (const Tensor& img : views.images)
        grids.push_back(image_patchify(img, ms.tokenizer.cfg.patch_size));
    FeatureBundle image = image_forward(t, grids, ms, ctx);
    return {t.val(point.logits), t.val(image.logits)};
}

struct EnsemblePrediction {
    int64_t cls = -1;
    double confidence = 0.0;
};

inline EnsemblePrediction predict_ensemble(ModelState& ms, const PointCloud& cloud,
                                           const RenderSpec& rs) {
    auto [pl, il] = eval_logits(ms, cloud, rs);
    std::vector<double> p = softmax_row(ensemble_logits(pl, il));
    EnsemblePrediction out;
    for (size_t c = 0; c < p.size(); ++c)
        if (p[c] > out.confidence) {
            out.confidence = p[c];
            out.cls = int64_t(c);
        }
    return out;
}

inline PseudoLabelTable generate_pseudo_labels(const std::vector<PointCloud>& targets,
                                               ModelState& ms, const RenderSpec& rs,
                                               double theta) {
    RPD_CHECK(theta > 0.0 && theta < 1.0, "generate_pseudo_labels: theta must be in (0,1), got ",
              theta);
    PseudoLabelTable table;
    table.theta = theta;
    for (const PointCloud& c : targets) {
        EnsemblePrediction pred = predict_ensemble(ms, c, rs);
        if (pred.confidence > theta) table.entries[c.id] = {pred.cls, pred.confidence};
    }
    return table;
}

// Eq.-12 objective per sample: -log(p^P_c * p^I_c) — identical to the
// unsmoothed dual-branch cross entropy under label substitution.
inline Var spst_loss(Tape& t, Var point_logits, Var image_logits, int64_t pseudo_label) {
    return supervised_cls_loss(t, point_logits, image_logits, pseudo_label);
}

// Copies of the target samples with pseudo labels applied (-1 when absent).
inline std::vector<PointCloud> label_targets_from_table(const std::vector<PointCloud>& targets,
                                                        const PseudoLabelTable& table) {
    std::vector<PointCloud> out = targets;
    for (PointCloud& c : out) {
        auto it = table.entries.find(c.id);
        c.label = it == table.entries.end() ? -1 : it->second.cls;
    }
    return out;
}

// Seeded shuffle chunked into ceil(n/batch) batches; the last one may be short.
inline std::vector<std::vector<int64_t>> plan_batches(int64_t n, int64_t batch, Rng& rng) {
    RPD_CHECK(batch >= 1, "plan_batches: batch must be >= 1");
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[size_t(i)] = i;
    for (int64_t i = n - 1; i > 0; --i)
        std::swap(idx[size_t(i)], idx[size_t(rng.uniform_int(i + 1))]);
    std::vector<std::vector<int64_t>> out;
    for (int64_t at = 0; at < n; at += batch)
        out.emplace_back(idx.begin() + at, idx.begin() + std::min(at + batch, n));
    return out;
}

struct SpstEpochInfo {
    int64_t round = 0;
    int64_t epoch_in_round = 0;
    int64_t global_epoch = 0;
    double theta = 0.0;
    int64_t pseudo_count = 0;
    LossReport mean;
};

struct SpstHooks {
    std::function<double(int64_t global_epoch)> lr_for_epoch;
    std::function<void(const PseudoLabelTable&)> on_round;
    std::function<void(const SpstEpochInfo&)> on_epoch;
    // training-time augmentation; pseudo-label generation always sees raw clouds
    std::function<PointCloud(const PointCloud&, int64_t global_epoch)> augment_sample;
};

// Stage 2: per round, regenerate the table from the frozen-model snapshot,
// then train with the pseudo-label term active. KD and reconstruction stay on
// with their stage-1 weights; the epoch counter continues from stage 1 so the
// teacher/student alternation keeps its rhythm.
inline PseudoLabelTable run_spst(ModelState& ms, Adam& opt,
                                 const std::vector<PointCloud>& source,
                                 const std::vector<PointCloud>& target, const SPSTConfig& scfg,
                                 const TrainWeights& w, const RenderSpec& rs, int64_t batch_size,
                                 uint64_t seed, int64_t epoch0 = 0, const SpstHooks& hooks = {},
                                 int64_t first_round = 0) {
    check_spst_config(scfg);
    RPD_CHECK(!source.empty(), "run_spst: source set is empty");
    RPD_CHECK(batch_size >= 1, "run_spst: batch_size must be >= 1");
    RPD_CHECK(first_round >= 0 && first_round <= scfg.rounds, "run_spst: bad first_round ",
              first_round);

    PseudoLabelTable table;
    for (int64_t r = first_round; r < scfg.rounds; ++r) {
        double theta = threshold_for_round(r, scfg);
        table = generate_pseudo_labels(target, ms, rs, theta);
        table.round = r;
        if (table.entries.empty() && !target.empty())
            std::cerr << "warning: spst round " << r << " selected no pseudo labels at theta="
                      << theta << "; training on source terms only\n";
        if (hooks.on_round) hooks.on_round(table);
        std::vector<PointCloud> labeled = label_targets_from_table(target, table);

        for (int64_t e = 0; e < scfg.epochs_per_round; ++e) {
            int64_t ge = epoch0 + r * scfg.epochs_per_round + e;
            if (hooks.lr_for_epoch) opt.set_lr(hooks.lr_for_epoch(ge));
            PhasePlan plan = schedule_phase(ge);

            Rng srng(derive_seed(seed, "spst.src", {uint64_t(ge)}));
            Rng trng(derive_seed(seed, "spst.tgt", {uint64_t(ge)}));
            auto sb = plan_batches(int64_t(source.size()), batch_size, srng);
            auto tb = labeled.empty()
                          ? std::vector<std::vector<int64_t>>{}
                          : plan_batches(int64_t(labeled.size()), batch_size, trng);
            size_t steps = std::max(sb.size(), tb.size());

            LossReport sum;
            for (size_t s = 0; s < steps; ++s) {
                std::vector<PointCloud> src_b, tgt_b;
                for (int64_t i : sb[s % sb.size()])
                    src_b.push_back(hooks.augment_sample ? hooks.augment_sample(source[size_t(i)], ge)
                                                         : source[size_t(i)]);
                if (!tb.empty())
                    for (int64_t i : tb[s % tb.size()])
                        tgt_b.push_back(hooks.augment_sample
                                            ? hooks.augment_sample(labeled[size_t(i)], ge)
                                            : labeled[size_t(i)]);
                LossReport rep =
                    train_step(ms, opt, src_b, tgt_b, plan, w, rs,
                               derive_seed(seed, "spst.step", {uint64_t(ge), uint64_t(s)}));
                sum.kd += rep.kd;
                sum.emd += rep.emd;
                sum.cls_source += rep.cls_source;
                sum.cls_target += rep.cls_target;
                sum.total += rep.total;
            }
            double inv = steps ? 1.0 / double(steps) : 0.0;
            SpstEpochInfo info;
            info.round = r;
            info.epoch_in_round = e;
            info.global_epoch = ge;
            info.theta = theta;
            info.pseudo_count = int64_t(table.entries.size());
            info.mean = {sum.kd * inv, sum.cls_source * inv, sum.cls_target * inv,
                         sum.emd * inv, sum.total * inv};
            if (hooks.on_epoch) hooks.on_epoch(info);
        }
    }
    return table;
}

}  // namespace rpd
