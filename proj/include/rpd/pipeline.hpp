#pragma once

// Orchestration: the two-stage training run, line-delimited JSON logs,
// checkpoints with resume, and evaluation.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rpd/config.hpp"
#include "rpd/dataset.hpp"
#include "rpd/serialize.hpp"

namespace rpd {

// ---- structured log ----

struct TrainLogRecord {
    int64_t epoch = 0;
    std::string phase;  // "stage1" | "spst"
    double kd = 0, emd = 0, cls_s = 0, cls_t = 0, total = 0;
    double lr = 0, theta = 0;
    int64_t pseudo_count = 0;
};

inline std::string log_record_line(const TrainLogRecord& r) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["phase"] = r.phase;
    j["kd"] = r.kd;
    j["emd"] = r.emd;
    j["cls_s"] = r.cls_s;
    j["cls_t"] = r.cls_t;
    j["total"] = r.total;
    j["lr"] = r.lr;
    j["theta"] = r.theta;
    j["pseudo_count"] = r.pseudo_count;
    return j.dump();
}

inline TrainLogRecord parse_log_record(const std::string& line) {
    try {
        nlohmann::json j = nlohmann::json::parse(line);
        TrainLogRecord r;
        r.epoch = j.at("epoch").get<int64_t>();
        r.phase = j.at("phase").get<std::string>();
        r.kd = j.at("kd").get<double>();
        r.emd = j.at("emd").get<double>();
        r.cls_s = j.at("cls_s").get<double>();
        r.cls_t = j.at("cls_t").get<double>();
        r.total = j.at("total").get<double>();
        r.lr = j.at("lr").get<double>();
        r.theta = j.at("theta").get<double>();
        r.pseudo_count = j.at("pseudo_count").get<int64_t>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw IngestError(std::string("parse_log_record: ") + e.what());
    }
}

inline std::vector<TrainLogRecord> read_log_file(const std::string& path) {
    std::ifstream f(path);
    RPD_CHECK_T(f.good(), IngestError, "read_log_file: cannot open '", path, "'");
    std::vector<TrainLogRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(parse_log_record(line));
    }
    return out;
}

// ---- checkpoint metadata ----

// stage 1 = stage-1 training in progress, 2 = SPST in progress, 3 = complete.
struct RunMeta {
    int64_t schema = 1;
    int64_t stage = 1;
    int64_t next_epoch = 0;
    int64_t next_round = 0;
    uint64_t seed = 0;
    std::string preset = "toy";
    std::string setting = "toy";
};

inline std::string run_meta_json(const RunMeta& m) {
    nlohmann::ordered_json j;
    j["schema"] = m.schema;
    j["stage"] = m.stage;
    j["next_epoch"] = m.next_epoch;
    j["next_round"] = m.next_round;
    j["seed"] = m.seed;
    j["preset"] = m.preset;
    j["setting"] = m.setting;
    return j.dump();
}

inline RunMeta parse_run_meta(const std::string& text) {
    try {
        nlohmann::json j = nlohmann::json::parse(text);
        RunMeta m;
        m.schema = j.at("schema").get<int64_t>();
        RPD_CHECK_T(m.schema == 1, LoadError, "unsupported checkpoint schema ", m.schema);
        m.stage = j.at("stage").get<int64_t>();
        m.next_epoch = j.at("next_epoch").get<int64_t>();
        m.next_round = j.at("next_round").get<int64_t>();
        m.seed = j.at("seed").get<uint64_t>();
        m.preset = j.at("preset").get<std::string>();
        m.setting = j.at("setting").get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("parse_run_meta: ") + e.what());
    }
}

// Reads only the metadata blob; no model needed.
inline RunMeta peek_run_meta(const std::string& checkpoint) {
    return parse_run_meta(TensorContainer::read(checkpoint).raw("__meta__"));
}

inline uint64_t file_checksum(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    RPD_CHECK_T(f.good(), IngestError, "file_checksum: cannot open '", path, "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return hash_str(bytes);
}

// ---- evaluation ----

struct EvalReport {
    int64_t n = 0;
    double accuracy = 0;        // ensemble, = trace/total
    double point_accuracy = 0;  // point branch alone
    double image_accuracy = 0;
    std::vector<int64_t> class_counts;
    std::vector<double> per_class_accuracy;
    Tensor confusion;  // [C,C], row = true class, col = ensemble prediction
};

inline int64_t argmax_row(const Tensor& t) {
    RPD_CHECK(t.rows == 1 && t.cols >= 1, "argmax_row: expected [1,C]");
    int64_t best = 0;
    for (int64_t i = 1; i < t.cols; ++i)
        if (t(0, i) > t(0, best)) best = i;
    return best;
}

inline EvalReport evaluate_predictions(const std::vector<int64_t>& labels,
                                       const std::vector<int64_t>& point_pred,
                                       const std::vector<int64_t>& image_pred,
                                       const std::vector<int64_t>& ensemble_pred, int64_t classes) {
    size_t n = labels.size();
    RPD_CHECK(classes >= 2, "evaluate_predictions: need classes >= 2");
    RPD_CHECK(point_pred.size() == n && image_pred.size() == n && ensemble_pred.size() == n,
              "evaluate_predictions: prediction streams disagree on length");
    RPD_CHECK(n >= 1, "evaluate_predictions: empty evaluation set");
    EvalReport rep;
    rep.n = int64_t(n);
    rep.class_counts.assign(size_t(classes), 0);
    rep.confusion = Tensor(classes, classes);
    int64_t ok = 0, ok_p = 0, ok_i = 0;
    for (size_t i = 0; i < n; ++i) {
        int64_t y = labels[i];
        RPD_CHECK(y >= 0 && y < classes, "evaluate_predictions: label ", y, " outside [0, ",
                  classes, ")");
        RPD_CHECK(ensemble_pred[i] >= 0 && ensemble_pred[i] < classes &&
                      point_pred[i] >= 0 && point_pred[i] < classes && image_pred[i] >= 0 &&
                      image_pred[i] < classes,
                  "evaluate_predictions: prediction outside [0, ", classes, ")");
        rep.class_counts[size_t(y)] += 1;
        rep.confusion(y, ensemble_pred[i]) += 1.0;
        ok += ensemble_pred[i] == y;
        ok_p += point_pred[i] == y;
        ok_i += image_pred[i] == y;
    }
    rep.accuracy = double(ok) / double(n);
    rep.point_accuracy = double(ok_p) / double(n);
    rep.image_accuracy = double(ok_i) / double(n);
    rep.per_class_accuracy.assign(size_t(classes), 0.0);
    for (int64_t c = 0; c < classes; ++c)
        if (rep.class_counts[size_t(c)] > 0)
            rep.per_class_accuracy[size_t(c)] =
                rep.confusion(c, c) / double(rep.class_counts[size_t(c)]);
    return rep;
}

// Per-sample prediction is the argmax of the mean of the two branch logits;
// views are rendered from the raw normalized cloud, never augmented.
inline EvalReport evaluate(ModelState& ms, const std::vector<PointCloud>& clouds,
                           const RenderSpec& rs) {
    std::vector<int64_t> labels, pp, ip, ep;
    for (const PointCloud& c : clouds) {
        RPD_CHECK(c.label >= 0, "evaluate: unlabeled sample '", c.id, "'");
        auto [pl, il] = eval_logits(ms, c, rs);
        labels.push_back(c.label);
        pp.push_back(argmax_row(pl));
        ip.push_back(argmax_row(il));
        ep.push_back(argmax_row(ensemble_logits(pl, il)));
    }
    return evaluate_predictions(labels, pp, ip, ep, ms.cfg.n_classes);
}

inline std::string eval_report_json(const EvalReport& r,
                                    const std::vector<std::string>& class_names = {}) {
    nlohmann::ordered_json j;
    j["samples"] = r.n;
    j["accuracy"] = r.accuracy;
    j["point_accuracy"] = r.point_accuracy;
    j["image_accuracy"] = r.image_accuracy;
    if (!class_names.empty()) j["class_names"] = class_names;
    j["class_counts"] = r.class_counts;
    j["per_class_accuracy"] = r.per_class_accuracy;
    std::vector<std::vector<int64_t>> cm(size_t(r.confusion.rows));
    for (int64_t a = 0; a < r.confusion.rows; ++a)
        for (int64_t b = 0; b < r.confusion.cols; ++b)
            cm[size_t(a)].push_back(int64_t(r.confusion(a, b)));
    j["confusion"] = cm;
    return j.dump(2);
}

// ---- training run ----

struct RunPaths {
    std::string out_dir;
    std::string log;
    std::string last;
    std::string stage1;
    std::string final_ckpt;

    std::string round_ckpt(int64_t r) const {
        return out_dir + "/spst_round_" + std::to_string(r) + ".rpdt";
    }
};

inline RunPaths run_paths(const std::string& out_dir) {
    RunPaths p;
    p.out_dir = out_dir;
    p.log = out_dir + "/train_log.jsonl";
    p.last = out_dir + "/last.rpdt";
    p.stage1 = out_dir + "/stage1.rpdt";
    p.final_ckpt = out_dir + "/final.rpdt";
    return p;
}

struct RunOutcome {
    std::string final_checkpoint;
    std::string log_path;
    int64_t stage1_epochs_run = 0;
    int64_t spst_epochs_run = 0;
};

// Stage 1 (cross-modal distillation + reconstruction + source supervision)
// followed by stage 2 (SPST). Every epoch appends one log record; a rolling
// checkpoint lands after each stage-1 epoch and each SPST round, so a
// non-finite loss aborts with the last good checkpoint still on disk. Resume
// restores parameters, optimizer moments, and position, and reproduces the
// loss sequence of an uninterrupted run bit for bit. stage1_epoch_limit stops
// cleanly after that many new stage-1 epochs (time-sliced training).
inline RunOutcome run_training(const RunConfig& cfg, const DatasetManifest& source,
                               const DatasetManifest& target, const std::string& out_dir,
                               StepMode mode = StepMode::kRpd, bool with_spst = true,
                               const std::string& resume_from = "",
                               int64_t stage1_epoch_limit = -1) {
    check_run_config(cfg);
    RPD_CHECK_T(stage1_epoch_limit == -1 || stage1_epoch_limit >= 1, ConfigError,
                "stage1_epoch_limit must be -1 or >= 1");
    RPD_CHECK_T(int64_t(source.class_names.size()) == cfg.model.n_classes, ConfigError,
                "source manifest has ", source.class_names.size(), " classes, config expects ",
                cfg.model.n_classes);
    RPD_CHECK_T(target.entries.empty() ||
                    int64_t(target.class_names.size()) == cfg.model.n_classes,
                ConfigError, "target manifest class table does not match config");
    if (mode == StepMode::kSourceOnly) with_spst = false;

    std::vector<PointCloud> src = load_dataset(source, cfg.n_points,
                                               derive_seed(cfg.seed, "data.source"));
    RPD_CHECK_T(!src.empty(), ConfigError, "source dataset is empty");
    std::vector<PointCloud> tgt = load_dataset(target, cfg.n_points,
                                               derive_seed(cfg.seed, "data.target"));
    for (PointCloud& c : tgt) c.label = -1;  // UDA: target labels never reach training

    std::filesystem::create_directories(out_dir);
    RunPaths paths = run_paths(out_dir);

    ModelState ms = make_model(cfg.model, derive_seed(cfg.seed, "model.init"));
    apply_freeze_policy(ms);
    AdamConfig oc;
    oc.lr = cfg.base_lr;
    oc.weight_decay = cfg.weight_decay;
    Adam opt(ms.params, oc);
    RenderSpec rs{cfg.render_h, cfg.render_w, cfg.splat_radius, cfg.smooth_sigma,
                  default_poses(cfg.model.views)};

    RunMeta meta;
    meta.seed = cfg.seed;
    meta.preset = preset_name(cfg.preset);
    meta.setting = cfg.setting;
    if (!resume_from.empty()) {
        meta = parse_run_meta(load_checkpoint(resume_from, ms, &opt));
        RPD_CHECK_T(meta.seed == cfg.seed, ConfigError,
                    "resume checkpoint was written under seed ", meta.seed,
                    ", config says ", cfg.seed);
    }

    std::ofstream log(paths.log, resume_from.empty() ? std::ios::trunc : std::ios::app);
    RPD_CHECK_T(log.good(), IngestError, "cannot open log '", paths.log, "'");
    auto emit = [&](const TrainLogRecord& r) {
        log << log_record_line(r) << "\n";
        log.flush();
    };
    auto guard_finite = [&](double total, int64_t epoch) {
        RPD_CHECK_T(std::isfinite(total), NumericError, "non-finite loss at epoch ", epoch,
                    "; last good checkpoint: ", paths.last);
    };
    auto augmented = [&](const PointCloud& c, int64_t ge) {
        const AugmentSpec& base = cfg.train_aug;
        if (!(base.rotate || base.jitter || base.drop_holes)) return c;
        AugmentSpec a = base;
        a.seed = derive_seed(cfg.seed, "aug", {uint64_t(ge), hash_str(c.id)});
        return augment(c, a);
    };

    RunOutcome outcome;
    outcome.log_path = paths.log;

    // stage 1
    int64_t e0 = meta.stage == 1 ? meta.next_epoch : cfg.epochs;
    for (int64_t e = e0; e < cfg.epochs; ++e) {
        PhasePlan plan = schedule_phase(e);
        double lr = cosine_lr(cfg.base_lr, e, cfg.epochs);
        opt.set_lr(lr);
        Rng srng(derive_seed(cfg.seed, "s1.src", {uint64_t(e)}));
        Rng trng(derive_seed(cfg.seed, "s1.tgt", {uint64_t(e)}));
        auto sb = plan_batches(int64_t(src.size()), cfg.batch_size, srng);
        auto tb = (mode == StepMode::kRpd && !tgt.empty())
                      ? plan_batches(int64_t(tgt.size()), cfg.batch_size, trng)
                      : std::vector<std::vector<int64_t>>{};
        size_t steps = std::max(sb.size(), tb.size());
        LossReport sum;
        for (size_t s = 0; s < steps; ++s) {
            std::vector<PointCloud> src_b, tgt_b;
            for (int64_t i : sb[s % sb.size()]) src_b.push_back(augmented(src[size_t(i)], e));
            if (!tb.empty())
                for (int64_t i : tb[s % tb.size()]) tgt_b.push_back(augmented(tgt[size_t(i)], e));
            uint64_t step_seed = derive_seed(cfg.seed, "s1.step", {uint64_t(e), uint64_t(s)});
            LossReport rep = mode == StepMode::kRpd
                                 ? train_step_stage1(ms, opt, src_b, tgt_b, plan, cfg.weights, rs,
                                                     step_seed)
                                 : train_step(ms, opt, src_b, {}, plan, cfg.weights, rs,
                                              step_seed, StepMode::kSourceOnly);
            guard_finite(rep.total, e);
            sum.kd += rep.kd;
            sum.emd += rep.emd;
            sum.cls_source += rep.cls_source;
            sum.cls_target += rep.cls_target;
            sum.total += rep.total;
        }
        double inv = 1.0 / double(steps);
        TrainLogRecord rec;
        rec.epoch = e;
        rec.phase = "stage1";
        rec.kd = sum.kd * inv;
        rec.emd = sum.emd * inv;
        rec.cls_s = sum.cls_source * inv;
        rec.cls_t = sum.cls_target * inv;
        rec.total = sum.total * inv;
        rec.lr = lr;
        emit(rec);
        meta.stage = 1;
        meta.next_epoch = e + 1;
        save_checkpoint(paths.last, ms, &opt, run_meta_json(meta));
        outcome.stage1_epochs_run += 1;
        if (stage1_epoch_limit >= 0 && outcome.stage1_epochs_run >= stage1_epoch_limit) {
            outcome.final_checkpoint = paths.last;  // stopped mid-stage-1; resume from here
            return outcome;
        }
    }
    if (meta.stage == 1) {
        meta.stage = 2;
        meta.next_round = 0;
        save_checkpoint(paths.stage1, ms, &opt, run_meta_json(meta));
        save_checkpoint(paths.last, ms, &opt, run_meta_json(meta));
    }

    // stage 2
    if (with_spst && meta.stage == 2) {
        int64_t total_spst = cfg.spst.rounds * cfg.spst.epochs_per_round;
        SpstHooks hooks;
        hooks.lr_for_epoch = [&](int64_t ge) {
            return cosine_lr(cfg.base_lr, ge - cfg.epochs, total_spst);
        };
        hooks.augment_sample = augmented;
        hooks.on_epoch = [&](const SpstEpochInfo& info) {
            guard_finite(info.mean.total, info.global_epoch);
            TrainLogRecord rec;
            rec.epoch = info.global_epoch;
            rec.phase = "spst";
            rec.kd = info.mean.kd;
            rec.emd = info.mean.emd;
            rec.cls_s = info.mean.cls_source;
            rec.cls_t = info.mean.cls_target;
            rec.total = info.mean.total;
            rec.lr = cosine_lr(cfg.base_lr, info.global_epoch - cfg.epochs, total_spst);
            rec.theta = info.theta;
            rec.pseudo_count = info.pseudo_count;
            emit(rec);
            outcome.spst_epochs_run += 1;
            if (info.epoch_in_round == cfg.spst.epochs_per_round - 1) {
                meta.stage = 2;
                meta.next_round = info.round + 1;
                save_checkpoint(paths.round_ckpt(info.round), ms, &opt, run_meta_json(meta));
                save_checkpoint(paths.last, ms, &opt, run_meta_json(meta));
            }
        };
        run_spst(ms, opt, src, tgt, cfg.spst, cfg.weights, rs, cfg.batch_size, cfg.seed,
                 cfg.epochs, hooks, meta.next_round);
        meta.stage = 3;
    }
    if (!with_spst) {
        outcome.final_checkpoint = paths.stage1;
        return outcome;
    }

    meta.stage = 3;
    save_checkpoint(paths.final_ckpt, ms, &opt, run_meta_json(meta));
    save_checkpoint(paths.last, ms, &opt, run_meta_json(meta));
    outcome.final_checkpoint = paths.final_ckpt;
    return outcome;
}

// Rebuilds the model from config, restores the checkpoint, and scores a
// labeled manifest.
inline EvalReport evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint,
                                      const DatasetManifest& manifest) {
    check_run_config(cfg);
    RPD_CHECK_T(int64_t(manifest.class_names.size()) == cfg.model.n_classes, ConfigError,
                "manifest has ", manifest.class_names.size(), " classes, config expects ",
                cfg.model.n_classes);
    ModelState ms = make_model(cfg.model, 0);
    load_checkpoint(checkpoint, ms, nullptr);
    std::vector<PointCloud> clouds =
        load_dataset(manifest, cfg.n_points, derive_seed(cfg.seed, "data.eval"));
    RenderSpec rs{cfg.render_h, cfg.render_w, cfg.splat_radius, cfg.smooth_sigma,
                  default_poses(cfg.model.views)};
    return evaluate(ms, clouds, rs);
}

}  // namespace rpd
