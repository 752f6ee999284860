// Command-line front end: toy-data generation, two-stage training, SPST
// continuation, evaluation, view export, and checkpoint inspection.
//
// Exit codes: 0 success, 2 config error, 3 ingestion error, 4 numeric abort.

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rpd/pipeline.hpp"

using namespace rpd;

namespace {

// --config file first, then --set key=value overrides, in order.
RunConfig build_config(const std::string& config_path, const std::vector<std::string>& sets) {
    RunConfig cfg = toy_run_config();
    if (!config_path.empty()) cfg = read_run_config(config_path);
    for (const std::string& kv : sets) {
        size_t eq = kv.find('=');
        RPD_CHECK_T(eq != std::string::npos && eq > 0, ConfigError,
                    "--set expects key=value, got '", kv, "'");
        apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

StepMode parse_step_mode(const std::string& m) {
    if (m == "rpd") return StepMode::kRpd;
    if (m == "source-only") return StepMode::kSourceOnly;
    throw ConfigError("unknown mode '" + m + "' (expected rpd or source-only)");
}

void print_outcome(const RunOutcome& out) {
    std::cout << "final checkpoint: " << out.final_checkpoint << "\n"
              << "log: " << out.log_path << "\n"
              << "stage-1 epochs this run: " << out.stage1_epochs_run << "\n"
              << "spst epochs this run: " << out.spst_epochs_run << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cross-modal distillation for point-cloud domain adaptation"};
    app.require_subcommand(1);

    // shared config/override flags; each subcommand gets its own storage
    std::string config_path, source_path, target_path, out_dir, checkpoint, manifest_path;
    std::string points_path, mode = "rpd", domain = "source";
    std::vector<std::string> sets;
    uint64_t seed = 1;
    int64_t classes = 5, per_class = 20, n_points = 256, views = 4, height = 32, width = 32;
    int64_t splat = 1, resample = 0, epoch_limit = -1;
    double sigma = 0.0;
    bool skip_spst = false;
    std::string resume;

    CLI::App* gen = app.add_subcommand("gen-toy", "generate a synthetic shape dataset");
    gen->add_option("--out", out_dir, "output directory")->required();
    gen->add_option("--domain", domain, "source (clean) or target (jitter + holes)")
        ->check(CLI::IsMember({"source", "target"}));
    gen->add_option("--classes", classes, "number of shape classes (2..5)");
    gen->add_option("--per-class", per_class, "samples per class");
    gen->add_option("--points", n_points, "points per cloud");
    gen->add_option("--seed", seed, "generator seed");
    gen->callback([&] {
        ToyDataset ds =
            generate_toy_dataset(per_class, classes, parse_domain(domain), seed, n_points);
        std::string manifest = write_toy_dataset(out_dir, ds);
        std::cout << "manifest: " << manifest << "\n"
                  << "samples: " << ds.clouds.size() << "\n";
    });

    CLI::App* train = app.add_subcommand("train", "two-stage training run");
    train->add_option("--config", config_path, "key-value config file");
    train->add_option("--set", sets, "override one config key (key=value), repeatable");
    train->add_option("--source", source_path, "labeled source manifest")->required();
    train->add_option("--target", target_path, "unlabeled target manifest")->required();
    train->add_option("--out", out_dir, "run directory")->required();
    train->add_option("--seed", seed, "master seed")->required();
    train->add_option("--mode", mode, "rpd or source-only")
        ->check(CLI::IsMember({"rpd", "source-only"}));
    train->add_flag("--skip-spst", skip_spst, "stop after stage 1");
    train->add_option("--resume", resume, "checkpoint to resume from");
    train->add_option("--stage1-epoch-limit", epoch_limit,
                      "stop cleanly after N new stage-1 epochs");
    train->callback([&] {
        RunConfig cfg = build_config(config_path, sets);
        cfg.seed = seed;
        finalize_run_config(cfg);
        RunOutcome out = run_training(cfg, read_manifest(source_path),
                                      read_manifest(target_path), out_dir,
                                      parse_step_mode(mode), !skip_spst, resume, epoch_limit);
        print_outcome(out);
    });

    CLI::App* spst = app.add_subcommand("spst", "continue a stage-1 checkpoint through SPST");
    spst->add_option("--config", config_path, "key-value config file");
    spst->add_option("--set", sets, "override one config key (key=value), repeatable");
    spst->add_option("--source", source_path, "labeled source manifest")->required();
    spst->add_option("--target", target_path, "unlabeled target manifest")->required();
    spst->add_option("--out", out_dir, "run directory")->required();
    spst->add_option("--checkpoint", checkpoint, "stage-1 (or later round) checkpoint")
        ->required();
    spst->callback([&] {
        RunConfig cfg = build_config(config_path, sets);
        RunMeta meta = peek_run_meta(checkpoint);
        RPD_CHECK_T(meta.stage >= 2, ConfigError, "checkpoint '", checkpoint,
                    "' is still in stage 1; finish it with train --resume");
        cfg.seed = meta.seed;
        finalize_run_config(cfg);
        RunOutcome out = run_training(cfg, read_manifest(source_path),
                                      read_manifest(target_path), out_dir, StepMode::kRpd,
                                      true, checkpoint);
        print_outcome(out);
    });

    CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on a labeled manifest");
    ev->add_option("--config", config_path, "key-value config file");
    ev->add_option("--set", sets, "override one config key (key=value), repeatable");
    ev->add_option("--checkpoint", checkpoint, "trained checkpoint")->required();
    ev->add_option("--manifest", manifest_path, "labeled manifest")->required();
    ev->add_option("--seed", seed, "resampling seed");
    ev->callback([&] {
        RunConfig cfg = build_config(config_path, sets);
        cfg.seed = seed;
        finalize_run_config(cfg);
        DatasetManifest m = read_manifest(manifest_path);
        EvalReport rep = evaluate_checkpoint(cfg, checkpoint, m);
        std::cout << eval_report_json(rep, m.class_names) << "\n";
    });

    CLI::App* exp = app.add_subcommand("export-views", "render depth views of a point file");
    exp->add_option("--points", points_path, ".rpc or whitespace xyz file")->required();
    exp->add_option("--out", out_dir, "output directory for PGM images")->required();
    exp->add_option("--views", views, "number of poses (1..10)");
    exp->add_option("--height", height, "render height");
    exp->add_option("--width", width, "render width");
    exp->add_option("--splat", splat, "splat radius in pixels");
    exp->add_option("--sigma", sigma, "gaussian smoothing sigma");
    exp->add_option("--resample", resample, "resample to this many points first (0 = keep)");
    exp->add_option("--seed", seed, "resampling seed");
    exp->callback([&] {
        PointCloud cloud{read_points_any(points_path),
                         std::filesystem::path(points_path).stem().string(), -1};
        if (resample > 0)
            cloud = resample_to(cloud, resample, derive_seed(seed, "cli.resample"));
        cloud = normalize_unit_sphere(cloud);
        MultiViewSet mv =
            render_depth_views(cloud, default_poses(views), height, width, splat, sigma);
        std::filesystem::create_directories(out_dir);
        for (int64_t v = 0; v < mv.views(); ++v) {
            std::string path = out_dir + "/view_" + std::to_string(v) + ".pgm";
            write_pgm(path, mv.images[size_t(v)]);
            std::cout << path << "\n";
        }
    });

    CLI::App* ins = app.add_subcommand("inspect-checkpoint", "print checkpoint metadata");
    ins->add_option("--checkpoint", checkpoint, "checkpoint or pretrained container")
        ->required();
    ins->callback([&] {
        TensorContainer c = TensorContainer::read(checkpoint);
        int64_t params = 0, scalars = 0, adam = 0;
        for (const ContainerEntry& e : c.entries()) {
            if (e.dtype == Dtype::raw) continue;
            if (e.name.size() > 7 && e.name.rfind(".adam_") == e.name.size() - 7) {
                ++adam;
                continue;
            }
            ++params;
            scalars += int64_t(e.element_count());
        }
        std::cout << "file: " << checkpoint << "\n"
                  << "meta: " << (c.has("__meta__") ? c.raw("__meta__") : "(none)") << "\n"
                  << "param tensors: " << params << "\n"
                  << "param scalars: " << scalars << "\n"
                  << "adam tensors: " << adam << "\n"
                  << "checksum: " << std::hex << std::setw(16) << std::setfill('0')
                  << file_checksum(checkpoint) << std::dec << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IngestError& e) {
        std::cerr << "ingestion error: " << e.what() << "\n";
        return 3;
    } catch (const LoadError& e) {
        std::cerr << "ingestion error: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
