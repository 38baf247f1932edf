// modalpatch: temporal feature prediction and uncertainty-guided fusion on
// synthetic two-modality streams. One subcommand per pipeline step.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "modalpatch/checkpoint.hpp"
#include "modalpatch/config.hpp"
#include "modalpatch/eval.hpp"
#include "modalpatch/gradcheck.hpp"
#include "modalpatch/rng.hpp"
#include "modalpatch/streams.hpp"
#include "modalpatch/trainer.hpp"

namespace fs = std::filesystem;
using namespace modalpatch;

namespace {

struct Paths {
  fs::path workdir;
  fs::path checkpoint(const std::string& stage) const {
    return workdir / "checkpoints" / stage;
  }
  fs::path manifest(const std::string& stage) const {
    return workdir / "manifests" / (stage + ".json");
  }
};

void require_checkpoint(const Paths& paths, const std::string& stage) {
  if (!checkpoint_exists(paths.checkpoint(stage).string()))
    throw config::MissingArtifact("missing checkpoint '" +
                                  paths.checkpoint(stage).string() +
                                  "' (run the '" +
                                  (stage == "det" ? std::string("pretrain")
                                   : stage == "stage1" ? std::string("train1")
                                                       : std::string("train2")) +
                                  "' step first)");
}

std::map<std::string, std::string> checkpoint_hashes(const Paths& paths,
                                                     std::vector<std::string> stages) {
  std::map<std::string, std::string> hashes;
  for (const std::string& s : stages) {
    const std::string prefix = paths.checkpoint(s).string();
    hashes[s + ".json"] = hash_hex(file_hash(prefix + ".json"));
    hashes[s + ".bin"] = hash_hex(file_hash(prefix + ".bin"));
  }
  return hashes;
}

void save_stage(const Paths& paths, const std::string& stage,
                const std::string& manifest_name, const config::RunConfig& cfg,
                const trainer::StageResult& result,
                const std::map<std::string, std::string>& input_hashes) {
  const fs::path ckpt = paths.checkpoint(stage);
  fs::create_directories(ckpt.parent_path());
  save_checkpoint(result.params, ckpt.string());
  fs::create_directories((paths.workdir / "manifests"));
  trainer::write_manifest(paths.manifest(manifest_name).string(), manifest_name,
                          config::config_items(cfg), result, ckpt.string(),
                          input_hashes);
  std::printf("%s: checkpoint %s\n", manifest_name.c_str(), ckpt.string().c_str());
  for (const auto& [k, v] : result.val_metrics)
    std::printf("%s: %s = %.6f\n", manifest_name.c_str(), k.c_str(), v);
}

trainer::Corpus make_corpus(const config::RunConfig& cfg) {
  return trainer::build_corpus(cfg.stream, cfg.train_streams, cfg.val_streams,
                               cfg.stream.frames, cfg.corpus_seed);
}

// ------------------------------------------------------------- subcommands

int cmd_gen(const config::RunConfig& cfg, const Paths& paths, uint64_t seed) {
  const fs::path root = paths.workdir / "streams";
  trainer::Corpus corpus = trainer::build_corpus(
      cfg.stream, cfg.train_streams, cfg.val_streams, cfg.stream.frames, seed);

  const auto dump = [&](const std::vector<streams::Scene>& scenes,
                        const std::string& split) {
    for (size_t i = 0; i < scenes.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "%s_%03zu", split.c_str(), i);
      streams::write_stream_dir(cfg.stream, scenes[i], (root / name).string());
    }
  };
  dump(corpus.train, "train");
  dump(corpus.val, "val");

  // one schedule file per validation stream and drop rate
  const fs::path sched = paths.workdir / "schedules";
  fs::create_directories(sched);
  for (size_t i = 0; i < corpus.val.size(); ++i)
    for (double rate : cfg.rates) {
      const streams::DropSchedule s = streams::gen_drop_schedule(
          mix_seed({cfg.eval_seed, static_cast<uint64_t>(i)}),
          cfg.stream.frames, rate, rate);
      char name[48];
      std::snprintf(name, sizeof(name), "val_%03zu_rate_%.2f.json", i, rate);
      streams::write_schedule(s, (sched / name).string());
    }

  std::printf("gen: %d train + %d val streams under %s\n", cfg.train_streams,
              cfg.val_streams, root.string().c_str());
  return 0;
}

int cmd_pretrain(const config::RunConfig& cfg, const Paths& paths) {
  trainer::StageResult result = trainer::pretrain_detector(
      cfg.stream, cfg.det_cfg(), cfg.train, make_corpus(cfg));
  save_stage(paths, "det", "pretrain", cfg, result, {});
  return 0;
}

int cmd_train1(const config::RunConfig& cfg, const Paths& paths) {
  require_checkpoint(paths, "det");
  const ad::Bindings det = load_checkpoint(paths.checkpoint("det").string());
  trainer::StageResult result = trainer::train_stage1(
      cfg.stream, cfg.hfp_cfg(streams::Modality::Img),
      cfg.hfp_cfg(streams::Modality::Pts), cfg.det_cfg(), cfg.train,
      make_corpus(cfg), det);
  save_stage(paths, "stage1", "train1", cfg, result,
             checkpoint_hashes(paths, {"det"}));
  return 0;
}

int cmd_train2(const config::RunConfig& cfg, const Paths& paths) {
  require_checkpoint(paths, "stage1");
  const ad::Bindings stage1 =
      load_checkpoint(paths.checkpoint("stage1").string());
  trainer::StageResult result = trainer::train_stage2(
      cfg.stream, cfg.hfp_cfg(streams::Modality::Img),
      cfg.hfp_cfg(streams::Modality::Pts), cfg.ucf_cfg(), cfg.det_cfg(),
      cfg.train, make_corpus(cfg), stage1);
  save_stage(paths, "stage2", "train2", cfg, result,
             checkpoint_hashes(paths, {"stage1"}));
  return 0;
}

ad::Bindings load_policy_params(const config::RunConfig& cfg, const Paths& paths,
                                eval::Policy policy) {
  // every policy runs the detector; learned policies add their own stages
  switch (policy) {
    case eval::Policy::ZeroFill:
    case eval::Policy::CopyLast:
    case eval::Policy::Kalman:
      require_checkpoint(paths, "det");
      return load_checkpoint(paths.checkpoint("det").string());
    case eval::Policy::Hfp:
      require_checkpoint(paths, "stage1");
      return load_checkpoint(paths.checkpoint("stage1").string());
    case eval::Policy::HfpUcf:
      require_checkpoint(paths, "stage2");
      return load_checkpoint(paths.checkpoint("stage2").string());
  }
  throw std::runtime_error("unreachable policy");
}

int cmd_eval(const config::RunConfig& cfg, const Paths& paths) {
  const eval::Policy policy = eval::policy_from_name(cfg.policy);
  const ad::Bindings params = load_policy_params(cfg, paths, policy);
  const trainer::Corpus corpus = make_corpus(cfg);
  const eval::EvalSetup setup = cfg.eval_setup();

  // single (policy, rate) cell of the sweep grid
  eval::SweepOptions opts = cfg.sweep_options();
  opts.policies = {policy};
  opts.rates = {cfg.rate};
  if (cfg.heatmap_frames > 0) {
    opts.heatmap_dir = (paths.workdir / "heatmaps").string();
    fs::create_directories(opts.heatmap_dir);
  }

  const eval::SweepReport report = eval::sweep(setup, corpus.val, params, opts);
  const eval::SweepRow& row = report.rows.at(0);
  std::printf("eval: policy=%s rate=%.2f mse_img=%.6f mse_pts=%.6f f1=%.6f "
              "f1_bothdrop=%.6f\n",
              eval::policy_name(row.policy), row.rate, row.mse_img, row.mse_pts,
              row.f1, row.f1_bothdrop);
  eval::write_report_json(report, config::config_items(cfg),
                          (paths.workdir / "eval.json").string());
  return 0;
}

int cmd_sweep(const config::RunConfig& cfg, const Paths& paths) {
  require_checkpoint(paths, "stage2");
  const ad::Bindings params =
      load_checkpoint(paths.checkpoint("stage2").string());
  const trainer::Corpus corpus = make_corpus(cfg);

  eval::SweepOptions opts = cfg.sweep_options();
  if (cfg.heatmap_frames > 0) {
    opts.heatmap_dir = (paths.workdir / "heatmaps").string();
    fs::create_directories(opts.heatmap_dir);
  }

  const eval::SweepReport report = eval::sweep(cfg.eval_setup(), corpus.val,
                                               params, opts);
  eval::write_report_csv(report, (paths.workdir / "report.csv").string());
  eval::write_report_json(report, config::config_items(cfg),
                          (paths.workdir / "report.json").string());
  for (const eval::SweepRow& row : report.rows)
    std::printf("sweep: %-9s rate=%.2f mse_img=%.6f mse_pts=%.6f f1=%.6f "
                "f1_bothdrop=%.6f\n",
                eval::policy_name(row.policy), row.rate, row.mse_img,
                row.mse_pts, row.f1, row.f1_bothdrop);
  std::printf("sweep: wrote %s\n", (paths.workdir / "report.csv").string().c_str());
  return 0;
}

int cmd_gradcheck(uint64_t seed) {
  const std::vector<gradcheck::CheckResult> results = gradcheck::run_suite(seed);
  for (const gradcheck::CheckResult& r : results)
    std::printf("gradcheck: %-20s max_rel_err=%.3e\n", r.name.c_str(),
                r.max_rel_err);
  if (!gradcheck::all_ok(results)) {
    std::fprintf(stderr, "gradcheck: FAILED (tolerance %g)\n", gradcheck::kTolerance);
    return 1;
  }
  std::printf("gradcheck: all %zu checks below %g\n", results.size(),
              gradcheck::kTolerance);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"history-based feature prediction and uncertainty-guided fusion"};
  app.require_subcommand(1);

  std::string workdir = ".";
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--workdir", workdir, "root for all artifacts")
      ->capture_default_str();
  app.add_option("--config", config_path, "flat key = value config file");
  app.add_option("--set", overrides, "override one key (key=value), repeatable");

  // fallthrough lets --workdir/--config/--set appear after the subcommand
  const auto sub = [&](const char* name, const char* desc) {
    CLI::App* s = app.add_subcommand(name, desc);
    s->fallthrough();
    return s;
  };

  uint64_t gen_seed = 7;
  CLI::App* gen = sub("gen", "write stream and schedule files");
  gen->add_option("--seed", gen_seed, "corpus seed")->capture_default_str();

  sub("pretrain", "stage 0: train the detector on clean features");
  sub("train1", "stage 1: train the temporal predictors");
  sub("train2", "stage 2: train variance heads and fusion");
  sub("eval", "run one policy at one drop rate");
  sub("sweep", "all policies at all rates; write the report");

  uint64_t gc_seed = 123;
  CLI::App* gc = sub("gradcheck", "finite-difference suite");
  gc->add_option("--seed", gc_seed, "input seed")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const config::RunConfig cfg = config::load_config(config_path, overrides);
    Paths paths{fs::path(workdir)};
    fs::create_directories(paths.workdir);

    if (gen->parsed()) return cmd_gen(cfg, paths, gen_seed);
    if (app.got_subcommand("pretrain")) return cmd_pretrain(cfg, paths);
    if (app.got_subcommand("train1")) return cmd_train1(cfg, paths);
    if (app.got_subcommand("train2")) return cmd_train2(cfg, paths);
    if (app.got_subcommand("eval")) return cmd_eval(cfg, paths);
    if (app.got_subcommand("sweep")) return cmd_sweep(cfg, paths);
    if (gc->parsed()) return cmd_gradcheck(gc_seed);
  } catch (const config::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const config::MissingArtifact& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
