#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "modalpatch/trainer.hpp"

using namespace modalpatch;

namespace {

bool bitwise_equal(const Array& a, const Array& b) {
  REQUIRE(a.data.size() == b.data.size());
  return std::memcmp(a.data.data(), b.data.data(),
                     a.data.size() * sizeof(double)) == 0;
}

// micro problem that exercises every stage in a few seconds
struct MicroSetup {
  streams::StreamConfig scfg;
  detector::DetectorConfig dcfg;
  hfp::HfpConfig icfg, pcfg;
  ucf::UcfConfig ucfg;
  trainer::TrainConfig tcfg;

  MicroSetup() {
    scfg.h = scfg.w = 8;
    scfg.d_img = scfg.d_pts = 4;
    scfg.n_objects = 2;
    scfg.frames = 10;
    scfg.range_img = 5.0;
    dcfg.d_img = dcfg.d_pts = 4;
    dcfg.d_h = 6;
    dcfg.h = dcfg.w = 8;
    icfg.d = pcfg.d = 4;
    icfg.h = pcfg.h = icfg.w = pcfg.w = 8;
    icfg.tau = pcfg.tau = 2;
    icfg.k = pcfg.k = 1;
    ucfg.d = 4;
    ucfg.h = ucfg.w = 8;
    ucfg.k = 1;
    tcfg.epochs = 2;
    tcfg.pretrain_epochs = 2;
    tcfg.batch_size = 2;
    tcfg.samples_per_stream = 2;
    tcfg.pretrain_target_f1 = 2.0;  // never early-stop on the micro corpus
    tcfg.pretrain_abort_f1 = 0.0;   // ...and never abort either
  }
};

}  // namespace

TEST_CASE("AdamW single step matches the hand-derived update") {
  trainer::TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;
  cfg.clip_norm = 1.0;
  trainer::AdamW opt({"p"}, cfg);
  ad::Bindings params;
  params["p"] = Array::from({2}, {1.0, -2.0});
  std::map<std::string, Array> grads;
  grads["p"] = Array::from({2}, {0.3, -0.4});  // norm 0.5: no clipping

  opt.step(params, grads);
  CHECK(opt.steps_taken() == 1);
  // step 1: mhat = g, vhat = g^2, so the adaptive term is sign(g) up to eps
  for (int i = 0; i < 2; ++i) {
    const double g = grads["p"].data[static_cast<size_t>(i)];
    const double p0 = i == 0 ? 1.0 : -2.0;
    const double mhat = 0.1 * g / (1.0 - 0.9);
    const double vhat = 0.001 * g * g / (1.0 - 0.999);
    const double want =
        p0 - 0.1 * (mhat / (std::sqrt(vhat) + 1e-8) + 0.01 * p0);
    CHECK(params["p"].data[static_cast<size_t>(i)] ==
          doctest::Approx(want).epsilon(1e-15));
  }

  // step 2 with a different gradient, still by hand
  const double p1 = params["p"].data[0];
  std::map<std::string, Array> grads2;
  grads2["p"] = Array::from({2}, {-0.1, 0.2});
  opt.step(params, grads2);
  CHECK(opt.steps_taken() == 2);
  const double m2 = 0.9 * (0.1 * 0.3) + 0.1 * (-0.1);
  const double v2 = 0.999 * (0.001 * 0.09) + 0.001 * 0.01;
  const double mhat2 = m2 / (1.0 - 0.81);
  const double vhat2 = v2 / (1.0 - 0.999 * 0.999);
  const double want1 =
      p1 - 0.1 * (mhat2 / (std::sqrt(vhat2) + 1e-8) + 0.01 * p1);
  CHECK(params["p"].data[0] == doctest::Approx(want1).epsilon(1e-14));
}

TEST_CASE("gradients above the ceiling are jointly rescaled") {
  trainer::TrainConfig cfg;
  cfg.clip_norm = 1.0;
  ad::Bindings pa, pb;
  pa["p"] = Array::from({2}, {0.5, 0.5});
  pb["p"] = Array::from({2}, {0.5, 0.5});

  // raw gradient of norm 5 against the same gradient pre-scaled to norm 1:
  // the clipped update must match the pre-scaled one bitwise
  std::map<std::string, Array> raw, scaled;
  raw["p"] = Array::from({2}, {3.0, 4.0});
  scaled["p"] = Array::from({2}, {3.0 / 5.0, 4.0 / 5.0});
  trainer::AdamW oa({"p"}, cfg), ob({"p"}, cfg);
  oa.step(pa, raw);
  ob.step(pb, scaled);
  CHECK(bitwise_equal(pa["p"], pb["p"]));

  // below the ceiling nothing is rescaled: same update from both optimizers
  ad::Bindings pc, pd;
  pc["p"] = Array::from({2}, {0.5, 0.5});
  pd["p"] = Array::from({2}, {0.5, 0.5});
  std::map<std::string, Array> small;
  small["p"] = Array::from({2}, {0.3, 0.4});
  trainer::AdamW oc({"p"}, cfg), od({"p"}, cfg);
  oc.step(pc, small);
  cfg.clip_norm = 100.0;
  od.step(pd, small);
  CHECK(bitwise_equal(pc["p"], pd["p"]));
}

TEST_CASE("only listed parameters are updated") {
  trainer::TrainConfig cfg;
  trainer::AdamW opt({"a"}, cfg);
  ad::Bindings params;
  params["a"] = Array::from({1}, {1.0});
  params["z"] = Array::from({1}, {1.0});
  std::map<std::string, Array> grads;
  grads["a"] = Array::from({1}, {0.5});
  grads["z"] = Array::from({1}, {0.5});  // gradient for an unlisted parameter
  opt.step(params, grads);
  CHECK(params["z"].data[0] == 1.0);
  CHECK(params["a"].data[0] != 1.0);

  // a listed parameter with no gradient entry still undergoes weight decay
  trainer::AdamW opt2({"a", "b"}, cfg);
  params["a"] = Array::from({1}, {1.0});
  params["b"] = Array::from({1}, {2.0});
  opt2.step(params, grads);
  CHECK(params["b"].data[0] == doctest::Approx(2.0 * (1.0 - cfg.lr * cfg.weight_decay))
                                   .epsilon(1e-15));

  // a listed parameter missing from the bindings is an error
  trainer::AdamW opt3({"a", "missing"}, cfg);
  CHECK_THROWS_AS(opt3.step(params, grads), std::runtime_error);

  trainer::TrainConfig bad;
  bad.lr = 0.0;
  CHECK_THROWS_AS(trainer::AdamW({"a"}, bad), std::runtime_error);
}

TEST_CASE("build_corpus is deterministic and per-scene distinct") {
  streams::StreamConfig scfg;
  scfg.h = scfg.w = 8;
  scfg.d_img = scfg.d_pts = 4;
  scfg.n_objects = 2;
  const trainer::Corpus a = trainer::build_corpus(scfg, 3, 2, 6, 7);
  const trainer::Corpus b = trainer::build_corpus(scfg, 3, 2, 6, 7);
  REQUIRE(a.train.size() == 3);
  REQUIRE(a.val.size() == 2);
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].T == 6);
    streams::FrameCache ca(scfg, a.train[i]), cb(scfg, b.train[i]);
    CHECK(bitwise_equal(ca.feature(0, streams::Modality::Img).data,
                        cb.feature(0, streams::Modality::Img).data));
  }
  // train/val draw from different tag streams, scenes differ across indexes
  streams::FrameCache t0(scfg, a.train[0]), t1(scfg, a.train[1]),
      v0(scfg, a.val[0]);
  CHECK_FALSE(bitwise_equal(t0.feature(0, streams::Modality::Img).data,
                            t1.feature(0, streams::Modality::Img).data));
  CHECK_FALSE(bitwise_equal(t0.feature(0, streams::Modality::Img).data,
                            v0.feature(0, streams::Modality::Img).data));
}

TEST_CASE("three-stage pipeline on a micro corpus") {
  MicroSetup s;
  const trainer::Corpus corpus =
      trainer::build_corpus(s.scfg, 2, 1, s.scfg.frames, 5);

  const trainer::StageResult s0 =
      trainer::pretrain_detector(s.scfg, s.dcfg, s.tcfg, corpus);
  CHECK(s0.epoch_losses.size() == 2);
  for (double l : s0.epoch_losses) CHECK(std::isfinite(l));
  CHECK(s0.val_metrics.count("val_f1") == 1);
  CHECK(s0.params.count("det.cls.weight") == 1);

  const trainer::StageResult s1 =
      trainer::train_stage1(s.scfg, s.icfg, s.pcfg, s.dcfg, s.tcfg, corpus,
                            s0.params);
  CHECK(s1.epoch_losses.size() == 2);
  for (double l : s1.epoch_losses) CHECK(std::isfinite(l));
  CHECK(s1.val_metrics.count("val_mse_img") == 1);
  CHECK(s1.val_metrics.count("val_mse_pts") == 1);
  // the frozen detector came through bitwise untouched
  for (const auto& [name, a] : s0.params)
    CHECK(bitwise_equal(a, s1.params.at(name)));
  // and both predictors actually moved
  CHECK(s1.params.count("hfp.img.query") == 1);
  CHECK_FALSE(bitwise_equal(s1.params.at("hfp.img.l1.value.weight"),
                            hfp::init_params(s.icfg, streams::Modality::Img,
                                             s.tcfg.seed)
                                .at("hfp.img.l1.value.weight")));

  const trainer::StageResult s2 = trainer::train_stage2(
      s.scfg, s.icfg, s.pcfg, s.ucfg, s.dcfg, s.tcfg, corpus, s1.params);
  CHECK(s2.epoch_losses.size() == 2);
  for (double l : s2.epoch_losses) CHECK(std::isfinite(l));
  CHECK(s2.val_metrics.count("val_mse_enh_img") == 1);
  CHECK(s2.val_metrics.count("val_mse_enh_pts") == 1);
  // stage 2 trains only the fusion stack: detector and predictors frozen
  for (const auto& [name, a] : s1.params)
    CHECK(bitwise_equal(a, s2.params.at(name)));
  CHECK(s2.params.count("ucf.img.var.l1.weight") == 1);
  CHECK_FALSE(bitwise_equal(s2.params.at("ucf.img.fuse.value.weight"),
                            ucf::init_params(s.ucfg, streams::Modality::Img,
                                             s.tcfg.seed)
                                .at("ucf.img.fuse.value.weight")));

  // the whole pipeline is bit-reproducible from the same seed
  const trainer::StageResult r0 =
      trainer::pretrain_detector(s.scfg, s.dcfg, s.tcfg, corpus);
  const trainer::StageResult r1 = trainer::train_stage1(
      s.scfg, s.icfg, s.pcfg, s.dcfg, s.tcfg, corpus, r0.params);
  const trainer::StageResult r2 = trainer::train_stage2(
      s.scfg, s.icfg, s.pcfg, s.ucfg, s.dcfg, s.tcfg, corpus, r1.params);
  REQUIRE(r2.params.size() == s2.params.size());
  for (const auto& [name, a] : s2.params)
    CHECK(bitwise_equal(a, r2.params.at(name)));
  CHECK(r2.epoch_losses == s2.epoch_losses);
}

TEST_CASE("pretrain aborts when validation F1 stays under the floor") {
  MicroSetup s;
  s.tcfg.pretrain_epochs = 1;
  s.tcfg.samples_per_stream = 1;
  s.tcfg.pretrain_abort_f1 = 0.99;  // unreachable after a single tiny epoch
  const trainer::Corpus corpus =
      trainer::build_corpus(s.scfg, 2, 1, s.scfg.frames, 5);
  CHECK_THROWS_AS(trainer::pretrain_detector(s.scfg, s.dcfg, s.tcfg, corpus),
                  std::runtime_error);

  CHECK_THROWS_AS(
      trainer::pretrain_detector(s.scfg, s.dcfg, s.tcfg, trainer::Corpus{}),
      std::runtime_error);
}

TEST_CASE("write_manifest emits the run record verbatim") {
  trainer::StageResult res;
  res.epoch_losses = {0.5, 0.25};
  res.val_metrics["val_f1"] = 0.75;
  const auto dir = std::filesystem::temp_directory_path() / "mp_manifest_test";
  std::filesystem::remove_all(dir);
  const std::string path = (dir / "stage0.json").string();
  trainer::write_manifest(path, "stage0", {{"lr", "0.0002"}, {"seed", "42"}},
                          res, "ckpt/stage0", {{"corpus", "abc123"}});

  std::ifstream f(path);
  REQUIRE(f.good());
  nlohmann::json j;
  f >> j;
  CHECK(j["stage"] == "stage0");
  CHECK(j["config"]["lr"] == "0.0002");
  CHECK(j["config"]["seed"] == "42");
  CHECK(j["epoch_losses"].size() == 2);
  CHECK(j["epoch_losses"][0].get<double>() == 0.5);
  CHECK(j["val_metrics"]["val_f1"].get<double>() == 0.75);
  CHECK(j["checkpoint"] == "ckpt/stage0");
  CHECK(j["inputs"]["corpus"] == "abc123");

  // byte-identical on rewrite: manifests participate in the repro contract
  std::stringstream first;
  first << std::ifstream(path).rdbuf();
  trainer::write_manifest(path, "stage0", {{"lr", "0.0002"}, {"seed", "42"}},
                          res, "ckpt/stage0", {{"corpus", "abc123"}});
  std::stringstream second;
  second << std::ifstream(path).rdbuf();
  CHECK(first.str() == second.str());
  std::filesystem::remove_all(dir);
}
