#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "least/dataio.hpp"
#include "least/error.hpp"
#include "least/model.hpp"
#include "least/rng.hpp"
#include "least/train.hpp"

using namespace least;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("least_train_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Small in-memory dataset at gradient-check scale: smooth waves, alternating
// labels, two r-peaks each, alternating survival events.
Dataset toy_dataset(int64_t count, uint64_t seed, int64_t leads = 2, int64_t len = 32) {
  Dataset ds;
  ds.manifest.label_names = {"slow", "fast"};
  Rng rng(seed);
  std::vector<std::string> ids;
  for (int64_t i = 0; i < count; ++i) {
    SignalRecord r;
    r.id = "rec" + std::to_string(i);
    r.lead_count = leads;
    r.sample_count = len;
    r.sampling_rate_hz = 64.0;
    const double freq = (i % 2 == 0) ? 2.0 : 5.0;
    r.leads.resize(static_cast<size_t>(leads * len));
    for (int64_t l = 0; l < leads; ++l) {
      const double phase = rng.uniform() * 6.28;
      for (int64_t t = 0; t < len; ++t) {
        r.at(l, t) = std::sin(freq * t * 0.2 + phase) + 0.05 * rng.normal();
      }
    }
    r.label_vector = (i % 2 == 0) ? std::vector<int>{1, 0} : std::vector<int>{0, 1};
    r.r_peaks = std::vector<int64_t>{8, 24};
    r.survival = Survival{static_cast<double>(10 + i), i % 2 == 0};

    ManifestRecord m;
    m.id = r.id;
    m.lead_count = leads;
    m.sample_count = len;
    m.sampling_rate_hz = 64.0;
    ds.manifest.records.push_back(m);
    ds.records.push_back(std::move(r));
    ids.push_back("rec" + std::to_string(i));
  }
  ds.manifest.split["train"] = ids;
  return ds;
}

}  // namespace

TEST_CASE("learning rate schedule warms up then follows a cosine") {
  ScheduleConfig s;
  s.base_lr = 0.001;
  s.warmup_epochs = 10.0;
  s.total_epochs = 50.0;
  s.min_lr = 0.0;

  CHECK(lr_at(0.0, s) == 0.0);
  CHECK(lr_at(5.0, s) == doctest::Approx(0.0005).epsilon(1e-12));
  CHECK(lr_at(10.0, s) == doctest::Approx(0.001).epsilon(1e-12));
  CHECK(lr_at(30.0, s) == doctest::Approx(0.0005).epsilon(1e-12));  // cosine midpoint
  CHECK(lr_at(50.0, s) == doctest::Approx(0.0).epsilon(1e-15));
  // out-of-range fractions clamp to the schedule ends
  CHECK(lr_at(-3.0, s) == 0.0);
  CHECK(lr_at(80.0, s) == doctest::Approx(0.0).epsilon(1e-15));

  s.min_lr = 1e-5;
  CHECK(lr_at(50.0, s) == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(lr_at(10.0, s) == doctest::Approx(0.001).epsilon(1e-12));

  ScheduleConfig bad = s;
  bad.warmup_epochs = 60.0;
  CHECK_THROWS_AS(lr_at(0.0, bad), ConfigError);
  bad = s;
  bad.min_lr = 0.01;  // above base
  CHECK_THROWS_AS(lr_at(0.0, bad), ConfigError);
}

TEST_CASE("adamw handles zero gradients and decoupled decay") {
  Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5});
  const std::vector<double> before = p.data();

  OptimConfig plain;
  plain.weight_decay = 0.0;
  {
    AdamW opt({{"p", p}}, plain);
    p.raw_grad().assign(3, 0.0);
    opt.step();
    CHECK(p.data() == before);
  }

  OptimConfig decay;
  decay.lr = 0.001;
  decay.weight_decay = 0.05;
  {
    AdamW opt({{"p", p}}, decay);
    p.raw_grad().assign(3, 0.0);
    opt.step();
    for (size_t i = 0; i < 3; ++i) {
      CHECK(p.data()[i] == doctest::Approx(before[i] * (1.0 - 5e-5)).epsilon(1e-14));
    }
  }
}

TEST_CASE("adamw first step with unit gradient moves by about minus lr") {
  Tensor p = Tensor::from({1}, {0.7});
  OptimConfig oc;
  oc.lr = 0.01;
  oc.weight_decay = 0.0;
  AdamW opt({{"p", p}}, oc);
  p.raw_grad().assign(1, 1.0);
  opt.step();
  // bias correction makes m_hat = 1 and v_hat = 1, so the step is lr/(1+eps)
  CHECK(std::fabs(p.data()[0] - (0.7 - 0.01)) < 1e-9);
}

TEST_CASE("adamw skips parameters without a materialized gradient") {
  Tensor touched = Tensor::from({1}, {1.0});
  Tensor frozen = Tensor::from({1}, {1.0});
  OptimConfig oc;
  oc.weight_decay = 0.05;  // decay must not leak onto skipped parameters
  AdamW opt({{"a", touched}, {"b", frozen}}, oc);
  touched.raw_grad().assign(1, 0.5);
  opt.step();
  CHECK(touched.data()[0] != 1.0);
  CHECK(frozen.data()[0] == 1.0);
  CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("adamw aborts on non-finite gradients naming the parameter") {
  Tensor a = Tensor::from({1}, {0.0});
  Tensor b = Tensor::from({1}, {0.0});
  AdamW opt({{"fine", a}, {"broken", b}}, OptimConfig{});
  a.raw_grad().assign(1, 1.0);
  b.raw_grad().assign(1, std::numeric_limits<double>::quiet_NaN());
  try {
    opt.step();
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("broken") != std::string::npos);
  }
}

TEST_CASE("adamw matches a scalar re-derivation for five steps") {
  OptimConfig oc;
  oc.lr = 0.01;
  oc.weight_decay = 0.05;

  Tensor p0 = Tensor::from({1}, {0.5});
  Tensor p1 = Tensor::from({1}, {-0.3});
  Tensor p2 = Tensor::from({1}, {1.2});
  AdamW opt({{"p0", p0}, {"p1", p1}, {"p2", p2}}, oc);

  double ref[3] = {0.5, -0.3, 1.2};
  double m[3] = {0, 0, 0}, v[3] = {0, 0, 0};

  for (int step = 1; step <= 5; ++step) {
    const double g[3] = {std::sin(step * 1.0), 0.5 * std::cos(step * 1.0),
                         0.3 * (step - 2.0)};
    p0.raw_grad().assign(1, g[0]);
    p1.raw_grad().assign(1, g[1]);
    p2.raw_grad().assign(1, g[2]);
    opt.step();

    const double bc1 = 1.0 - std::pow(oc.beta1, step);
    const double bc2 = 1.0 - std::pow(oc.beta2, step);
    for (int k = 0; k < 3; ++k) {
      m[k] = oc.beta1 * m[k] + (1.0 - oc.beta1) * g[k];
      v[k] = oc.beta2 * v[k] + (1.0 - oc.beta2) * g[k] * g[k];
      ref[k] -= oc.lr * ((m[k] / bc1) / (std::sqrt(v[k] / bc2) + oc.eps) +
                         oc.weight_decay * ref[k]);
    }
    opt.zero_grad();
  }
  CHECK(std::fabs(p0.data()[0] - ref[0]) < 1e-12);
  CHECK(std::fabs(p1.data()[0] - ref[1]) < 1e-12);
  CHECK(std::fabs(p2.data()[0] - ref[2]) < 1e-12);
}

TEST_CASE("global norm clipping rescales large gradients") {
  Tensor p = Tensor::from({2}, {1.0, 1.0});
  OptimConfig oc;
  oc.lr = 0.1;
  oc.weight_decay = 0.0;
  oc.clip_norm = 1.0;
  AdamW opt({{"p", p}}, oc);
  p.raw_grad() = {3.0, 4.0};  // norm 5 scales down to 1
  opt.step();

  double ref[2] = {1.0, 1.0};
  const double g[2] = {0.6, 0.8};
  for (int k = 0; k < 2; ++k) {
    const double m = (1.0 - oc.beta1) * g[k];
    const double v = (1.0 - oc.beta2) * g[k] * g[k];
    ref[k] -= oc.lr * (m / (1.0 - oc.beta1)) /
              (std::sqrt(v / (1.0 - oc.beta2)) + oc.eps);
    CHECK(std::fabs(p.data()[k] - ref[k]) < 1e-15);
  }

  // under the threshold nothing changes
  Tensor q = Tensor::from({1}, {0.0});
  AdamW opt2({{"q", q}}, oc);
  q.raw_grad() = {0.5};
  opt2.step();
  CHECK(q.data()[0] == doctest::Approx(-oc.lr * 0.5 / (0.5 + oc.eps)).epsilon(1e-9));
}

TEST_CASE("pretraining writes a deterministic trace and checkpoints") {
  TempDir tmp;
  Dataset ds = toy_dataset(4, 100);
  ModelConfig mc = ModelConfig::miniature();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.epochs = 2;
  tc.schedule = {0.001, 1.0, 2.0, 0.0};
  tc.checkpoint_every = 1;

  PretrainResult a = pretrain(ds, "train", mc, tc, 42, (tmp.path / "a").string());
  REQUIRE(a.trace.size() == 2);
  CHECK(a.trace[0].epoch == 1);
  CHECK(a.trace[1].epoch == 2);
  for (const TraceRow& r : a.trace) {
    CHECK(std::isfinite(r.loss));
    CHECK(std::isfinite(r.loss_ssl));
    CHECK(std::isfinite(r.loss_multi));
    CHECK(r.loss == doctest::Approx(r.loss_ssl + r.loss_multi).epsilon(1e-12));
  }
  CHECK(a.trace[0].lr == 0.0);                                      // warmup start
  CHECK(a.trace[1].lr == doctest::Approx(0.001).epsilon(1e-12));    // warmup end

  for (const char* name :
       {"checkpoint_epoch1", "checkpoint_epoch2", "checkpoint_final"}) {
    CHECK(std::filesystem::exists(tmp.path / "a" / (std::string(name) + ".json")));
    CHECK(std::filesystem::exists(tmp.path / "a" / (std::string(name) + ".bin")));
  }

  const std::string trace_a = slurp(a.trace_path);
  CHECK(trace_a.rfind("epoch,loss,loss_ssl,loss_multi,lr\n", 0) == 0);

  // same seed, same bytes
  PretrainResult b = pretrain(ds, "train", mc, tc, 42, (tmp.path / "b").string());
  CHECK(slurp(b.trace_path) == trace_a);
  CHECK(slurp(tmp.path / "b" / "checkpoint_final.bin") ==
        slurp(tmp.path / "a" / "checkpoint_final.bin"));

  // different seed, different trajectory
  PretrainResult c = pretrain(ds, "train", mc, tc, 43, (tmp.path / "c").string());
  CHECK(c.trace[0].loss != a.trace[0].loss);

  // the final checkpoint loads back
  LeastModel restored = load_checkpoint(a.checkpoint_stem);
  CHECK(restored.config().embed_dim == mc.embed_dim);

  // shape mismatch between dataset and model is rejected
  Dataset wide = toy_dataset(4, 100, 3);
  CHECK_THROWS_AS(pretrain(wide, "train", mc, tc, 42, (tmp.path / "w").string()),
                  ConfigError);
  CHECK_THROWS_AS(pretrain(ds, "nope", mc, tc, 42, (tmp.path / "n").string()),
                  ConfigError);
}

TEST_CASE("pretraining loss drops while overfitting a toy set") {
  TempDir tmp;
  Dataset ds = toy_dataset(4, 7);
  ModelConfig mc = ModelConfig::miniature();
  TrainConfig tc;
  tc.batch_size = 4;
  tc.epochs = 12;
  tc.schedule = {0.002, 2.0, 12.0, 0.0};
  PretrainResult r = pretrain(ds, "train", mc, tc, 1, (tmp.path / "fit").string());
  CHECK(r.trace.back().loss < r.trace.front().loss);
}

TEST_CASE("linear probing leaves every pretrained parameter untouched") {
  TempDir tmp;
  Dataset ds = toy_dataset(6, 50);
  LeastModel model(ModelConfig::miniature(), 5);
  const std::string stem = (tmp.path / "pre").string();
  save_checkpoint(model, stem);

  TrainConfig tc;
  tc.batch_size = 3;
  tc.epochs = 2;
  tc.schedule = {0.01, 0.0, 2.0, 0.0};

  FinetuneResult r = finetune(stem, TaskKind::kClassification, FinetuneMode::kLinearProbe,
                              ds, "train", tc, 9, (tmp.path / "probe").string());
  REQUIRE(r.trace.size() == 2);
  CHECK(slurp(r.trace_path).rfind("epoch,loss,lr\n", 0) == 0);

  LeastModel after = load_checkpoint(r.model_stem);
  const auto& orig = model.parameters();
  const auto& got = after.parameters();
  REQUIRE(orig.size() == got.size());
  for (size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].second.data() == got[i].second.data());
  }
  CHECK(std::filesystem::exists(r.head_stem + ".bin"));
}

TEST_CASE("full finetuning moves encoder parameters") {
  TempDir tmp;
  Dataset ds = toy_dataset(6, 50);
  LeastModel model(ModelConfig::miniature(), 5);
  const std::string stem = (tmp.path / "pre").string();
  save_checkpoint(model, stem);

  TrainConfig tc;
  tc.batch_size = 3;
  tc.epochs = 1;
  tc.schedule = {0.01, 0.0, 1.0, 0.0};

  FinetuneResult r = finetune(stem, TaskKind::kClassification, FinetuneMode::kFull, ds,
                              "train", tc, 9, (tmp.path / "full").string());
  LeastModel after = load_checkpoint(r.model_stem);
  bool any_moved = false;
  const auto& orig = model.parameters();
  const auto& got = after.parameters();
  for (size_t i = 0; i < orig.size() && !any_moved; ++i) {
    if (orig[i].second.data() != got[i].second.data()) any_moved = true;
  }
  CHECK(any_moved);
  CHECK(std::isfinite(r.trace[0].loss));
}

TEST_CASE("finetuning runs the segmentation and survival objectives") {
  TempDir tmp;
  Dataset ds = toy_dataset(6, 51);
  LeastModel model(ModelConfig::miniature(), 6);
  const std::string stem = (tmp.path / "pre").string();
  save_checkpoint(model, stem);

  TrainConfig tc;
  tc.batch_size = 3;
  tc.epochs = 1;
  tc.schedule = {0.005, 0.0, 1.0, 0.0};

  FinetuneResult seg = finetune(stem, TaskKind::kSegmentation, FinetuneMode::kFull, ds,
                                "train", tc, 3, (tmp.path / "seg").string());
  CHECK(std::isfinite(seg.trace[0].loss));
  TaskHead seg_head = load_head(seg.head_stem);
  CHECK(seg_head.upsample == model.config().patch_span());

  FinetuneResult sur = finetune(stem, TaskKind::kSurvival, FinetuneMode::kLinearProbe, ds,
                                "train", tc, 3, (tmp.path / "sur").string());
  CHECK(std::isfinite(sur.trace[0].loss));
  CHECK(sur.skipped_batches == 0);  // every batch of 3 holds at least one event

  // an all-censored split cannot produce a Cox risk set, every batch skips
  Dataset censored = toy_dataset(4, 52);
  for (auto& rec : censored.records) rec.survival = Survival{15.0, false};
  FinetuneResult none = finetune(stem, TaskKind::kSurvival, FinetuneMode::kLinearProbe,
                                 censored, "train", tc, 3, (tmp.path / "cens").string());
  CHECK(none.skipped_batches == 2);
  CHECK(none.trace[0].loss == 0.0);
}

TEST_CASE("finetuning validates labels against the dataset") {
  TempDir tmp;
  Dataset ds = toy_dataset(4, 53);
  ds.manifest.label_names.clear();
  LeastModel model(ModelConfig::miniature(), 6);
  const std::string stem = (tmp.path / "pre").string();
  save_checkpoint(model, stem);

  TrainConfig tc;
  tc.batch_size = 2;
  tc.epochs = 1;
  tc.schedule = {0.005, 0.0, 1.0, 0.0};

  CHECK_THROWS_AS(finetune(stem, TaskKind::kClassification, FinetuneMode::kFull, ds,
                           "train", tc, 3, (tmp.path / "x").string()),
                  ConfigError);

  Dataset unlabeled = toy_dataset(4, 54);
  for (auto& rec : unlabeled.records) rec.label_vector.reset();
  CHECK_THROWS_AS(finetune(stem, TaskKind::kClassification, FinetuneMode::kFull, unlabeled,
                           "train", tc, 3, (tmp.path / "y").string()),
                  ConfigError);
}

TEST_CASE("trace writers format rows with full precision") {
  TempDir tmp;
  std::vector<TraceRow> rows(1);
  rows[0].epoch = 3;
  rows[0].loss = 0.125;
  rows[0].loss_ssl = 0.0625;
  rows[0].loss_multi = 0.0625;
  rows[0].lr = 1e-3;
  const std::string p = (tmp.path / "t.csv").string();
  write_pretrain_trace(p, rows);
  CHECK(slurp(p) == "epoch,loss,loss_ssl,loss_multi,lr\n3,0.125,0.0625,0.0625,0.001\n");
  write_finetune_trace(p, rows);
  CHECK(slurp(p) == "epoch,loss,lr\n3,0.125,0.001\n");
}
