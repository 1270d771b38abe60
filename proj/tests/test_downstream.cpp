#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "least/downstream.hpp"
#include "least/error.hpp"
#include "least/model.hpp"
#include "least/ops.hpp"
#include "least/rng.hpp"
#include "least/train.hpp"

using namespace least;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool req = false) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.normal() * scale;
  return Tensor::from(shape, std::move(v), req);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  }
  return m;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("least_downstream_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

// Gaussian bump helper for activation traces.
void add_bump(std::vector<double>& a, int64_t center, double height, double sigma) {
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(static_cast<int64_t>(i) - center);
    a[i] = std::max(a[i], height * std::exp(-d * d / (2.0 * sigma * sigma)));
  }
}

}  // namespace

TEST_CASE("task names map both ways") {
  CHECK(task_name(TaskKind::kClassification) == "classification");
  CHECK(task_name(TaskKind::kSegmentation) == "segmentation");
  CHECK(task_name(TaskKind::kSurvival) == "forecasting");
  CHECK(task_from_name("classification") == TaskKind::kClassification);
  CHECK(task_from_name("segmentation") == TaskKind::kSegmentation);
  CHECK(task_from_name("forecasting") == TaskKind::kSurvival);
  CHECK_THROWS_AS(task_from_name("regression"), ConfigError);
}

TEST_CASE("head parameter counts follow the linear arithmetic") {
  TaskHead cls = make_head(TaskKind::kClassification, 256, 2, 1, 1);
  CHECK(cls.parameter_count() == 514);  // 2*256 weights + 2 biases
  CHECK(cls.parameters().size() == 2);

  TaskHead seg = make_head(TaskKind::kSegmentation, 8, 1, 4, 1);
  CHECK(seg.parameter_count() == 8 + 1 + 4 + 1);
  CHECK(seg.parameters().size() == 4);

  TaskHead sur = make_head(TaskKind::kSurvival, 16, 1, 1, 1);
  CHECK(sur.parameter_count() == 17);

  CHECK_THROWS_AS(make_head(TaskKind::kClassification, 0, 2, 1, 1), ConfigError);
  CHECK_THROWS_AS(make_head(TaskKind::kClassification, 8, 0, 1, 1), ConfigError);
  CHECK_THROWS_AS(make_head(TaskKind::kSegmentation, 8, 1, 0, 1), ConfigError);
}

TEST_CASE("pooling reduces patches per sample") {
  Tensor tokens = Tensor::from({4, 3}, {1, 2, 3, 3, 4, 5, -1, 0, 1, 5, -2, 0});
  Tensor mean = pool_tokens(tokens, 2, PoolKind::kMean);
  REQUIRE(mean.shape() == Shape{2, 3});
  CHECK(mean.data() == std::vector<double>{2, 3, 4, 2, -1, 0.5});
  Tensor mx = pool_tokens(tokens, 2, PoolKind::kMax);
  CHECK(mx.data() == std::vector<double>{3, 4, 5, 5, 0, 1});

  // one patch per sample: pooling is the identity
  Tensor single = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor pooled = pool_tokens(single, 2, PoolKind::kMean);
  CHECK(pooled.data() == single.data());

  CHECK_THROWS_AS(pool_tokens(tokens, 3, PoolKind::kMean), DimensionError);
}

TEST_CASE("zero classifier head gives zero logits, half probabilities") {
  TaskHead head = make_head(TaskKind::kClassification, 6, 3, 1, 9);
  std::fill(head.w.raw_data().begin(), head.w.raw_data().end(), 0.0);
  Rng rng(4);
  Tensor tokens = random_tensor({10, 6}, rng);
  Tensor logits = classify_logits(tokens, 2, head);
  REQUIRE(logits.shape() == Shape{2, 3});
  for (double v : logits.data()) CHECK(v == 0.0);
  Tensor probs = sigmoid(logits);
  for (double v : probs.data()) CHECK(v == 0.5);
}

TEST_CASE("classification is invariant to patch order under mean pooling") {
  Rng rng(11);
  TaskHead head = make_head(TaskKind::kClassification, 6, 2, 1, 3);
  Tensor tokens = random_tensor({5, 6}, rng);
  Tensor shuffled = gather_rows(tokens, {4, 2, 0, 3, 1});
  Tensor a = classify_logits(tokens, 1, head);
  Tensor b = classify_logits(shuffled, 1, head);
  CHECK(max_abs_diff(a, b) < 1e-12);

  TaskHead wrong = make_head(TaskKind::kSegmentation, 6, 1, 2, 3);
  CHECK_THROWS_AS(classify_logits(tokens, 1, wrong), UsageError);
  TaskHead narrow = make_head(TaskKind::kClassification, 4, 2, 1, 3);
  CHECK_THROWS_AS(classify_logits(tokens, 1, narrow), DimensionError);
}

TEST_CASE("segmentation head upsamples patch logits to sample rate") {
  Rng rng(5);
  TaskHead head = make_head(TaskKind::kSegmentation, 6, 1, 8, 21);
  Tensor tokens = random_tensor({2 * 5, 6}, rng);
  Tensor logits = segment_logits(tokens, 2, head);
  REQUIRE(logits.shape() == Shape{2, 40});
  Tensor act = segment_activation(tokens, 2, head);
  REQUIRE(act.shape() == Shape{2, 40});
  for (double v : act.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("segmentation training gradient matches finite differences") {
  LeastModel m(ModelConfig::miniature(), 7);
  TaskHead head = make_head(TaskKind::kSegmentation, m.config().embed_dim, 1,
                            m.config().patch_span(), 11);
  Rng rng(3);
  Tensor x = random_tensor({1, m.config().lead_count, m.config().input_len}, rng);
  std::vector<double> target_row =
      segmentation_target({5, 20}, m.config().input_len);
  Tensor target = Tensor::from({1, m.config().input_len}, target_row);

  auto loss_value = [&]() {
    Tensor tokens = encode_all(m, x);
    return bce_with_logits(segment_logits(tokens, 1, head), target).item();
  };

  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor tokens = encode_all(m, x);
    Tensor loss = bce_with_logits(segment_logits(tokens, 1, head), target);
    tape.backward(loss);
  }

  const double eps = 1e-5;
  double worst = 0.0;
  auto sweep = [&](Tensor& t) {
    std::vector<double> analytic =
        t.has_grad() ? t.impl()->grad : std::vector<double>(t.data().size(), 0.0);
    for (size_t i = 0; i < t.raw_data().size(); ++i) {
      const double keep = t.raw_data()[i];
      t.raw_data()[i] = keep + eps;
      const double fp = loss_value();
      t.raw_data()[i] = keep - eps;
      const double fm = loss_value();
      t.raw_data()[i] = keep;
      const double fd = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(fd)));
    }
  };
  for (auto& np : m.parameters()) sweep(np.second);
  for (auto np : head.parameters()) sweep(np.second);
  CHECK(worst < 1e-4);
}

TEST_CASE("zero survival head scores every sample zero") {
  TaskHead head = make_head(TaskKind::kSurvival, 6, 1, 1, 2);
  std::fill(head.w.raw_data().begin(), head.w.raw_data().end(), 0.0);
  Rng rng(8);
  Tensor tokens = random_tensor({3 * 4, 6}, rng);
  Tensor risks = survival_risk(tokens, 3, head);
  REQUIRE(risks.shape() == Shape{3});
  for (double v : risks.data()) CHECK(v == 0.0);
}

TEST_CASE("cox loss matches hand-computed partial likelihoods") {
  // one event, zero risks: -log softmax over a 2-element risk set
  Tensor r0 = Tensor::from({2}, {0.0, 0.0});
  CHECK(cox_loss(r0, {1.0, 2.0}, {1, 0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // two events at distinct times: second risk set shrinks to one entry
  CHECK(cox_loss(r0, {1.0, 2.0}, {1, 1}).item() ==
        doctest::Approx(std::log(2.0) / 2.0).epsilon(1e-12));

  // tied event times keep the full risk set for both terms
  CHECK(cox_loss(r0, {1.0, 1.0}, {1, 1}).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // nonzero risks, one event at t=1 over risk set {0,1,2}
  Tensor r1 = Tensor::from({3}, {0.3, -0.2, 1.1});
  const double z = std::exp(0.3) + std::exp(-0.2) + std::exp(1.1);
  CHECK(cox_loss(r1, {1.0, 2.0, 3.0}, {1, 0, 0}).item() ==
        doctest::Approx(-(0.3 - std::log(z))).epsilon(1e-12));

  CHECK_THROWS_AS(cox_loss(r0, {1.0, 2.0}, {0, 0}), EvalError);
  CHECK_THROWS_AS(cox_loss(r0, {1.0}, {1}), DimensionError);
}

TEST_CASE("cox loss is shift invariant and matches finite differences") {
  Rng rng(17);
  std::vector<double> times = {5.0, 2.0, 8.0, 3.0};
  std::vector<int> events = {1, 0, 1, 1};

  Tensor risks = random_tensor({4}, rng);
  Tensor shifted = add_scalar(risks, 3.7);
  CHECK(cox_loss(risks, times, events).item() ==
        doctest::Approx(cox_loss(shifted, times, events).item()).epsilon(1e-9));

  Tensor probe = random_tensor({4}, rng, 0.5, true);
  const double err = grad_check(
      [&](const Tensor& r) { return cox_loss(r, times, events); }, probe);
  CHECK(err < 1e-4);
}

TEST_CASE("cox loss decreases monotonically on a separable toy") {
  // feature perfectly ranks hazard: higher x, earlier event
  std::vector<double> xs = {4, 3.5, 3, 2.5, 2, 1.5, 1, 0.5};
  std::vector<double> times = {1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<int> events(8, 1);
  Tensor feats = Tensor::from({8, 1}, xs);
  Tensor w = Tensor::from({1, 1}, {0.0}, true);
  Tensor b = Tensor::from({1}, {0.0}, true);

  OptimConfig oc;
  oc.lr = 0.01;
  oc.weight_decay = 0.0;
  AdamW opt({{"w", w}, {"b", b}}, oc);

  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor risks = reshape(linear(feats, w, b), {8});
    Tensor loss = cox_loss(risks, times, events);
    CHECK(loss.item() < prev);
    prev = loss.item();
    tape.backward(loss);
    opt.step();
    opt.zero_grad();
  }
  // zero-risk start is log(8!)/8, roughly 1.33; require visible progress
  CHECK(prev < 1.0);
}

TEST_CASE("breslow baseline and survival probabilities") {
  // all risks zero: hazard increments are deaths / (risk set size)
  BaselineHazard base = breslow_baseline({1.0, 2.0, 3.0}, {1, 1, 0}, {0.0, 0.0, 0.0});
  REQUIRE(base.event_times == std::vector<double>{1.0, 2.0});
  REQUIRE(base.cum_hazard.size() == 2);
  CHECK(base.cum_hazard[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(base.cum_hazard[1] == doctest::Approx(1.0 / 3.0 + 1.0 / 2.0).epsilon(1e-12));
  CHECK(base.last_follow_up == 3.0);

  bool clamped = false;
  CHECK(survival_probability(0.0, base, 0.5, &clamped) == 1.0);
  CHECK_FALSE(clamped);
  CHECK(survival_probability(0.0, base, 1.0, &clamped) ==
        doctest::Approx(std::exp(-1.0 / 3.0)).epsilon(1e-12));
  CHECK(survival_probability(0.0, base, 2.5, &clamped) ==
        doctest::Approx(std::exp(-5.0 / 6.0)).epsilon(1e-12));
  CHECK_FALSE(clamped);

  // beyond follow-up: clamp to the last step and report it
  const double far = survival_probability(0.0, base, 10.0, &clamped);
  CHECK(clamped);
  CHECK(far == doctest::Approx(std::exp(-5.0 / 6.0)).epsilon(1e-12));

  // risk scales the exponent: S(t|r) = S0(t)^exp(r)
  CHECK(survival_probability(std::log(2.0), base, 1.0, nullptr) ==
        doctest::Approx(std::exp(-2.0 / 3.0)).epsilon(1e-12));

  // monotone non-increasing in the horizon; extreme risk drives S to 0
  double last = 1.0;
  for (double t = 0.0; t <= 3.0; t += 0.25) {
    const double s = survival_probability(0.3, base, t, nullptr);
    CHECK(s <= last + 1e-15);
    last = s;
  }
  CHECK(survival_probability(40.0, base, 1.0, nullptr) < 1e-12);

  CHECK_THROWS_AS(breslow_baseline({}, {}, {}), EvalError);
  CHECK_THROWS_AS(breslow_baseline({1.0}, {1, 0}, {0.0}), DimensionError);
}

TEST_CASE("r-peak detection finds a single clean bump") {
  std::vector<double> a(1000, 0.0);
  add_bump(a, 500, 1.0, 20.0);
  RPeakPostConfig cfg;
  CHECK(detect_rpeaks(a, 500.0, cfg) == std::vector<int64_t>{500});

  // flat activation has no range, so no peaks
  std::vector<double> flat(1000, 0.3);
  CHECK(detect_rpeaks(flat, 500.0, cfg).empty());
}

TEST_CASE("refractory suppression keeps the higher then earlier peak") {
  // 10 samples apart at 100 Hz = 100 ms, inside the 200 ms refractory window
  std::vector<double> a(600, 0.0);
  add_bump(a, 300, 1.0, 2.0);
  add_bump(a, 310, 0.8, 2.0);
  RPeakPostConfig cfg;
  CHECK(detect_rpeaks(a, 100.0, cfg) == std::vector<int64_t>{300});

  // equal heights: the earlier index wins
  std::vector<double> b(600, 0.0);
  add_bump(b, 300, 1.0, 2.0);
  add_bump(b, 310, 1.0, 2.0);
  CHECK(detect_rpeaks(b, 100.0, cfg) == std::vector<int64_t>{300});
}

TEST_CASE("twin sub-peaks inside one QRS collapse to their midpoint") {
  std::vector<double> a(1000, 0.0);
  a[497] = 0.5;
  a[498] = 1.0;
  a[499] = 0.5;
  a[501] = 0.5;
  a[502] = 1.0;
  a[503] = 0.5;
  RPeakPostConfig cfg;
  CHECK(detect_rpeaks(a, 500.0, cfg) == std::vector<int64_t>{500});
}

TEST_CASE("well separated beats all survive in order") {
  std::vector<double> a(1000, 0.0);
  add_bump(a, 100, 0.9, 3.0);
  add_bump(a, 400, 1.0, 3.0);
  add_bump(a, 700, 0.8, 3.0);
  RPeakPostConfig cfg;
  auto peaks = detect_rpeaks(a, 100.0, cfg);
  CHECK(peaks == std::vector<int64_t>{100, 400, 700});
  for (size_t i = 0; i + 1 < peaks.size(); ++i) CHECK(peaks[i] < peaks[i + 1]);
}

TEST_CASE("literal between-candidates mode midpoints consecutive beats") {
  std::vector<double> a(400, 0.0);
  add_bump(a, 100, 1.0, 3.0);
  add_bump(a, 200, 1.0, 3.0);
  add_bump(a, 301, 1.0, 3.0);
  RPeakPostConfig cfg;
  cfg.literal_between_candidates = true;
  CHECK(detect_rpeaks(a, 100.0, cfg) == std::vector<int64_t>{150, 251});

  std::vector<double> lone(400, 0.0);
  add_bump(lone, 100, 1.0, 3.0);
  CHECK(detect_rpeaks(lone, 100.0, cfg).empty());
}

TEST_CASE("r-peak post config rejects inconsistent windows") {
  RPeakPostConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.refractory_ms = 100.0;  // must exceed max_qrs_ms
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RPeakPostConfig{};
  cfg.max_qrs_ms = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = RPeakPostConfig{};
  cfg.min_prominence = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("segmentation targets dilate each peak by two samples") {
  auto t = segmentation_target({10}, 20);
  for (int64_t i = 0; i < 20; ++i) CHECK(t[static_cast<size_t>(i)] == (i >= 8 && i <= 12 ? 1.0 : 0.0));

  auto lo = segmentation_target({1}, 6);
  CHECK(lo == std::vector<double>{1, 1, 1, 1, 0, 0});
  auto hi = segmentation_target({5}, 6);
  CHECK(hi == std::vector<double>{0, 0, 0, 1, 1, 1});
  auto none = segmentation_target({}, 4);
  CHECK(none == std::vector<double>{0, 0, 0, 0});
}

TEST_CASE("heads survive a save/load round trip") {
  TempDir tmp;
  TaskHead head = make_head(TaskKind::kSegmentation, 8, 1, 4, 33, PoolKind::kMax);
  const std::string stem = (tmp.path / "head").string();
  save_head(head, stem);
  TaskHead back = load_head(stem);
  CHECK(back.kind == head.kind);
  CHECK(back.pool == head.pool);
  CHECK(back.embed_dim == head.embed_dim);
  CHECK(back.label_count == head.label_count);
  CHECK(back.upsample == head.upsample);
  auto a = head.parameters();
  auto b = back.parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.data() == b[i].second.data());
  }

  // truncated blob must be rejected
  std::filesystem::resize_file(stem + ".bin", 8);
  CHECK_THROWS_AS(load_head(stem), IoError);
  CHECK_THROWS_AS(load_head((tmp.path / "missing").string()), IoError);
}
