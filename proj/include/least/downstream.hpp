#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "least/ops.hpp"
#include "least/tensor.hpp"

namespace least {

enum class TaskKind { kClassification, kSegmentation, kSurvival };
enum class PoolKind { kMean, kMax };

std::string task_name(TaskKind kind);
TaskKind task_from_name(const std::string& name);

// Linear task head over pooled patch embeddings. Segmentation adds a learned
// transposed-convolution upsampler from per-patch logits to sample rate.
struct TaskHead {
  TaskKind kind = TaskKind::kClassification;
  PoolKind pool = PoolKind::kMean;
  int64_t embed_dim = 0;
  int64_t label_count = 1;
  int64_t upsample = 1;
  Tensor w, b;
  Tensor up_w, up_b;  // segmentation only

  std::vector<std::pair<std::string, Tensor>> parameters() const;
  int64_t parameter_count() const;
};

TaskHead make_head(TaskKind kind, int64_t embed_dim, int64_t label_count, int64_t upsample,
                   uint64_t seed, PoolKind pool = PoolKind::kMean);

void save_head(const TaskHead& head, const std::string& stem);
TaskHead load_head(const std::string& stem);

// tokens are stacked [B*n x C]; returns pooled [B x C].
Tensor pool_tokens(const Tensor& tokens, int64_t batch, PoolKind pool);

Tensor classify_logits(const Tensor& tokens, int64_t batch, const TaskHead& head);  // [B x K]

// Per-patch scalar logits upsampled by the learned transposed convolution to
// [B x T] (T = n * upsample); activation applies the sigmoid.
Tensor segment_logits(const Tensor& tokens, int64_t batch, const TaskHead& head);
Tensor segment_activation(const Tensor& tokens, int64_t batch, const TaskHead& head);

Tensor survival_risk(const Tensor& tokens, int64_t batch, const TaskHead& head);  // [B]

// Negative Cox partial log-likelihood, Breslow tie handling, averaged over
// events. Shift-invariant in the risks.
Tensor cox_loss(const Tensor& risks, const std::vector<double>& times,
                const std::vector<int>& events);

struct BaselineHazard {
  std::vector<double> event_times;  // ascending unique event times
  std::vector<double> cum_hazard;   // Breslow cumulative hazard at each time
  double last_follow_up = 0.0;
};

BaselineHazard breslow_baseline(const std::vector<double>& times, const std::vector<int>& events,
                                const std::vector<double>& risks);

// S(t|x) = S0(t)^exp(risk). Horizons past follow-up clamp to the last step;
// *clamped reports that (caller decides how to warn).
double survival_probability(double risk, const BaselineHazard& baseline, double horizon,
                            bool* clamped = nullptr);

struct RPeakPostConfig {
  double min_prominence = 0.1;  // fraction of activation range
  double refractory_ms = 200.0;
  double max_qrs_ms = 120.0;
  double match_window_ms = 75.0;
  bool literal_between_candidates = false;
  void validate() const;
};

// Prominent local maxima -> refractory suppression (higher wins, ties to the
// earlier index) -> QRS-width clustering replaced by the extreme-pair
// midpoint, rounded half up. Returns sorted sample indices.
std::vector<int64_t> detect_rpeaks(const std::vector<double>& activation, double rate_hz,
                                   const RPeakPostConfig& cfg);

// Binary per-timestep mask, 1 within +-dilate samples of each peak.
std::vector<double> segmentation_target(const std::vector<int64_t>& r_peaks, int64_t total,
                                        int64_t dilate = 2);

}  // namespace least
