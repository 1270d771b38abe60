#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "least/error.hpp"
#include "least/rng.hpp"

namespace least {

struct Survival {
  double time_days = 0.0;
  bool event = false;
};

// One multi-lead recording. leads is row-major [lead_count x sample_count].
struct SignalRecord {
  std::string id;
  int64_t lead_count = 0;
  int64_t sample_count = 0;
  double sampling_rate_hz = 0.0;
  std::vector<double> leads;
  std::optional<std::vector<int>> label_vector;
  std::optional<std::vector<int64_t>> r_peaks;
  std::optional<Survival> survival;

  double& at(int64_t lead, int64_t t) { return leads[lead * sample_count + t]; }
  double at(int64_t lead, int64_t t) const { return leads[lead * sample_count + t]; }
  void validate() const;
};

struct PipelineConfig {
  double target_hz = 100.0;
  double segment_seconds = 10.0;
  double nan_fraction_limit = 0.05;
  double band_low_hz = 0.5;
  double band_high_hz = 45.0;
  int filter_order = 3;
  void validate() const;
};

const std::vector<std::string>& canonical_lead_names();

// Reorders rows into canonical 12-lead order; source_order names the rows of
// rec as given. Unknown, duplicate, or missing leads are errors.
SignalRecord standardize_leads(const SignalRecord& rec, const std::vector<std::string>& source_order);

// Linear interpolation onto a uniform grid; output length round(T * target / source).
SignalRecord resample(const SignalRecord& rec, double target_hz);

// Non-overlapping windows of round(seconds * rate) samples; remainder dropped,
// too-short records yield an empty list. r_peaks are re-indexed per window.
std::vector<SignalRecord> segment(const SignalRecord& rec, double seconds);

struct SanitizeOutcome {
  bool accepted = false;
  double nonfinite_fraction = 0.0;
  SignalRecord record;  // zeros substituted for non-finite samples when accepted
};

SanitizeOutcome sanitize(const SignalRecord& rec, double limit);

// Digital bandpass from the analog Butterworth prototype: lowpass poles on the
// unit circle, lowpass-to-bandpass substitution, then bilinear transform with
// pre-warped edges. b and a are the expanded real polynomials, a[0] == 1.
struct FilterCoeffs {
  std::vector<double> b;
  std::vector<double> a;
};

FilterCoeffs design_butterworth_bandpass(int order, double low_hz, double high_hz, double fs_hz);

// Single forward pass, direct form II transposed, state seeded with the
// steady-state response to a constant x[0] so a DC input is rejected from the
// first sample.
std::vector<double> filter_forward(const FilterCoeffs& c, const std::vector<double>& x);

// Forward-backward (zero-phase) application per lead.
SignalRecord butterworth_bandpass(const SignalRecord& rec, double low_hz, double high_hz,
                                  int order);

// Joint min-max over all leads to [0,1]; a constant segment maps to all 0.5.
SignalRecord minmax_normalize(const SignalRecord& rec);

struct PreprocessResult {
  std::vector<SignalRecord> segments;
  int64_t rejected = 0;
  double worst_nonfinite_fraction = 0.0;
};

// standardize (when source_order given) -> resample -> segment -> sanitize ->
// filter -> normalize.
PreprocessResult preprocess(const SignalRecord& rec, const PipelineConfig& cfg,
                            const std::vector<std::string>& source_order = {});

struct WaveParams {
  double amplitude = 0.0;
  double width_s = 0.02;    // Gaussian sigma
  double offset_s = 0.0;    // center relative to the R apex
};

enum class SynthClass { kNormal, kAfLike };

struct GeneratorConfig {
  double rate_hz = 100.0;
  double duration_s = 10.0;
  double mean_hr_bpm = 60.0;
  double rr_jitter_s = 0.0;        // std dev of the beat-to-beat interval
  double af_jitter_multiplier = 4.0;
  double noise_sigma = 0.0;
  double lead_gain_spread = 0.0;   // per-record multiplicative gain variation
  double hr_spread_bpm = 0.0;      // per-record heart-rate variation
  WaveParams p_wave{0.15, 0.025, -0.16};
  WaveParams q_wave{-0.10, 0.010, -0.03};
  WaveParams r_wave{1.00, 0.012, 0.0};
  WaveParams s_wave{-0.20, 0.010, 0.03};
  WaveParams t_wave{0.30, 0.050, 0.22};
  SynthClass mode = SynthClass::kNormal;
  double survival_base_hazard = 0.004;  // events per day
  double survival_jitter_coeff = 18.0;
  double survival_horizon_days = 365.0;
  void validate() const;
};

// Deterministic 12-lead generator: one Gaussian-wave template train scaled by
// per-lead gains, exact R-apex indices as ground truth, one-hot class label,
// and a survival outcome whose hazard grows with the realized RR jitter.
SignalRecord synth_ecg(const GeneratorConfig& cfg, uint64_t seed);

}  // namespace least
