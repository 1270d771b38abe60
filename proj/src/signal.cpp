#include "least/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>

namespace least {

void SignalRecord::validate() const {
  if (lead_count < 1 || sample_count < 1) {
    throw DimensionError("record " + id + ": lead_count and sample_count must be positive");
  }
  if (static_cast<int64_t>(leads.size()) != lead_count * sample_count) {
    throw DimensionError("record " + id + ": leads buffer holds " +
                         std::to_string(leads.size()) + " values, expected " +
                         std::to_string(lead_count * sample_count));
  }
  if (sampling_rate_hz <= 0.0) {
    throw ConfigError("record " + id + ": sampling rate must be positive");
  }
  if (r_peaks) {
    for (size_t i = 0; i < r_peaks->size(); ++i) {
      if ((*r_peaks)[i] < 0 || (*r_peaks)[i] >= sample_count) {
        throw ConfigError("record " + id + ": r_peak index out of range");
      }
      if (i > 0 && (*r_peaks)[i] <= (*r_peaks)[i - 1]) {
        throw ConfigError("record " + id + ": r_peaks must be strictly increasing");
      }
    }
  }
}

void PipelineConfig::validate() const {
  if (target_hz <= 0.0) throw ConfigError("pipeline: target_hz must be positive");
  if (segment_seconds <= 0.0) throw ConfigError("pipeline: segment_seconds must be positive");
  if (nan_fraction_limit < 0.0 || nan_fraction_limit > 1.0) {
    throw ConfigError("pipeline: nan_fraction_limit must lie in [0,1]");
  }
  if (filter_order < 1) throw ConfigError("pipeline: filter_order must be positive");
  if (!(band_low_hz > 0.0 && band_low_hz < band_high_hz && band_high_hz < target_hz / 2.0)) {
    throw ConfigError("pipeline: need 0 < band_low < band_high < target_hz/2, got " +
                      std::to_string(band_low_hz) + ", " + std::to_string(band_high_hz) +
                      " at " + std::to_string(target_hz) + " Hz");
  }
}

const std::vector<std::string>& canonical_lead_names() {
  static const std::vector<std::string> names = {"I",   "II",  "III", "aVR", "aVL", "aVF",
                                                 "V1",  "V2",  "V3",  "V4",  "V5",  "V6"};
  return names;
}

SignalRecord standardize_leads(const SignalRecord& rec,
                               const std::vector<std::string>& source_order) {
  const auto& canon = canonical_lead_names();
  if (static_cast<int64_t>(source_order.size()) != rec.lead_count) {
    throw DimensionError("standardize_leads: " + std::to_string(source_order.size()) +
                         " names for " + std::to_string(rec.lead_count) + " leads");
  }
  std::vector<int64_t> src_row(canon.size(), -1);
  for (size_t i = 0; i < source_order.size(); ++i) {
    auto it = std::find(canon.begin(), canon.end(), source_order[i]);
    if (it == canon.end()) {
      throw ConfigError("standardize_leads: unknown lead name " + source_order[i]);
    }
    const size_t c = static_cast<size_t>(it - canon.begin());
    if (src_row[c] >= 0) {
      throw ConfigError("standardize_leads: duplicate lead name " + source_order[i]);
    }
    src_row[c] = static_cast<int64_t>(i);
  }
  for (size_t c = 0; c < canon.size(); ++c) {
    if (src_row[c] < 0) throw ConfigError("standardize_leads: missing lead " + canon[c]);
  }
  SignalRecord out = rec;
  for (size_t c = 0; c < canon.size(); ++c) {
    std::copy_n(rec.leads.begin() + src_row[c] * rec.sample_count, rec.sample_count,
                out.leads.begin() + static_cast<int64_t>(c) * rec.sample_count);
  }
  return out;
}

SignalRecord resample(const SignalRecord& rec, double target_hz) {
  if (target_hz <= 0.0) throw ConfigError("resample: target rate must be positive");
  if (target_hz == rec.sampling_rate_hz) return rec;
  const int64_t t_in = rec.sample_count;
  const int64_t t_out = std::llround(static_cast<double>(t_in) * target_hz / rec.sampling_rate_hz);
  const double step = rec.sampling_rate_hz / target_hz;
  SignalRecord out = rec;
  out.sample_count = t_out;
  out.sampling_rate_hz = target_hz;
  out.leads.assign(static_cast<size_t>(rec.lead_count * t_out), 0.0);
  for (int64_t l = 0; l < rec.lead_count; ++l) {
    const double* src = rec.leads.data() + l * t_in;
    double* dst = out.leads.data() + l * t_out;
    for (int64_t j = 0; j < t_out; ++j) {
      const double pos = static_cast<double>(j) * step;
      int64_t i0 = static_cast<int64_t>(std::floor(pos));
      if (i0 >= t_in - 1) {
        dst[j] = src[t_in - 1];
        continue;
      }
      const double frac = pos - static_cast<double>(i0);
      dst[j] = src[i0] * (1.0 - frac) + src[i0 + 1] * frac;
    }
  }
  if (rec.r_peaks) {
    std::vector<int64_t> peaks;
    for (int64_t p : *rec.r_peaks) {
      const int64_t q = std::llround(static_cast<double>(p) * target_hz / rec.sampling_rate_hz);
      if (q < t_out && (peaks.empty() || q > peaks.back())) peaks.push_back(q);
    }
    out.r_peaks = std::move(peaks);
  }
  return out;
}

std::vector<SignalRecord> segment(const SignalRecord& rec, double seconds) {
  if (seconds <= 0.0) throw ConfigError("segment: window must be positive");
  const int64_t win = std::llround(seconds * rec.sampling_rate_hz);
  std::vector<SignalRecord> out;
  if (win < 1 || rec.sample_count < win) return out;
  const int64_t n_seg = rec.sample_count / win;
  for (int64_t s = 0; s < n_seg; ++s) {
    SignalRecord seg;
    seg.id = rec.id + "_s" + std::to_string(s);
    seg.lead_count = rec.lead_count;
    seg.sample_count = win;
    seg.sampling_rate_hz = rec.sampling_rate_hz;
    seg.label_vector = rec.label_vector;
    seg.survival = rec.survival;
    seg.leads.resize(static_cast<size_t>(rec.lead_count * win));
    for (int64_t l = 0; l < rec.lead_count; ++l) {
      std::copy_n(rec.leads.begin() + l * rec.sample_count + s * win, win,
                  seg.leads.begin() + l * win);
    }
    if (rec.r_peaks) {
      std::vector<int64_t> local;
      for (int64_t p : *rec.r_peaks) {
        if (p >= s * win && p < (s + 1) * win) local.push_back(p - s * win);
      }
      seg.r_peaks = std::move(local);
    }
    out.push_back(std::move(seg));
  }
  return out;
}

SanitizeOutcome sanitize(const SignalRecord& rec, double limit) {
  SanitizeOutcome out;
  int64_t bad = 0;
  for (double v : rec.leads) {
    if (!std::isfinite(v)) ++bad;
  }
  out.nonfinite_fraction =
      static_cast<double>(bad) / static_cast<double>(rec.leads.size());
  out.accepted = out.nonfinite_fraction < limit;
  if (out.accepted) {
    out.record = rec;
    for (double& v : out.record.leads) {
      if (!std::isfinite(v)) v = 0.0;
    }
  }
  return out;
}

namespace {

using cplx = std::complex<double>;

// Expands prod_i (x - roots[i]) into real coefficients, leading term first.
std::vector<double> poly_from_roots(const std::vector<cplx>& roots) {
  std::vector<cplx> c = {cplx(1.0, 0.0)};
  for (const cplx& r : roots) {
    std::vector<cplx> next(c.size() + 1, cplx(0.0, 0.0));
    for (size_t i = 0; i < c.size(); ++i) {
      next[i] += c[i];
      next[i + 1] -= c[i] * r;
    }
    c = std::move(next);
  }
  std::vector<double> out(c.size());
  for (size_t i = 0; i < c.size(); ++i) out[i] = c[i].real();
  return out;
}

}  // namespace

FilterCoeffs design_butterworth_bandpass(int order, double low_hz, double high_hz, double fs_hz) {
  if (order < 1) throw ConfigError("butterworth: order must be positive");
  if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < fs_hz / 2.0)) {
    throw ConfigError("butterworth: need 0 < low < high < fs/2, got " + std::to_string(low_hz) +
                      ", " + std::to_string(high_hz) + " at " + std::to_string(fs_hz) + " Hz");
  }
  // analog lowpass prototype: poles on the unit circle, left half plane
  std::vector<cplx> poles;
  for (int k = 0; k < order; ++k) {
    const double theta = M_PI * static_cast<double>(2 * k + order + 1) /
                         static_cast<double>(2 * order);
    poles.emplace_back(std::cos(theta), std::sin(theta));
  }
  // pre-warped band edges
  const double w1 = 2.0 * fs_hz * std::tan(M_PI * low_hz / fs_hz);
  const double w2 = 2.0 * fs_hz * std::tan(M_PI * high_hz / fs_hz);
  const double wo = std::sqrt(w1 * w2);
  const double bw = w2 - w1;
  // lowpass-to-bandpass: each pole splits into two, zeros appear at s = 0
  std::vector<cplx> bp_poles;
  for (const cplx& p : poles) {
    const cplx s = p * (bw / 2.0);
    const cplx d = std::sqrt(s * s - cplx(wo * wo, 0.0));
    bp_poles.push_back(s + d);
    bp_poles.push_back(s - d);
  }
  std::vector<cplx> bp_zeros(static_cast<size_t>(order), cplx(0.0, 0.0));
  double gain = std::pow(bw, order);
  // bilinear transform with fs2 = 2 fs
  const double fs2 = 2.0 * fs_hz;
  cplx num(1.0, 0.0), den(1.0, 0.0);
  for (const cplx& z : bp_zeros) num *= (cplx(fs2, 0.0) - z);
  for (const cplx& p : bp_poles) den *= (cplx(fs2, 0.0) - p);
  std::vector<cplx> zd, pd;
  for (const cplx& z : bp_zeros) zd.push_back((cplx(fs2, 0.0) + z) / (cplx(fs2, 0.0) - z));
  for (const cplx& p : bp_poles) pd.push_back((cplx(fs2, 0.0) + p) / (cplx(fs2, 0.0) - p));
  while (zd.size() < pd.size()) zd.emplace_back(-1.0, 0.0);
  gain *= (num / den).real();

  FilterCoeffs c;
  c.b = poly_from_roots(zd);
  for (double& v : c.b) v *= gain;
  c.a = poly_from_roots(pd);
  return c;
}

std::vector<double> filter_forward(const FilterCoeffs& c, const std::vector<double>& x) {
  const size_t n = c.a.size() - 1;
  if (c.b.size() != c.a.size() || c.a.empty() || c.a[0] == 0.0) {
    throw ConfigError("filter: coefficient arrays must be equal length with a[0] != 0");
  }
  // steady-state state vector for a unit-step input, then scaled by x[0];
  // makes the response to a constant input exact from the first sample
  double sb = 0.0, sa = 0.0;
  for (double v : c.b) sb += v;
  for (double v : c.a) sa += v;
  const double y_ss = sb / sa;
  std::vector<double> zi(n, 0.0);
  if (n > 0) {
    zi[n - 1] = c.b[n] - c.a[n] * y_ss;
    for (size_t j = n - 1; j-- > 0;) zi[j] = zi[j + 1] + c.b[j + 1] - c.a[j + 1] * y_ss;
  }
  std::vector<double> state(n, 0.0);
  const double x0 = x.empty() ? 0.0 : x.front();
  for (size_t j = 0; j < n; ++j) state[j] = zi[j] * x0;

  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double yi = c.b[0] * xi + (n > 0 ? state[0] : 0.0);
    for (size_t j = 0; j + 1 < n; ++j) state[j] = state[j + 1] + c.b[j + 1] * xi - c.a[j + 1] * yi;
    if (n > 0) state[n - 1] = c.b[n] * xi - c.a[n] * yi;
    y[i] = yi;
  }
  return y;
}

SignalRecord butterworth_bandpass(const SignalRecord& rec, double low_hz, double high_hz,
                                  int order) {
  FilterCoeffs c = design_butterworth_bandpass(order, low_hz, high_hz, rec.sampling_rate_hz);
  SignalRecord out = rec;
  std::vector<double> lane(static_cast<size_t>(rec.sample_count));
  for (int64_t l = 0; l < rec.lead_count; ++l) {
    std::copy_n(rec.leads.begin() + l * rec.sample_count, rec.sample_count, lane.begin());
    std::vector<double> fwd = filter_forward(c, lane);
    std::reverse(fwd.begin(), fwd.end());
    std::vector<double> bwd = filter_forward(c, fwd);
    std::reverse(bwd.begin(), bwd.end());
    std::copy_n(bwd.begin(), rec.sample_count, out.leads.begin() + l * rec.sample_count);
  }
  return out;
}

SignalRecord minmax_normalize(const SignalRecord& rec) {
  double lo = rec.leads[0], hi = rec.leads[0];
  for (double v : rec.leads) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  SignalRecord out = rec;
  if (hi == lo) {
    std::fill(out.leads.begin(), out.leads.end(), 0.5);
    return out;
  }
  const double inv = 1.0 / (hi - lo);
  for (double& v : out.leads) v = (v - lo) * inv;
  return out;
}

PreprocessResult preprocess(const SignalRecord& rec, const PipelineConfig& cfg,
                            const std::vector<std::string>& source_order) {
  cfg.validate();
  rec.validate();
  SignalRecord cur = source_order.empty() ? rec : standardize_leads(rec, source_order);
  cur = resample(cur, cfg.target_hz);
  PreprocessResult result;
  for (SignalRecord& seg : segment(cur, cfg.segment_seconds)) {
    SanitizeOutcome s = sanitize(seg, cfg.nan_fraction_limit);
    result.worst_nonfinite_fraction =
        std::max(result.worst_nonfinite_fraction, s.nonfinite_fraction);
    if (!s.accepted) {
      ++result.rejected;
      continue;
    }
    SignalRecord filtered =
        butterworth_bandpass(s.record, cfg.band_low_hz, cfg.band_high_hz, cfg.filter_order);
    result.segments.push_back(minmax_normalize(filtered));
  }
  return result;
}

void GeneratorConfig::validate() const {
  if (rate_hz <= 0.0) throw ConfigError("synth: rate must be positive");
  if (duration_s <= 0.0) throw ConfigError("synth: duration must be positive");
  if (mean_hr_bpm <= 0.0) throw ConfigError("synth: heart rate must be positive");
}

SignalRecord synth_ecg(const GeneratorConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const int64_t t_len = std::llround(cfg.rate_hz * cfg.duration_s);

  const double hr = cfg.mean_hr_bpm + cfg.hr_spread_bpm * (2.0 * rng.uniform() - 1.0);
  static const double base_gains[12] = {1.00, 0.92, 0.85, 0.78, 1.08, 0.96,
                                        0.70, 0.88, 1.15, 0.82, 1.05, 0.75};
  double gains[12];
  for (int l = 0; l < 12; ++l) {
    gains[l] = base_gains[l] * (1.0 + cfg.lead_gain_spread * (2.0 * rng.uniform() - 1.0));
  }

  const bool af = cfg.mode == SynthClass::kAfLike;
  const double jitter = cfg.rr_jitter_s * (af ? cfg.af_jitter_multiplier : 1.0);
  const double rr_base = 60.0 / hr;

  std::vector<int64_t> peaks;
  std::vector<double> rr_realized;
  double tau = 0.5 * rr_base;
  while (true) {
    const int64_t k = std::llround(tau * cfg.rate_hz);
    if (k >= t_len) break;
    peaks.push_back(k);
    const double rr = std::max(0.3, rr_base + jitter * rng.normal());
    rr_realized.push_back(rr);
    tau += rr;
  }

  WaveParams waves[5] = {cfg.p_wave, cfg.q_wave, cfg.r_wave, cfg.s_wave, cfg.t_wave};
  if (af) waves[0].amplitude = 0.0;

  std::vector<double> tmpl(static_cast<size_t>(t_len), 0.0);
  for (int64_t k : peaks) {
    const double center = static_cast<double>(k) / cfg.rate_hz;
    for (const WaveParams& w : waves) {
      if (w.amplitude == 0.0) continue;
      const double c = center + w.offset_s;
      const double half = 5.0 * w.width_s;
      const int64_t lo = std::max<int64_t>(0, std::llround((c - half) * cfg.rate_hz));
      const int64_t hi = std::min<int64_t>(t_len - 1, std::llround((c + half) * cfg.rate_hz));
      for (int64_t t = lo; t <= hi; ++t) {
        const double dt = static_cast<double>(t) / cfg.rate_hz - c;
        tmpl[t] += w.amplitude * std::exp(-0.5 * dt * dt / (w.width_s * w.width_s));
      }
    }
  }

  SignalRecord rec;
  rec.id = "synth_" + std::to_string(seed);
  rec.lead_count = 12;
  rec.sample_count = t_len;
  rec.sampling_rate_hz = cfg.rate_hz;
  rec.leads.resize(static_cast<size_t>(12 * t_len));
  rec.r_peaks = peaks;
  rec.label_vector = af ? std::vector<int>{0, 1} : std::vector<int>{1, 0};

  // survival hazard grows with the realized beat-to-beat variability
  double rr_mean = 0.0, rr_var = 0.0;
  if (!rr_realized.empty()) {
    for (double r : rr_realized) rr_mean += r;
    rr_mean /= static_cast<double>(rr_realized.size());
    for (double r : rr_realized) rr_var += (r - rr_mean) * (r - rr_mean);
    rr_var /= static_cast<double>(rr_realized.size());
  }
  const double hazard = cfg.survival_base_hazard *
                        std::exp(cfg.survival_jitter_coeff * std::sqrt(rr_var));
  const double u = rng.uniform();
  const double event_time = -std::log(1.0 - u) / hazard;
  Survival sv;
  if (event_time <= cfg.survival_horizon_days) {
    sv.time_days = event_time;
    sv.event = true;
  } else {
    sv.time_days = cfg.survival_horizon_days;
    sv.event = false;
  }
  rec.survival = sv;

  for (int l = 0; l < 12; ++l) {
    double* dst = rec.leads.data() + static_cast<int64_t>(l) * t_len;
    for (int64_t t = 0; t < t_len; ++t) {
      dst[t] = gains[l] * tmpl[t] + (cfg.noise_sigma > 0.0 ? cfg.noise_sigma * rng.normal() : 0.0);
    }
  }
  return rec;
}

}  // namespace least
