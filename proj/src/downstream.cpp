#include "least/downstream.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "least/error.hpp"
#include "least/rng.hpp"

namespace least {

namespace {

using nlohmann::json;

void append_f64_le(std::string& buf, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_f64_le(const unsigned char* p) {
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace

std::string task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kClassification: return "classification";
    case TaskKind::kSegmentation: return "segmentation";
    case TaskKind::kSurvival: return "forecasting";
  }
  throw UsageError("bad task kind");
}

TaskKind task_from_name(const std::string& name) {
  if (name == "classification") return TaskKind::kClassification;
  if (name == "segmentation") return TaskKind::kSegmentation;
  if (name == "forecasting" || name == "survival") return TaskKind::kSurvival;
  throw ConfigError("unknown task: " + name +
                    " (want classification, segmentation or forecasting)");
}

std::vector<std::pair<std::string, Tensor>> TaskHead::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out = {{"head.w", w}, {"head.b", b}};
  if (kind == TaskKind::kSegmentation) {
    out.emplace_back("head.up_w", up_w);
    out.emplace_back("head.up_b", up_b);
  }
  return out;
}

int64_t TaskHead::parameter_count() const {
  int64_t total = 0;
  for (const auto& [name, t] : parameters()) total += t.numel();
  return total;
}

TaskHead make_head(TaskKind kind, int64_t embed_dim, int64_t label_count, int64_t upsample,
                   uint64_t seed, PoolKind pool) {
  if (embed_dim < 1) throw ConfigError("make_head: embed_dim must be >= 1");
  TaskHead head;
  head.kind = kind;
  head.pool = pool;
  head.embed_dim = embed_dim;
  head.label_count = kind == TaskKind::kClassification ? label_count : 1;
  if (head.label_count < 1) throw ConfigError("make_head: label_count must be >= 1");
  head.upsample = kind == TaskKind::kSegmentation ? upsample : 1;
  if (head.upsample < 1) throw ConfigError("make_head: upsample must be >= 1");

  Rng rng(seed);
  // Near-zero so initial logits stay unsaturated whatever the scale of the
  // pooled features; the encoder sees ~zero gradient until the head finds a
  // direction, which keeps full fine-tuning from wrecking pretrained weights.
  const double sd = 1e-4;
  std::vector<double> wv(static_cast<size_t>(embed_dim * head.label_count));
  for (double& v : wv) v = rng.normal() * sd;
  head.w = Tensor::from({embed_dim, head.label_count}, std::move(wv), true);
  head.b = Tensor::zeros({head.label_count}, true);
  if (kind == TaskKind::kSegmentation) {
    std::vector<double> uv(static_cast<size_t>(head.upsample));
    for (double& v : uv) v = 1.0 + rng.normal() * 0.1;  // near-identity broadcast
    head.up_w = Tensor::from({1, 1, head.upsample}, std::move(uv), true);
    head.up_b = Tensor::zeros({1}, true);
  }
  return head;
}

Tensor pool_tokens(const Tensor& tokens, int64_t batch, PoolKind pool) {
  if (tokens.rank() != 2 || tokens.dim(0) % batch != 0) {
    throw DimensionError("pool_tokens: want stacked [B*n x C], got " + shape_str(tokens.shape()));
  }
  const int64_t per = tokens.dim(0) / batch;
  const int64_t dim = tokens.dim(1);
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(batch));
  for (int64_t s = 0; s < batch; ++s) {
    Tensor slab = batch == 1 ? tokens : slice_rows(tokens, s * per, (s + 1) * per);
    Tensor pooled = pool == PoolKind::kMean ? mean_axis0(slab) : max_axis0(slab);
    rows.push_back(reshape(pooled, {1, dim}));
  }
  return batch == 1 ? rows[0] : concat_rows(rows);
}

Tensor classify_logits(const Tensor& tokens, int64_t batch, const TaskHead& head) {
  if (head.kind != TaskKind::kClassification) throw UsageError("head is not a classifier");
  if (tokens.dim(1) != head.embed_dim) {
    throw DimensionError("classify_logits: token width " + shape_str(tokens.shape()) +
                         " vs head dim " + std::to_string(head.embed_dim));
  }
  return linear(pool_tokens(tokens, batch, head.pool), head.w, head.b);
}

Tensor segment_logits(const Tensor& tokens, int64_t batch, const TaskHead& head) {
  if (head.kind != TaskKind::kSegmentation) throw UsageError("head is not a segmenter");
  const int64_t per = tokens.dim(0) / batch;
  Tensor lin = linear(tokens, head.w, head.b);            // [B*n x 1]
  Tensor track = reshape(lin, {batch, 1, per});           // row-major layout matches
  Tensor up = conv_transpose1d(track, head.up_w, head.up_b, head.upsample);
  return reshape(up, {batch, per * head.upsample});
}

Tensor segment_activation(const Tensor& tokens, int64_t batch, const TaskHead& head) {
  return sigmoid(segment_logits(tokens, batch, head));
}

Tensor survival_risk(const Tensor& tokens, int64_t batch, const TaskHead& head) {
  if (head.kind != TaskKind::kSurvival) throw UsageError("head is not a survival head");
  Tensor scores = linear(pool_tokens(tokens, batch, head.pool), head.w, head.b);  // [B x 1]
  return reshape(scores, {batch});
}

Tensor cox_loss(const Tensor& risks, const std::vector<double>& times,
                const std::vector<int>& events) {
  const int64_t n = risks.numel();
  if (static_cast<int64_t>(times.size()) != n || static_cast<int64_t>(events.size()) != n) {
    throw DimensionError("cox_loss: risks/times/events length mismatch");
  }
  Tensor col = reshape(risks, {n, 1});
  Tensor acc;
  int64_t n_events = 0;
  for (int64_t i = 0; i < n; ++i) {
    if (events[static_cast<size_t>(i)] == 0) continue;
    ++n_events;
    std::vector<int64_t> risk_set;
    double shift = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) {
      if (times[static_cast<size_t>(j)] >= times[static_cast<size_t>(i)]) {
        risk_set.push_back(j);
        shift = std::max(shift, risks.data()[static_cast<size_t>(j)]);
      }
    }
    Tensor set_shifted = add_scalar(gather_rows(col, risk_set), -shift);
    Tensor log_denom = log_op(sum_all(exp_op(set_shifted)));
    Tensor own = add_scalar(reshape(gather_rows(col, {i}), {1}), -shift);
    Tensor term = sub(own, log_denom);
    acc = acc.defined() ? add(acc, term) : term;
  }
  if (n_events == 0) throw EvalError("cox_loss: no events in batch");
  return mul_scalar(acc, -1.0 / static_cast<double>(n_events));
}

BaselineHazard breslow_baseline(const std::vector<double>& times, const std::vector<int>& events,
                                const std::vector<double>& risks) {
  const size_t n = times.size();
  if (events.size() != n || risks.size() != n) {
    throw DimensionError("breslow_baseline: input length mismatch");
  }
  BaselineHazard base;
  if (n == 0) throw EvalError("breslow_baseline: empty inputs");
  base.last_follow_up = *std::max_element(times.begin(), times.end());

  std::vector<double> uniq;
  for (size_t i = 0; i < n; ++i) {
    if (events[i] == 1) uniq.push_back(times[i]);
  }
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());

  double cum = 0.0;
  for (double tau : uniq) {
    int64_t deaths = 0;
    double denom = 0.0;
    for (size_t j = 0; j < n; ++j) {
      if (times[j] >= tau) denom += std::exp(risks[j]);
      if (events[j] == 1 && times[j] == tau) ++deaths;
    }
    cum += static_cast<double>(deaths) / denom;
    base.event_times.push_back(tau);
    base.cum_hazard.push_back(cum);
  }
  return base;
}

double survival_probability(double risk, const BaselineHazard& baseline, double horizon,
                            bool* clamped) {
  if (clamped != nullptr) *clamped = false;
  double h = horizon;
  if (h > baseline.last_follow_up) {
    h = baseline.last_follow_up;
    if (clamped != nullptr) *clamped = true;
  }
  double cum = 0.0;
  for (size_t i = 0; i < baseline.event_times.size(); ++i) {
    if (baseline.event_times[i] <= h) cum = baseline.cum_hazard[i];
  }
  return std::exp(-cum * std::exp(risk));
}

void RPeakPostConfig::validate() const {
  if (!(refractory_ms > max_qrs_ms && max_qrs_ms > 0)) {
    throw ConfigError("rpeak post: need refractory_ms > max_qrs_ms > 0");
  }
  if (min_prominence < 0 || match_window_ms <= 0) {
    throw ConfigError("rpeak post: min_prominence >= 0 and match_window_ms > 0 required");
  }
}

namespace {

// Topographic prominence: walk each side to the first strictly higher sample
// (or the edge), take the minimum along the walk, prominence is the peak
// height over the higher of the two side minima.
double peak_prominence(const std::vector<double>& a, int64_t peak) {
  const double h = a[static_cast<size_t>(peak)];
  double left_min = h;
  for (int64_t i = peak - 1; i >= 0; --i) {
    if (a[static_cast<size_t>(i)] > h) break;
    left_min = std::min(left_min, a[static_cast<size_t>(i)]);
  }
  double right_min = h;
  for (int64_t i = peak + 1; i < static_cast<int64_t>(a.size()); ++i) {
    if (a[static_cast<size_t>(i)] > h) break;
    right_min = std::min(right_min, a[static_cast<size_t>(i)]);
  }
  return h - std::max(left_min, right_min);
}

std::vector<int64_t> local_maxima(const std::vector<double>& a) {
  std::vector<int64_t> out;
  const int64_t n = static_cast<int64_t>(a.size());
  int64_t i = 1;
  while (i < n - 1) {
    if (a[static_cast<size_t>(i)] > a[static_cast<size_t>(i - 1)]) {
      int64_t j = i;
      while (j < n - 1 && a[static_cast<size_t>(j + 1)] == a[static_cast<size_t>(i)]) ++j;
      if (j < n - 1 && a[static_cast<size_t>(j + 1)] < a[static_cast<size_t>(i)]) {
        out.push_back((i + j) / 2);  // plateau midpoint
      }
      i = j + 1;
    } else {
      ++i;
    }
  }
  return out;
}

}  // namespace

std::vector<int64_t> detect_rpeaks(const std::vector<double>& activation, double rate_hz,
                                   const RPeakPostConfig& cfg) {
  cfg.validate();
  if (rate_hz <= 0) throw ConfigError("detect_rpeaks: rate must be positive");
  if (activation.size() < 3) return {};

  const auto [lo_it, hi_it] = std::minmax_element(activation.begin(), activation.end());
  const double range = *hi_it - *lo_it;
  if (range <= 0) return {};
  const double threshold = cfg.min_prominence * range;

  std::vector<int64_t> candidates;
  for (int64_t idx : local_maxima(activation)) {
    if (peak_prominence(activation, idx) >= threshold) candidates.push_back(idx);
  }
  if (candidates.empty()) return {};

  // refractory suppression: higher peaks claim their neighborhood first
  const int64_t refractory = llround(cfg.refractory_ms * rate_hz / 1000.0);
  std::vector<int64_t> order = candidates;
  std::sort(order.begin(), order.end(), [&](int64_t x, int64_t y) {
    const double ax = activation[static_cast<size_t>(x)];
    const double ay = activation[static_cast<size_t>(y)];
    if (ax != ay) return ax > ay;
    return x < y;
  });
  std::vector<int64_t> anchors;
  for (int64_t idx : order) {
    bool blocked = false;
    for (int64_t kept : anchors) {
      if (std::llabs(kept - idx) < refractory) {
        blocked = true;
        break;
      }
    }
    if (!blocked) anchors.push_back(idx);
  }
  std::sort(anchors.begin(), anchors.end());

  if (cfg.literal_between_candidates) {
    std::vector<int64_t> out;
    for (size_t i = 0; i + 1 < anchors.size(); ++i) {
      out.push_back((anchors[i] + anchors[i + 1] + 1) / 2);
    }
    return out;
  }

  // sub-peaks within one QRS width of the anchor collapse to their midpoint
  const int64_t qrs_radius = llround(cfg.max_qrs_ms / 2.0 * rate_hz / 1000.0);
  std::vector<int64_t> peaks;
  for (int64_t anchor : anchors) {
    int64_t lo = anchor, hi = anchor;
    for (int64_t idx : candidates) {
      if (std::llabs(idx - anchor) <= qrs_radius) {
        lo = std::min(lo, idx);
        hi = std::max(hi, idx);
      }
    }
    peaks.push_back((lo + hi + 1) / 2);
  }
  std::sort(peaks.begin(), peaks.end());
  peaks.erase(std::unique(peaks.begin(), peaks.end()), peaks.end());
  return peaks;
}

std::vector<double> segmentation_target(const std::vector<int64_t>& r_peaks, int64_t total,
                                        int64_t dilate) {
  std::vector<double> mask(static_cast<size_t>(total), 0.0);
  for (int64_t p : r_peaks) {
    for (int64_t t = std::max<int64_t>(0, p - dilate); t <= std::min(total - 1, p + dilate); ++t) {
      mask[static_cast<size_t>(t)] = 1.0;
    }
  }
  return mask;
}

void save_head(const TaskHead& head, const std::string& stem) {
  json manifest;
  manifest["format"] = "least-head-v1";
  manifest["kind"] = task_name(head.kind);
  manifest["pool"] = head.pool == PoolKind::kMean ? "mean" : "max";
  manifest["embed_dim"] = head.embed_dim;
  manifest["label_count"] = head.label_count;
  manifest["upsample"] = head.upsample;
  json plist = json::array();
  std::string blob;
  for (const auto& [name, t] : head.parameters()) {
    json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    plist.push_back(entry);
    for (double v : t.data()) append_f64_le(blob, v);
  }
  manifest["params"] = plist;

  std::ofstream jf(stem + ".json", std::ios::binary);
  if (!jf) throw IoError("cannot write " + stem + ".json");
  jf << manifest.dump(2) << "\n";
  std::ofstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw IoError("cannot write " + stem + ".bin");
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bf) throw IoError("short write to " + stem + ".bin");
}

TaskHead load_head(const std::string& stem) {
  std::ifstream jf(stem + ".json", std::ios::binary);
  if (!jf) throw IoError("cannot open " + stem + ".json");
  json manifest;
  try {
    jf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("bad head manifest " + stem + ".json: " + e.what());
  }
  TaskHead head;
  try {
    if (manifest.at("format").get<std::string>() != "least-head-v1") {
      throw IoError("unknown head format in " + stem + ".json");
    }
    head = make_head(task_from_name(manifest.at("kind").get<std::string>()),
                     manifest.at("embed_dim").get<int64_t>(),
                     manifest.at("label_count").get<int64_t>(),
                     manifest.at("upsample").get<int64_t>(), 0,
                     manifest.at("pool").get<std::string>() == "max" ? PoolKind::kMax
                                                                     : PoolKind::kMean);
  } catch (const json::exception& e) {
    throw IoError("bad head manifest " + stem + ".json: " + e.what());
  }
  std::ifstream bf(stem + ".bin", std::ios::binary);
  if (!bf) throw IoError("cannot open " + stem + ".bin");
  std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  size_t cursor = 0;
  for (auto& [name, t] : head.parameters()) {
    const int64_t count = t.numel();
    if (cursor + static_cast<size_t>(count) * 8 > blob.size()) {
      throw IoError("head blob truncated at " + name);
    }
    for (int64_t k = 0; k < count; ++k) {
      t.raw_data()[static_cast<size_t>(k)] =
          read_f64_le(reinterpret_cast<const unsigned char*>(blob.data()) + cursor);
      cursor += 8;
    }
  }
  if (cursor != blob.size()) throw IoError("head blob has trailing bytes");
  return head;
}

}  // namespace least
