#include "least/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "least/error.hpp"

namespace least {

using nlohmann::json;

namespace {

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<double> column(const Tensor& t, int64_t k) {
  std::vector<double> out(static_cast<size_t>(t.dim(0)));
  for (int64_t i = 0; i < t.dim(0); ++i)
    out[static_cast<size_t>(i)] = t.data()[static_cast<size_t>(i * t.dim(1) + k)];
  return out;
}

}  // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const size_t n = scores.size();
  if (labels.size() != n) throw DimensionError("auroc: scores/labels length mismatch");
  if (n == 0) throw EvalError("auroc: empty input");
  int64_t pos = 0;
  for (int v : labels) pos += (v != 0);
  const int64_t neg = static_cast<int64_t>(n) - pos;
  if (pos == 0 || neg == 0) throw EvalError("auroc: needs both classes");

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // average ranks over runs of tied scores
  std::vector<double> rank(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }

  double pos_rank_sum = 0.0;
  for (size_t k = 0; k < n; ++k)
    if (labels[k] != 0) pos_rank_sum += rank[k];
  const double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

MacroAuroc macro_auroc(const Tensor& scores, const Tensor& truth) {
  if (scores.rank() != 2 || scores.shape() != truth.shape())
    throw DimensionError("macro_auroc: want matching [N x K] matrices");
  MacroAuroc out;
  double sum = 0.0;
  for (int64_t k = 0; k < scores.dim(1); ++k) {
    std::vector<double> col = column(scores, k);
    std::vector<int> lab;
    lab.reserve(col.size());
    for (double v : column(truth, k)) lab.push_back(v > 0.5 ? 1 : 0);
    const int64_t pos = std::count(lab.begin(), lab.end(), 1);
    if (pos == 0 || pos == static_cast<int64_t>(lab.size())) {
      ++out.skipped_labels;
      continue;
    }
    sum += auroc(col, lab);
    ++out.used_labels;
  }
  if (out.used_labels == 0) throw EvalError("macro_auroc: every label has a single class");
  out.value = sum / static_cast<double>(out.used_labels);
  return out;
}

F1Acc multilabel_f1_acc(const Tensor& pred, const Tensor& truth) {
  if (pred.rank() != 2 || pred.shape() != truth.shape())
    throw DimensionError("multilabel_f1_acc: want matching [N x K] matrices");
  const int64_t n = pred.dim(0), k = pred.dim(1);
  if (n == 0 || k == 0) throw EvalError("multilabel_f1_acc: empty input");

  int64_t agree = 0;
  double f1_sum = 0.0;
  for (int64_t c = 0; c < k; ++c) {
    int64_t tp = 0, fp = 0, fn = 0;
    for (int64_t r = 0; r < n; ++r) {
      const bool p = pred.data()[static_cast<size_t>(r * k + c)] > 0.5;
      const bool t = truth.data()[static_cast<size_t>(r * k + c)] > 0.5;
      agree += (p == t);
      tp += (p && t);
      fp += (p && !t);
      fn += (!p && t);
    }
    f1_sum += (tp + fp + fn) == 0
                  ? 0.0
                  : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
  }
  F1Acc out;
  out.accuracy = static_cast<double>(agree) / static_cast<double>(n * k);
  out.f1_macro = f1_sum / static_cast<double>(k);
  return out;
}

std::vector<std::pair<size_t, size_t>> match_rpeaks(const std::vector<int64_t>& pred,
                                                    const std::vector<int64_t>& truth,
                                                    double rate_hz, double window_ms) {
  if (rate_hz <= 0.0) throw ConfigError("rpeak matching: rate must be positive");
  if (!std::is_sorted(pred.begin(), pred.end()) || !std::is_sorted(truth.begin(), truth.end()))
    throw UsageError("rpeak matching: index lists must be sorted");
  const double window = window_ms * rate_hz / 1000.0;

  std::vector<std::pair<size_t, size_t>> out;
  std::vector<bool> used(pred.size(), false);
  for (size_t ti = 0; ti < truth.size(); ++ti) {
    int64_t best = -1;
    double best_d = 0.0;
    for (size_t p = 0; p < pred.size(); ++p) {
      if (used[p]) continue;
      const double d = std::fabs(static_cast<double>(pred[p] - truth[ti]));
      if (d > window) continue;
      if (best < 0 || d < best_d) {  // ties keep the earlier prediction
        best = static_cast<int64_t>(p);
        best_d = d;
      }
    }
    if (best >= 0) {
      used[static_cast<size_t>(best)] = true;
      out.emplace_back(static_cast<size_t>(best), ti);
    }
  }
  return out;
}

RPeakScore rpeak_metrics(const std::vector<int64_t>& pred, const std::vector<int64_t>& truth,
                         double rate_hz, double window_ms, bool optimal) {
  int64_t tp = 0;
  if (optimal) {
    if (rate_hz <= 0.0) throw ConfigError("rpeak_metrics: rate must be positive");
    if (!std::is_sorted(pred.begin(), pred.end()) || !std::is_sorted(truth.begin(), truth.end()))
      throw UsageError("rpeak_metrics: index lists must be sorted");
    const double window = window_ms * rate_hz / 1000.0;
    // two-pointer sweep: for sorted lists and a uniform window this yields a
    // maximum-cardinality matching
    size_t i = 0, j = 0;
    while (i < pred.size() && j < truth.size()) {
      const double d = static_cast<double>(pred[i] - truth[j]);
      if (std::fabs(d) <= window) {
        ++tp;
        ++i;
        ++j;
      } else if (d < 0) {
        ++i;
      } else {
        ++j;
      }
    }
  } else {
    tp = static_cast<int64_t>(match_rpeaks(pred, truth, rate_hz, window_ms).size());
  }

  RPeakScore out;
  out.matched = tp;
  if (truth.empty() && pred.empty()) {
    out.se = out.ppv = out.f1 = 1.0;
    return out;
  }
  out.se = truth.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(truth.size());
  out.ppv = pred.empty() ? 0.0 : static_cast<double>(tp) / static_cast<double>(pred.size());
  out.f1 = (out.se + out.ppv) > 0.0 ? 2.0 * out.se * out.ppv / (out.se + out.ppv) : 0.0;
  return out;
}

CIndexScore c_index(const std::vector<double>& times, const std::vector<int>& events,
                    const std::vector<double>& risks) {
  const size_t n = times.size();
  if (events.size() != n || risks.size() != n)
    throw DimensionError("c_index: input length mismatch");
  CIndexScore out;
  double score = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (events[i] != 1) continue;
    for (size_t j = 0; j < n; ++j) {
      if (!(times[i] < times[j])) continue;
      ++out.comparable;
      if (risks[i] > risks[j])
        score += 1.0;
      else if (risks[i] == risks[j])
        score += 0.5;
    }
  }
  if (out.comparable == 0) throw EvalError("c_index: no comparable pairs");
  out.value = score / static_cast<double>(out.comparable);
  return out;
}

double brier(const std::vector<double>& surv_prob_at_h, const std::vector<double>& times,
             const std::vector<int>& events, double horizon) {
  const size_t n = surv_prob_at_h.size();
  if (times.size() != n || events.size() != n)
    throw DimensionError("brier: input length mismatch");
  double sum = 0.0;
  int64_t used = 0;
  for (size_t i = 0; i < n; ++i) {
    double outcome;
    if (times[i] > horizon) {
      outcome = 1.0;  // alive past the horizon
    } else if (events[i] == 1) {
      outcome = 0.0;  // event on or before the horizon
    } else if (times[i] == horizon) {
      outcome = 1.0;  // censored exactly at the horizon: status known
    } else {
      continue;  // censored earlier: status at the horizon unknown
    }
    const double d = outcome - surv_prob_at_h[i];
    sum += d * d;
    ++used;
  }
  if (used == 0) throw EvalError("brier: no usable subjects at this horizon");
  return sum / static_cast<double>(used);
}

double median_event_time(const std::vector<double>& times, const std::vector<int>& events) {
  if (times.size() != events.size())
    throw DimensionError("median_event_time: input length mismatch");
  std::vector<double> et;
  for (size_t i = 0; i < times.size(); ++i)
    if (events[i] == 1) et.push_back(times[i]);
  if (et.empty()) throw EvalError("median_event_time: no events observed");
  std::sort(et.begin(), et.end());
  const size_t m = et.size() / 2;
  return et.size() % 2 == 1 ? et[m] : 0.5 * (et[m - 1] + et[m]);
}

void MetricReport::validate() const {
  for (const auto& [name, v] : values) {
    if (!std::isfinite(v)) throw EvalError("metric " + name + " is not finite");
    if (v < 0.0 || v > 1.0) throw EvalError("metric " + name + " is outside [0,1]");
  }
}

std::string MetricReport::to_json() const {
  json j;
  j["task"] = task;
  j["values"] = json::object();
  for (const auto& [name, v] : values) j["values"][name] = v;
  j["counts"] = json::object();
  for (const auto& [name, v] : counts) j["counts"][name] = v;
  return j.dump(2);
}

std::string MetricReport::to_csv() const {
  std::ostringstream header, row;
  header << "task";
  row << task;
  for (const auto& [name, v] : values) {
    header << "," << name;
    row << "," << fmt_g17(v);
  }
  for (const auto& [name, v] : counts) {
    header << "," << name;
    row << "," << v;
  }
  return header.str() + "\n" + row.str() + "\n";
}

MetricReport classification_report(const Tensor& scores, const Tensor& truth) {
  if (scores.rank() != 2 || scores.shape() != truth.shape())
    throw DimensionError("classification_report: want matching [N x K] matrices");
  // binary predictions use a strict threshold: probability 0.5 maps to negative
  std::vector<double> hard(scores.data().size());
  for (size_t i = 0; i < hard.size(); ++i) hard[i] = scores.data()[i] > 0.5 ? 1.0 : 0.0;
  Tensor pred = Tensor::from(scores.shape(), std::move(hard));

  const MacroAuroc roc = macro_auroc(scores, truth);
  const F1Acc fa = multilabel_f1_acc(pred, truth);

  MetricReport rep;
  rep.task = "classification";
  rep.values["accuracy"] = fa.accuracy;
  rep.values["auroc_macro"] = roc.value;
  rep.values["f1_macro"] = fa.f1_macro;
  rep.counts["n_samples"] = scores.dim(0);
  rep.counts["n_labels"] = scores.dim(1);
  rep.counts["skipped_labels"] = roc.skipped_labels;
  rep.validate();
  return rep;
}

MetricReport segmentation_report(const std::vector<std::vector<int64_t>>& pred,
                                 const std::vector<std::vector<int64_t>>& truth,
                                 double rate_hz, double window_ms) {
  if (pred.size() != truth.size())
    throw DimensionError("segmentation_report: record count mismatch");
  if (pred.empty()) throw EvalError("segmentation_report: no records");
  int64_t tp = 0, n_pred = 0, n_truth = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    tp += rpeak_metrics(pred[i], truth[i], rate_hz, window_ms).matched;
    n_pred += static_cast<int64_t>(pred[i].size());
    n_truth += static_cast<int64_t>(truth[i].size());
  }

  MetricReport rep;
  rep.task = "segmentation";
  const bool both_empty = n_pred == 0 && n_truth == 0;
  rep.values["sensitivity"] =
      n_truth > 0 ? static_cast<double>(tp) / static_cast<double>(n_truth) : (both_empty ? 1.0 : 0.0);
  rep.values["ppv"] =
      n_pred > 0 ? static_cast<double>(tp) / static_cast<double>(n_pred) : (both_empty ? 1.0 : 0.0);
  const double se = rep.values["sensitivity"], ppv = rep.values["ppv"];
  rep.values["f1"] = (se + ppv) > 0.0 ? 2.0 * se * ppv / (se + ppv) : 0.0;
  rep.counts["n_records"] = static_cast<int64_t>(pred.size());
  rep.counts["n_matched"] = tp;
  rep.counts["n_pred"] = n_pred;
  rep.counts["n_truth"] = n_truth;
  rep.validate();
  return rep;
}

MetricReport survival_report(const std::vector<double>& risks,
                             const std::vector<double>& surv_prob_at_h,
                             const std::vector<double>& times, const std::vector<int>& events,
                             double horizon) {
  const CIndexScore ci = c_index(times, events, risks);
  const double bs = brier(surv_prob_at_h, times, events, horizon);

  MetricReport rep;
  rep.task = "forecasting";
  rep.values["c_index"] = ci.value;
  rep.values["brier"] = bs;
  rep.counts["n_samples"] = static_cast<int64_t>(times.size());
  rep.counts["n_events"] =
      static_cast<int64_t>(std::count(events.begin(), events.end(), 1));
  rep.counts["comparable_pairs"] = ci.comparable;
  rep.validate();
  return rep;
}

}  // namespace least
