#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "least/tensor.hpp"

namespace least {

// Mann-Whitney AUROC: (concordant + 0.5*tied) / (positives*negatives),
// computed from average ranks. Single-class input is an EvalError.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

struct MacroAuroc {
  double value = 0.0;
  int64_t used_labels = 0;
  int64_t skipped_labels = 0;  // columns with only one class
};

// scores and truth are [N x K]; single-class columns are skipped and counted,
// all-skipped raises EvalError.
MacroAuroc macro_auroc(const Tensor& scores, const Tensor& truth);

struct F1Acc {
  double accuracy = 0.0;
  double f1_macro = 0.0;
};

// pred and truth are binary [N x K]. Accuracy is the element-wise agreement
// fraction; macro F1 averages per-label F1 with the empty-label convention
// F1 = 0 when a label has no positives anywhere.
F1Acc multilabel_f1_acc(const Tensor& pred, const Tensor& truth);

struct RPeakScore {
  double se = 0.0, ppv = 0.0, f1 = 0.0;
  int64_t matched = 0;
};

// Greedy one-to-one matching in truth order; each entry is a (pred position,
// truth position) pair into the input lists.
std::vector<std::pair<size_t, size_t>> match_rpeaks(const std::vector<int64_t>& pred,
                                                    const std::vector<int64_t>& truth,
                                                    double rate_hz, double window_ms = 75.0);

// Greedy one-to-one matching in truth order: nearest unmatched prediction
// within window_ms, distance ties to the earlier prediction. The optimal flag
// switches to a maximum-cardinality two-pointer matcher for comparison.
RPeakScore rpeak_metrics(const std::vector<int64_t>& pred, const std::vector<int64_t>& truth,
                         double rate_hz, double window_ms = 75.0, bool optimal = false);

struct CIndexScore {
  double value = 0.0;
  int64_t comparable = 0;
};

// Harrell's C over pairs with times[i] < times[j] and events[i] = 1; risk
// ties score 0.5. Zero comparable pairs is an EvalError.
CIndexScore c_index(const std::vector<double>& times, const std::vector<int>& events,
                    const std::vector<double>& risks);

// Mean squared error between survival probability at the horizon and the
// observed alive-past-horizon outcome; subjects censored before the horizon
// are excluded (unweighted, no censoring reweighting).
double brier(const std::vector<double>& surv_prob_at_h, const std::vector<double>& times,
             const std::vector<int>& events, double horizon);

// Median of the observed event times (EvalError when no events); the default
// Brier horizon.
double median_event_time(const std::vector<double>& times, const std::vector<int>& events);

struct MetricReport {
  std::string task;
  std::map<std::string, double> values;
  std::map<std::string, int64_t> counts;

  void validate() const;  // every value finite and inside [0,1]
  std::string to_json() const;
  std::string to_csv() const;  // header line + one value row
};

// Report assembly per task; value key sets are fixed per kind.
MetricReport classification_report(const Tensor& scores, const Tensor& truth);
MetricReport segmentation_report(const std::vector<std::vector<int64_t>>& pred,
                                 const std::vector<std::vector<int64_t>>& truth,
                                 double rate_hz, double window_ms = 75.0);
MetricReport survival_report(const std::vector<double>& risks,
                             const std::vector<double>& surv_prob_at_h,
                             const std::vector<double>& times, const std::vector<int>& events,
                             double horizon);

}  // namespace least
