#include "least/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "least/error.hpp"
#include "least/ops.hpp"
#include "least/rng.hpp"

namespace least {

namespace {

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_trace(const std::string& path, const std::string& header,
                 const std::vector<TraceRow>& rows, bool with_parts) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write trace file " + path);
  out << header << "\n";
  for (const auto& r : rows) {
    out << r.epoch << "," << fmt_g17(r.loss) << ",";
    if (with_parts) out << fmt_g17(r.loss_ssl) << "," << fmt_g17(r.loss_multi) << ",";
    out << fmt_g17(r.lr) << "\n";
  }
  if (!out) throw IoError("short write on trace file " + path);
}

void check_train_config(const TrainConfig& tcfg) {
  tcfg.schedule.validate();
  if (tcfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (tcfg.epochs <= 0) throw ConfigError("epochs must be positive");
  if (tcfg.checkpoint_every < 0) throw ConfigError("checkpoint_every must be nonnegative");
  if (tcfg.optim.clip_norm < 0) throw ConfigError("clip_norm must be nonnegative");
}

void check_geometry(const Tensor& signals, const ModelConfig& cfg) {
  if (signals.dim(1) != cfg.lead_count || signals.dim(2) != cfg.input_len)
    throw ConfigError("record geometry " + std::to_string(signals.dim(1)) + "x" +
                      std::to_string(signals.dim(2)) + " does not match model config " +
                      std::to_string(cfg.lead_count) + "x" + std::to_string(cfg.input_len));
}

Tensor batch_segmentation_targets(const Batch& b, int64_t total) {
  std::vector<double> data;
  data.reserve(b.r_peaks.size() * static_cast<size_t>(total));
  for (const auto& peaks : b.r_peaks) {
    auto row = segmentation_target(peaks, total);
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor::from({static_cast<int64_t>(b.r_peaks.size()), total}, std::move(data));
}

}  // namespace

void ScheduleConfig::validate() const {
  if (!(base_lr > 0.0)) throw ConfigError("schedule base_lr must be positive");
  if (min_lr < 0.0) throw ConfigError("schedule min_lr must be nonnegative");
  if (min_lr > base_lr) throw ConfigError("schedule min_lr exceeds base_lr");
  if (warmup_epochs < 0.0) throw ConfigError("schedule warmup_epochs must be nonnegative");
  if (!(total_epochs > 0.0)) throw ConfigError("schedule total_epochs must be positive");
  if (warmup_epochs > total_epochs)
    throw ConfigError("schedule warmup_epochs exceeds total_epochs");
}

double lr_at(double epoch_fraction, const ScheduleConfig& cfg) {
  cfg.validate();
  const double f = std::clamp(epoch_fraction, 0.0, cfg.total_epochs);
  if (f < cfg.warmup_epochs) return cfg.base_lr * (f / cfg.warmup_epochs);
  const double span = cfg.total_epochs - cfg.warmup_epochs;
  if (span <= 0.0) return cfg.base_lr;
  const double x = (f - cfg.warmup_epochs) / span;
  return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * x));
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, OptimConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr >= 0.0)) throw ConfigError("optimizer lr must be nonnegative");
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0) throw ConfigError("beta1 must lie in [0,1)");
  if (cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0) throw ConfigError("beta2 must lie in [0,1)");
  if (!(cfg_.eps > 0.0)) throw ConfigError("optimizer eps must be positive");
  if (cfg_.weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].second.numel(), 0.0);
    v_[i].assign(params_[i].second.numel(), 0.0);
  }
}

void AdamW::step() {
  // Parameters whose grad was never materialized this step are left alone, so
  // disabled branches neither move nor decay.
  std::vector<size_t> active;
  for (size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    for (double g : p.grad()) {
      if (!std::isfinite(g))
        throw NumericError("non-finite gradient for parameter " + params_[i].first);
    }
    active.push_back(i);
  }

  if (cfg_.clip_norm > 0.0) {
    double sq = 0.0;
    for (size_t i : active)
      for (double g : params_[i].second.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) {
      const double scale = cfg_.clip_norm / norm;
      for (size_t i : active)
        for (double& g : params_[i].second.raw_grad()) g *= scale;
    }
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i : active) {
    auto& p = params_[i].second.raw_data();
    const auto& g = params_[i].second.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      p[k] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * p[k]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& np : params_) np.second.raw_grad().clear();
}

void write_pretrain_trace(const std::string& path, const std::vector<TraceRow>& rows) {
  write_trace(path, "epoch,loss,loss_ssl,loss_multi,lr", rows, true);
}

void write_finetune_trace(const std::string& path, const std::vector<TraceRow>& rows) {
  write_trace(path, "epoch,loss,lr", rows, false);
}

PretrainResult pretrain(const Dataset& ds, const std::string& split, const ModelConfig& mcfg,
                        const TrainConfig& tcfg, uint64_t seed, const std::string& out_dir) {
  mcfg.validate();
  check_train_config(tcfg);
  std::filesystem::create_directories(out_dir);

  LeastModel model(mcfg, seed);
  AdamW opt(model.parameters(), tcfg.optim);
  const uint64_t shuffle_seed = Rng::mix(seed, 1);
  const uint64_t mask_base = Rng::mix(seed, 2);

  PretrainResult res;
  for (int64_t e = 1; e <= tcfg.epochs; ++e) {
    auto batches = iterate_batches(ds, split, tcfg.batch_size, shuffle_seed, e);
    if (batches.empty()) throw ConfigError("split '" + split + "' has no records");
    const uint64_t mask_seed = Rng::mix(mask_base, static_cast<uint64_t>(e));
    const double steps = static_cast<double>(batches.size());
    double sum_total = 0.0, sum_ssl = 0.0, sum_multi = 0.0;
    int64_t seen = 0;
    uint64_t sample_base = 0;
    for (size_t i = 0; i < batches.size(); ++i) {
      const Batch& b = batches[i];
      check_geometry(b.signals, mcfg);
      const int64_t bs = b.signals.dim(0);
      opt.set_lr(lr_at(static_cast<double>(e - 1) + static_cast<double>(i) / steps,
                       tcfg.schedule));
      Tape tape;
      Tape::Scope scope(tape);
      PretrainLosses l = pretrain_forward(model, b.signals, mask_seed, sample_base);
      tape.backward(l.total);
      opt.step();
      opt.zero_grad();
      sum_total += l.total.item() * static_cast<double>(bs);
      sum_ssl += l.ssl.item() * static_cast<double>(bs);
      sum_multi += (l.multi.defined() ? l.multi.item() : 0.0) * static_cast<double>(bs);
      seen += bs;
      sample_base += static_cast<uint64_t>(bs);
    }
    TraceRow row;
    row.epoch = e;
    row.loss = sum_total / static_cast<double>(seen);
    row.loss_ssl = sum_ssl / static_cast<double>(seen);
    row.loss_multi = sum_multi / static_cast<double>(seen);
    row.lr = lr_at(static_cast<double>(e - 1), tcfg.schedule);
    res.trace.push_back(row);
    if (tcfg.checkpoint_every > 0 && e % tcfg.checkpoint_every == 0)
      save_checkpoint(model, out_dir + "/checkpoint_epoch" + std::to_string(e));
  }
  res.checkpoint_stem = out_dir + "/checkpoint_final";
  save_checkpoint(model, res.checkpoint_stem);
  res.trace_path = out_dir + "/pretrain_trace.csv";
  write_pretrain_trace(res.trace_path, res.trace);
  return res;
}

FinetuneResult finetune_model(LeastModel& model, TaskKind task, FinetuneMode mode,
                              const Dataset& ds, const std::string& split,
                              const TrainConfig& tcfg, uint64_t seed,
                              const std::string& out_dir, PoolKind pool) {
  const ModelConfig& cfg = model.config();
  check_train_config(tcfg);
  std::filesystem::create_directories(out_dir);

  int64_t label_count = 1;
  int64_t upsample = 1;
  if (task == TaskKind::kClassification) {
    label_count = static_cast<int64_t>(ds.manifest.label_names.size());
    if (label_count == 0) throw ConfigError("dataset has no label names for classification");
  } else if (task == TaskKind::kSegmentation) {
    upsample = cfg.patch_span();
  }
  TaskHead head = make_head(task, cfg.embed_dim, label_count, upsample, Rng::mix(seed, 3), pool);

  auto opt_params = head.parameters();
  if (mode == FinetuneMode::kFull)
    for (const auto& np : model.parameters()) opt_params.push_back(np);
  AdamW opt(std::move(opt_params), tcfg.optim);
  const uint64_t shuffle_seed = Rng::mix(seed, 1);

  FinetuneResult res;
  for (int64_t e = 1; e <= tcfg.epochs; ++e) {
    auto batches = iterate_batches(ds, split, tcfg.batch_size, shuffle_seed, e);
    if (batches.empty()) throw ConfigError("split '" + split + "' has no records");
    const double steps = static_cast<double>(batches.size());
    double sum_loss = 0.0;
    int64_t seen = 0;
    for (size_t i = 0; i < batches.size(); ++i) {
      const Batch& b = batches[i];
      check_geometry(b.signals, cfg);
      const int64_t bs = b.signals.dim(0);
      opt.set_lr(lr_at(static_cast<double>(e - 1) + static_cast<double>(i) / steps,
                       tcfg.schedule));

      // Probe mode encodes outside the tape: the outputs are constants, no
      // gradient ever reaches a pretrained parameter.
      Tensor frozen;
      if (mode == FinetuneMode::kLinearProbe) frozen = encode_all(model, b.signals);

      Tape tape;
      Tape::Scope scope(tape);
      Tensor tokens = mode == FinetuneMode::kLinearProbe ? frozen : encode_all(model, b.signals);
      Tensor loss;
      if (task == TaskKind::kClassification) {
        if (!b.has_labels)
          throw ConfigError("classification requires a label vector on every record");
        loss = bce_with_logits(classify_logits(tokens, bs, head), b.labels);
      } else if (task == TaskKind::kSegmentation) {
        if (!b.has_r_peaks)
          throw ConfigError("segmentation requires r-peak annotations on every record");
        loss = bce_with_logits(segment_logits(tokens, bs, head),
                               batch_segmentation_targets(b, cfg.input_len));
      } else {
        if (!b.has_survival)
          throw ConfigError("forecasting requires survival annotations on every record");
        Tensor risks = survival_risk(tokens, bs, head);
        try {
          loss = cox_loss(risks, b.survival_times, b.survival_events);
        } catch (const EvalError&) {
          ++res.skipped_batches;  // all-censored batch carries no signal
          continue;
        }
      }
      tape.backward(loss);
      opt.step();
      opt.zero_grad();
      sum_loss += loss.item() * static_cast<double>(bs);
      seen += bs;
    }
    TraceRow row;
    row.epoch = e;
    row.loss = seen > 0 ? sum_loss / static_cast<double>(seen) : 0.0;
    row.lr = lr_at(static_cast<double>(e - 1), tcfg.schedule);
    res.trace.push_back(row);
  }

  res.model_stem = out_dir + "/model_final";
  res.head_stem = out_dir + "/head_final";
  save_checkpoint(model, res.model_stem);
  save_head(head, res.head_stem);
  res.trace_path = out_dir + "/finetune_trace.csv";
  write_finetune_trace(res.trace_path, res.trace);
  return res;
}

FinetuneResult finetune(const std::string& checkpoint_stem, TaskKind task, FinetuneMode mode,
                        const Dataset& ds, const std::string& split, const TrainConfig& tcfg,
                        uint64_t seed, const std::string& out_dir, PoolKind pool) {
  LeastModel model = load_checkpoint(checkpoint_stem);
  return finetune_model(model, task, mode, ds, split, tcfg, seed, out_dir, pool);
}

}  // namespace least
