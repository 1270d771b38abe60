#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "least/dataio.hpp"
#include "least/downstream.hpp"
#include "least/model.hpp"
#include "least/tensor.hpp"

namespace least {

struct OptimConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
};

struct ScheduleConfig {
  double base_lr = 0.001;
  double warmup_epochs = 5.0;
  double total_epochs = 50.0;
  double min_lr = 0.0;
  void validate() const;
};

// Linear warmup 0 -> base_lr over warmup_epochs, then cosine to min_lr at
// total_epochs. epoch_fraction is clamped into [0, total_epochs].
double lr_at(double epoch_fraction, const ScheduleConfig& cfg);

// Decoupled-weight-decay Adam over a fixed parameter list. Parameters whose
// gradient was never materialized are skipped entirely (no decay).
class AdamW {
public:
  AdamW(std::vector<std::pair<std::string, Tensor>> params, OptimConfig cfg);

  void step();
  void zero_grad();
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  int64_t steps() const { return t_; }
  const OptimConfig& config() const { return cfg_; }

private:
  std::vector<std::pair<std::string, Tensor>> params_;
  OptimConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

struct TrainConfig {
  int64_t batch_size = 16;
  int64_t epochs = 50;
  ScheduleConfig schedule;
  OptimConfig optim;
  int64_t checkpoint_every = 0;  // epochs between snapshots; 0 keeps final only
};

struct TraceRow {
  int64_t epoch = 0;
  double loss = 0.0;
  double loss_ssl = 0.0;
  double loss_multi = 0.0;
  double lr = 0.0;
};

void write_pretrain_trace(const std::string& path, const std::vector<TraceRow>& rows);
void write_finetune_trace(const std::string& path, const std::vector<TraceRow>& rows);

struct PretrainResult {
  std::vector<TraceRow> trace;
  std::string checkpoint_stem;  // final snapshot
  std::string trace_path;
};

// Masked-autoencoder pretraining over one dataset split. seed determines the
// model init, the shuffle order and the per-sample masks; two runs with equal
// inputs produce bitwise-identical traces and checkpoints.
PretrainResult pretrain(const Dataset& ds, const std::string& split, const ModelConfig& mcfg,
                        const TrainConfig& tcfg, uint64_t seed, const std::string& out_dir);

enum class FinetuneMode { kFull, kLinearProbe };

struct FinetuneResult {
  std::vector<TraceRow> trace;
  std::string model_stem;
  std::string head_stem;
  std::string trace_path;
  int64_t skipped_batches = 0;  // survival batches without events
};

// Supervised training of a task head (and, in full mode, the encoder) from an
// already-constructed model. No masking is applied; linear probing freezes
// every pretrained parameter by keeping the encoder out of the tape.
FinetuneResult finetune_model(LeastModel& model, TaskKind task, FinetuneMode mode,
                              const Dataset& ds, const std::string& split,
                              const TrainConfig& tcfg, uint64_t seed,
                              const std::string& out_dir,
                              PoolKind pool = PoolKind::kMean);

// Convenience wrapper: load the checkpoint, then finetune_model.
FinetuneResult finetune(const std::string& checkpoint_stem, TaskKind task, FinetuneMode mode,
                        const Dataset& ds, const std::string& split, const TrainConfig& tcfg,
                        uint64_t seed, const std::string& out_dir,
                        PoolKind pool = PoolKind::kMean);

}  // namespace least
