#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <string>

#include "least/downstream.hpp"
#include "least/model.hpp"
#include "least/signal.hpp"
#include "least/train.hpp"

namespace least {

// Everything a command needs, materialized from the flat key/value config.
struct ResolvedConfig {
  PipelineConfig pipeline;
  GeneratorConfig synth;  // mode is assigned per record by cmd_synth
  int64_t synth_count = 0;
  double synth_af_fraction = 0.0;
  double synth_train_fraction = 0.0;

  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig finetune;
  FinetuneMode finetune_mode = FinetuneMode::kFull;
  TaskKind task = TaskKind::kClassification;
  PoolKind pool = PoolKind::kMean;

  RPeakPostConfig rpeak;
  double eval_window_ms = 75.0;
  double brier_horizon_days = 0.0;  // 0 selects the median event time

  std::string data_dir, train_split, eval_split;
  std::string checkpoint, head;
  std::string attribute_record;
  int64_t attribute_target = 0;

  uint64_t seed_synth = 0, seed_pretrain = 0, seed_finetune = 0;
};

// Flat `section.key = value` configuration. Every key exists with a default;
// unknown keys are rejected. resolve() parses and validates everything at
// once, reporting all failures in a single ConfigError, and canonicalizes the
// stored values so dump() echoes the effective configuration (which can be
// fed back in to reproduce the run).
class RunConfig {
public:
  RunConfig();
  static RunConfig from_file(const std::string& path);

  void set(const std::string& key, const std::string& value);
  void apply_assignment(const std::string& key_equals_value);  // "a.b=c"
  void apply_seed(uint64_t seed);                              // all seed.* keys
  const std::string& get(const std::string& key) const;

  ResolvedConfig resolve();
  std::string dump() const;

private:
  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

// Commands print one JSON summary object to `out`; everything else lands in
// files under out_dir. Failures throw (the CLI wrapper maps them to stderr
// plus a nonzero exit).
void cmd_synth(RunConfig& cfg, const std::string& out_dir, std::ostream& out);
void cmd_preprocess(RunConfig& cfg, const std::string& out_dir, std::ostream& out);
void cmd_pretrain(RunConfig& cfg, const std::string& out_dir, std::ostream& out);
void cmd_finetune(RunConfig& cfg, const std::string& out_dir, std::ostream& out);
void cmd_probe(RunConfig& cfg, const std::string& out_dir, std::ostream& out);
void cmd_eval(RunConfig& cfg, const std::string& out_dir, std::ostream& out);
void cmd_attribute(RunConfig& cfg, const std::string& out_dir, std::ostream& out);

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace least
