#include "least/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "least/dataio.hpp"
#include "least/error.hpp"
#include "least/metrics.hpp"
#include "least/ops.hpp"
#include "least/rng.hpp"

namespace least {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  const char* ws = " \t\r\n";
  const size_t a = s.find_first_not_of(ws);
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(ws);
  return s.substr(a, b - a + 1);
}

const std::map<std::string, std::string>& default_values() {
  static const std::map<std::string, std::string> defaults = {
      {"data.dir", "data"},
      {"data.train_split", "train"},
      {"data.eval_split", "eval"},

      {"synth.count", "256"},
      {"synth.af_fraction", "0.5"},
      {"synth.train_fraction", "0.8"},
      {"synth.rate_hz", "100"},
      {"synth.duration_s", "10"},
      {"synth.mean_hr_bpm", "70"},
      {"synth.rr_jitter_s", "0.02"},
      {"synth.af_jitter_multiplier", "4"},
      {"synth.noise_sigma", "0.01"},
      {"synth.lead_gain_spread", "0.15"},
      {"synth.hr_spread_bpm", "10"},

      {"preprocess.target_hz", "100"},
      {"preprocess.segment_seconds", "10"},
      {"preprocess.nan_fraction_limit", "0.05"},
      {"preprocess.band_low_hz", "0.5"},
      {"preprocess.band_high_hz", "45"},
      {"preprocess.filter_order", "3"},

      {"model.preset", "tiny"},
      {"model.lead_count", "12"},
      {"model.input_len", "1000"},
      {"model.embed_dim", "64"},
      {"model.patch_count", "125"},
      {"model.encoder_blocks", "4"},
      {"model.decoder_blocks", "2"},
      {"model.decoder_dim", "64"},
      {"model.heads_attn", "4"},
      {"model.filter_heads", "4"},
      {"model.mask_ratio", "0.75"},
      {"model.proto_dim", "32"},
      {"model.ffn_ratio", "2"},
      {"model.prototype_mode", "per_sample"},
      {"model.tff_enabled", "true"},
      {"model.mgpr_enabled", "true"},
      {"model.per_block_projections", "false"},

      {"train.batch_size", "16"},
      {"train.epochs", "50"},
      {"train.base_lr", "0.001"},
      {"train.warmup_epochs", "5"},
      {"train.min_lr", "0"},
      {"train.weight_decay", "0.05"},
      {"train.clip_norm", "0"},
      {"train.checkpoint_every", "0"},

      {"finetune.batch_size", "16"},
      {"finetune.epochs", "30"},
      {"finetune.base_lr", "0.001"},
      {"finetune.warmup_epochs", "3"},
      {"finetune.min_lr", "0"},
      {"finetune.weight_decay", "0.05"},
      {"finetune.clip_norm", "0"},
      {"finetune.mode", "full"},

      {"task.kind", "classification"},
      {"task.pool", "mean"},

      {"eval.window_ms", "75"},
      {"eval.brier_horizon_days", "0"},
      {"eval.min_prominence", "0.1"},
      {"eval.refractory_ms", "200"},
      {"eval.max_qrs_ms", "120"},

      {"paths.checkpoint", ""},
      {"paths.head", ""},

      {"attribute.record_id", ""},
      {"attribute.target", "0"},

      {"seed.synth", "7"},
      {"seed.pretrain", "42"},
      {"seed.finetune", "9"},
  };
  return defaults;
}

// Typed accessors over the raw string map; failures land in errs instead of
// throwing so resolve() can report every problem at once.
struct KeyParser {
  const std::map<std::string, std::string>& values;
  std::vector<std::string>& errs;

  int64_t i64(const std::string& key) {
    const std::string& s = values.at(key);
    try {
      size_t pos = 0;
      const long long x = std::stoll(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("trailing characters");
      return x;
    } catch (const std::exception&) {
      errs.push_back(key + ": expected an integer, got '" + s + "'");
      return 0;
    }
  }

  uint64_t u64(const std::string& key) {
    const std::string& s = values.at(key);
    try {
      if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
      size_t pos = 0;
      const unsigned long long x = std::stoull(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("trailing characters");
      return x;
    } catch (const std::exception&) {
      errs.push_back(key + ": expected an unsigned integer, got '" + s + "'");
      return 0;
    }
  }

  double f64(const std::string& key) {
    const std::string& s = values.at(key);
    try {
      size_t pos = 0;
      const double x = std::stod(s, &pos);
      if (pos != s.size()) throw std::invalid_argument("trailing characters");
      if (!std::isfinite(x)) throw std::invalid_argument("not finite");
      return x;
    } catch (const std::exception&) {
      errs.push_back(key + ": expected a finite number, got '" + s + "'");
      return 0.0;
    }
  }

  bool flag(const std::string& key) {
    const std::string& s = values.at(key);
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    errs.push_back(key + ": expected true or false, got '" + s + "'");
    return false;
  }
};

Dataset load_dataset_checked(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.json"))
    throw ConfigError("dataset path does not exist: " + dir);
  return load_dataset(dir);
}

void write_resolved(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  const std::string path = (fs::path(out_dir) / "resolved.cfg").string();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f << cfg.dump();
}

void require_stem(const std::string& what, const std::string& key, const std::string& stem) {
  if (stem.empty()) throw ConfigError(key + " is required for this command");
  if (!fs::exists(stem + ".json")) throw ConfigError(what + " does not exist: " + stem);
}

const std::vector<std::string>& split_ids(const Dataset& ds, const std::string& name,
                                          const std::string& dir) {
  auto it = ds.manifest.split.find(name);
  if (it == ds.manifest.split.end() || it->second.empty())
    throw ConfigError("split '" + name + "' is empty or missing in " + dir);
  return it->second;
}

}  // namespace

RunConfig::RunConfig() : values_(default_values()) {}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file " + path);
  RunConfig cfg;
  std::vector<std::string> errs;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      errs.push_back(path + ":" + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    try {
      cfg.set(key, value);
    } catch (const ConfigError& e) {
      errs.push_back(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!errs.empty()) {
    std::string msg = "config errors:";
    for (const std::string& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  it->second = value;
  explicit_.insert(key);
}

void RunConfig::apply_assignment(const std::string& key_equals_value) {
  const size_t eq = key_equals_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("expected section.key=value, got '" + key_equals_value + "'");
  set(trim(key_equals_value.substr(0, eq)), trim(key_equals_value.substr(eq + 1)));
}

void RunConfig::apply_seed(uint64_t seed) {
  const std::string s = std::to_string(seed);
  set("seed.synth", s);
  set("seed.pretrain", s);
  set("seed.finetune", s);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key: " + key);
  return it->second;
}

std::string RunConfig::dump() const {
  std::ostringstream out;
  for (const auto& [key, value] : values_) out << key << " = " << value << "\n";
  return out.str();
}

ResolvedConfig RunConfig::resolve() {
  std::vector<std::string> errs;
  KeyParser p{values_, errs};
  ResolvedConfig r;

  r.data_dir = values_.at("data.dir");
  r.train_split = values_.at("data.train_split");
  r.eval_split = values_.at("data.eval_split");
  if (r.data_dir.empty()) errs.push_back("data.dir must not be empty");
  if (r.train_split.empty()) errs.push_back("data.train_split must not be empty");
  if (r.eval_split.empty()) errs.push_back("data.eval_split must not be empty");

  r.synth_count = p.i64("synth.count");
  r.synth_af_fraction = p.f64("synth.af_fraction");
  r.synth_train_fraction = p.f64("synth.train_fraction");
  if (r.synth_count < 1) errs.push_back("synth.count must be at least 1");
  if (!(r.synth_af_fraction >= 0.0 && r.synth_af_fraction <= 1.0))
    errs.push_back("synth.af_fraction must lie in [0, 1]");
  if (!(r.synth_train_fraction > 0.0 && r.synth_train_fraction <= 1.0))
    errs.push_back("synth.train_fraction must lie in (0, 1]");
  r.synth.rate_hz = p.f64("synth.rate_hz");
  r.synth.duration_s = p.f64("synth.duration_s");
  r.synth.mean_hr_bpm = p.f64("synth.mean_hr_bpm");
  r.synth.rr_jitter_s = p.f64("synth.rr_jitter_s");
  r.synth.af_jitter_multiplier = p.f64("synth.af_jitter_multiplier");
  r.synth.noise_sigma = p.f64("synth.noise_sigma");
  r.synth.lead_gain_spread = p.f64("synth.lead_gain_spread");
  r.synth.hr_spread_bpm = p.f64("synth.hr_spread_bpm");
  try {
    r.synth.validate();
  } catch (const Error& e) {
    errs.push_back(e.what());
  }

  r.pipeline.target_hz = p.f64("preprocess.target_hz");
  r.pipeline.segment_seconds = p.f64("preprocess.segment_seconds");
  r.pipeline.nan_fraction_limit = p.f64("preprocess.nan_fraction_limit");
  r.pipeline.band_low_hz = p.f64("preprocess.band_low_hz");
  r.pipeline.band_high_hz = p.f64("preprocess.band_high_hz");
  r.pipeline.filter_order = static_cast<int>(p.i64("preprocess.filter_order"));
  try {
    r.pipeline.validate();
  } catch (const Error& e) {
    errs.push_back(e.what());
  }

  const std::string preset = values_.at("model.preset");
  if (preset == "paper_default") {
    r.model = ModelConfig::paper_default();
  } else if (preset == "tiny") {
    r.model = ModelConfig::tiny();
  } else if (preset == "miniature") {
    r.model = ModelConfig::miniature();
  } else {
    errs.push_back("model.preset: unknown preset '" + preset +
                   "' (expected paper_default, tiny, or miniature)");
  }
  auto override_i = [&](const char* key, int64_t& field) {
    if (explicit_.count(key)) field = p.i64(key);
  };
  override_i("model.lead_count", r.model.lead_count);
  override_i("model.input_len", r.model.input_len);
  override_i("model.embed_dim", r.model.embed_dim);
  override_i("model.patch_count", r.model.patch_count);
  override_i("model.encoder_blocks", r.model.encoder_blocks);
  override_i("model.decoder_blocks", r.model.decoder_blocks);
  override_i("model.decoder_dim", r.model.decoder_dim);
  override_i("model.heads_attn", r.model.heads_attn);
  override_i("model.filter_heads", r.model.filter_heads);
  override_i("model.proto_dim", r.model.proto_dim);
  override_i("model.ffn_ratio", r.model.ffn_ratio);
  if (explicit_.count("model.mask_ratio")) r.model.mask_ratio = p.f64("model.mask_ratio");
  if (explicit_.count("model.tff_enabled")) r.model.tff_enabled = p.flag("model.tff_enabled");
  if (explicit_.count("model.mgpr_enabled")) r.model.mgpr_enabled = p.flag("model.mgpr_enabled");
  if (explicit_.count("model.per_block_projections"))
    r.model.per_block_projections = p.flag("model.per_block_projections");
  if (explicit_.count("model.prototype_mode")) {
    const std::string& m = values_.at("model.prototype_mode");
    if (m == "per_sample") {
      r.model.prototype_mode = PrototypeMode::kPerSample;
    } else if (m == "batch_level") {
      r.model.prototype_mode = PrototypeMode::kBatchLevel;
    } else {
      errs.push_back("model.prototype_mode: expected per_sample or batch_level, got '" + m + "'");
    }
  }
  if (explicit_.count("model.encoder_blocks") || explicit_.count("model.decoder_blocks")) {
    try {
      r.model.pairing = default_pairing(static_cast<int>(r.model.encoder_blocks),
                                        static_cast<int>(r.model.decoder_blocks));
    } catch (const Error& e) {
      errs.push_back(e.what());
    }
  }
  try {
    r.model.validate();
  } catch (const Error& e) {
    errs.push_back(e.what());
  }

  auto fill_train = [&](TrainConfig& t, const std::string& sec) {
    t.batch_size = p.i64(sec + ".batch_size");
    t.epochs = p.i64(sec + ".epochs");
    t.schedule.base_lr = p.f64(sec + ".base_lr");
    t.schedule.warmup_epochs = p.f64(sec + ".warmup_epochs");
    t.schedule.min_lr = p.f64(sec + ".min_lr");
    t.schedule.total_epochs = static_cast<double>(t.epochs);
    t.optim.lr = t.schedule.base_lr;
    t.optim.weight_decay = p.f64(sec + ".weight_decay");
    t.optim.clip_norm = p.f64(sec + ".clip_norm");
    if (t.batch_size < 1) errs.push_back(sec + ".batch_size must be at least 1");
    if (t.epochs < 1) errs.push_back(sec + ".epochs must be at least 1");
    if (t.optim.weight_decay < 0) errs.push_back(sec + ".weight_decay must be >= 0");
    if (t.optim.clip_norm < 0) errs.push_back(sec + ".clip_norm must be >= 0");
    try {
      t.schedule.validate();
    } catch (const Error& e) {
      errs.push_back(sec + ": " + e.what());
    }
  };
  fill_train(r.pretrain, "train");
  r.pretrain.checkpoint_every = p.i64("train.checkpoint_every");
  if (r.pretrain.checkpoint_every < 0) errs.push_back("train.checkpoint_every must be >= 0");
  fill_train(r.finetune, "finetune");

  const std::string& mode = values_.at("finetune.mode");
  if (mode == "full") {
    r.finetune_mode = FinetuneMode::kFull;
  } else if (mode == "linear_probe") {
    r.finetune_mode = FinetuneMode::kLinearProbe;
  } else {
    errs.push_back("finetune.mode: expected full or linear_probe, got '" + mode + "'");
  }

  try {
    r.task = task_from_name(values_.at("task.kind"));
  } catch (const Error& e) {
    errs.push_back(std::string("task.kind: ") + e.what());
  }
  const std::string& pool = values_.at("task.pool");
  if (pool == "mean") {
    r.pool = PoolKind::kMean;
  } else if (pool == "max") {
    r.pool = PoolKind::kMax;
  } else {
    errs.push_back("task.pool: expected mean or max, got '" + pool + "'");
  }

  r.eval_window_ms = p.f64("eval.window_ms");
  r.brier_horizon_days = p.f64("eval.brier_horizon_days");
  if (r.brier_horizon_days < 0) errs.push_back("eval.brier_horizon_days must be >= 0");
  r.rpeak.min_prominence = p.f64("eval.min_prominence");
  r.rpeak.refractory_ms = p.f64("eval.refractory_ms");
  r.rpeak.max_qrs_ms = p.f64("eval.max_qrs_ms");
  r.rpeak.match_window_ms = r.eval_window_ms;
  try {
    r.rpeak.validate();
  } catch (const Error& e) {
    errs.push_back(std::string("eval: ") + e.what());
  }

  r.checkpoint = values_.at("paths.checkpoint");
  r.head = values_.at("paths.head");
  r.attribute_record = values_.at("attribute.record_id");
  r.attribute_target = p.i64("attribute.target");
  if (r.attribute_target < 0) errs.push_back("attribute.target must be >= 0");

  r.seed_synth = p.u64("seed.synth");
  r.seed_pretrain = p.u64("seed.pretrain");
  r.seed_finetune = p.u64("seed.finetune");

  if (!errs.empty()) {
    std::string msg = "config errors:";
    for (const std::string& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }

  // Canonicalize so dump() echoes the effective configuration; feeding the
  // dump back in reproduces this exact resolution.
  auto ci = [&](const std::string& key, int64_t v) { values_[key] = std::to_string(v); };
  auto cf = [&](const std::string& key, double v) { values_[key] = fmt_g17(v); };
  auto cb = [&](const std::string& key, bool v) { values_[key] = v ? "true" : "false"; };
  ci("synth.count", r.synth_count);
  cf("synth.af_fraction", r.synth_af_fraction);
  cf("synth.train_fraction", r.synth_train_fraction);
  cf("synth.rate_hz", r.synth.rate_hz);
  cf("synth.duration_s", r.synth.duration_s);
  cf("synth.mean_hr_bpm", r.synth.mean_hr_bpm);
  cf("synth.rr_jitter_s", r.synth.rr_jitter_s);
  cf("synth.af_jitter_multiplier", r.synth.af_jitter_multiplier);
  cf("synth.noise_sigma", r.synth.noise_sigma);
  cf("synth.lead_gain_spread", r.synth.lead_gain_spread);
  cf("synth.hr_spread_bpm", r.synth.hr_spread_bpm);
  cf("preprocess.target_hz", r.pipeline.target_hz);
  cf("preprocess.segment_seconds", r.pipeline.segment_seconds);
  cf("preprocess.nan_fraction_limit", r.pipeline.nan_fraction_limit);
  cf("preprocess.band_low_hz", r.pipeline.band_low_hz);
  cf("preprocess.band_high_hz", r.pipeline.band_high_hz);
  ci("preprocess.filter_order", r.pipeline.filter_order);
  ci("model.lead_count", r.model.lead_count);
  ci("model.input_len", r.model.input_len);
  ci("model.embed_dim", r.model.embed_dim);
  ci("model.patch_count", r.model.patch_count);
  ci("model.encoder_blocks", r.model.encoder_blocks);
  ci("model.decoder_blocks", r.model.decoder_blocks);
  ci("model.decoder_dim", r.model.decoder_dim);
  ci("model.heads_attn", r.model.heads_attn);
  ci("model.filter_heads", r.model.filter_heads);
  cf("model.mask_ratio", r.model.mask_ratio);
  ci("model.proto_dim", r.model.proto_dim);
  ci("model.ffn_ratio", r.model.ffn_ratio);
  values_["model.prototype_mode"] =
      r.model.prototype_mode == PrototypeMode::kPerSample ? "per_sample" : "batch_level";
  cb("model.tff_enabled", r.model.tff_enabled);
  cb("model.mgpr_enabled", r.model.mgpr_enabled);
  cb("model.per_block_projections", r.model.per_block_projections);
  ci("train.batch_size", r.pretrain.batch_size);
  ci("train.epochs", r.pretrain.epochs);
  cf("train.base_lr", r.pretrain.schedule.base_lr);
  cf("train.warmup_epochs", r.pretrain.schedule.warmup_epochs);
  cf("train.min_lr", r.pretrain.schedule.min_lr);
  cf("train.weight_decay", r.pretrain.optim.weight_decay);
  cf("train.clip_norm", r.pretrain.optim.clip_norm);
  ci("train.checkpoint_every", r.pretrain.checkpoint_every);
  ci("finetune.batch_size", r.finetune.batch_size);
  ci("finetune.epochs", r.finetune.epochs);
  cf("finetune.base_lr", r.finetune.schedule.base_lr);
  cf("finetune.warmup_epochs", r.finetune.schedule.warmup_epochs);
  cf("finetune.min_lr", r.finetune.schedule.min_lr);
  cf("finetune.weight_decay", r.finetune.optim.weight_decay);
  cf("finetune.clip_norm", r.finetune.optim.clip_norm);
  values_["task.kind"] = task_name(r.task);
  cf("eval.window_ms", r.eval_window_ms);
  cf("eval.brier_horizon_days", r.brier_horizon_days);
  cf("eval.min_prominence", r.rpeak.min_prominence);
  cf("eval.refractory_ms", r.rpeak.refractory_ms);
  cf("eval.max_qrs_ms", r.rpeak.max_qrs_ms);
  ci("attribute.target", r.attribute_target);
  values_["seed.synth"] = std::to_string(r.seed_synth);
  values_["seed.pretrain"] = std::to_string(r.seed_pretrain);
  values_["seed.finetune"] = std::to_string(r.seed_finetune);

  return r;
}

void cmd_synth(RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  ResolvedConfig r = cfg.resolve();
  fs::create_directories(out_dir);

  const int64_t af_count = std::llround(static_cast<double>(r.synth_count) * r.synth_af_fraction);
  const int64_t normal_count = r.synth_count - af_count;
  const int64_t train_per_class[2] = {
      std::llround(static_cast<double>(normal_count) * r.synth_train_fraction),
      std::llround(static_cast<double>(af_count) * r.synth_train_fraction)};
  int64_t seen_per_class[2] = {0, 0};

  std::vector<SignalRecord> segments;
  std::map<std::string, std::vector<std::string>> split;
  int64_t rejected = 0;
  int64_t train_records = 0, eval_records = 0;
  for (int64_t i = 0; i < r.synth_count; ++i) {
    const bool af = i >= normal_count;  // class-contiguous, split is stratified below
    GeneratorConfig g = r.synth;
    g.mode = af ? SynthClass::kAfLike : SynthClass::kNormal;
    SignalRecord rec = synth_ecg(g, Rng::mix(r.seed_synth, static_cast<uint64_t>(i)));
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "synth%04lld", static_cast<long long>(i));
    rec.id = idbuf;

    const int cls = af ? 1 : 0;
    const bool to_train = seen_per_class[cls] < train_per_class[cls];
    ++seen_per_class[cls];
    (to_train ? train_records : eval_records) += 1;

    PreprocessResult pre = preprocess(rec, r.pipeline);
    rejected += pre.rejected;
    for (size_t w = 0; w < pre.segments.size(); ++w) {
      SignalRecord seg = std::move(pre.segments[w]);
      if (pre.segments.size() > 1) {
        char sufbuf[16];
        std::snprintf(sufbuf, sizeof sufbuf, "_w%02zu", w);
        seg.id = rec.id + sufbuf;
      } else {
        seg.id = rec.id;
      }
      split[to_train ? r.train_split : r.eval_split].push_back(seg.id);
      segments.push_back(std::move(seg));
    }
  }
  if (segments.empty()) throw EvalError("synthesis produced no accepted segments");

  write_dataset(segments, {"normal", "af_like"}, split, out_dir);
  write_resolved(cfg, out_dir);

  json j;
  j["accepted"] = segments.size();
  j["rejected"] = rejected;
  j["records"] = r.synth_count;
  j["af_records"] = af_count;
  j["train_records"] = train_records;
  j["eval_records"] = eval_records;
  j["dir"] = out_dir;
  out << j.dump(2) << "\n";
}

void cmd_preprocess(RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  ResolvedConfig r = cfg.resolve();
  Dataset ds = load_dataset_checked(r.data_dir);

  std::map<std::string, std::string> split_of;
  for (const auto& [name, ids] : ds.manifest.split)
    for (const std::string& id : ids) split_of[id] = name;

  std::vector<SignalRecord> segments;
  std::map<std::string, std::vector<std::string>> split;
  int64_t rejected = 0;
  for (const SignalRecord& rec : ds.records) {
    PreprocessResult pre = preprocess(rec, r.pipeline);
    rejected += pre.rejected;
    auto sit = split_of.find(rec.id);
    const std::string& dest = sit == split_of.end() ? r.train_split : sit->second;
    for (size_t w = 0; w < pre.segments.size(); ++w) {
      SignalRecord seg = std::move(pre.segments[w]);
      if (pre.segments.size() > 1) {
        char sufbuf[16];
        std::snprintf(sufbuf, sizeof sufbuf, "_w%02zu", w);
        seg.id = rec.id + sufbuf;
      } else {
        seg.id = rec.id;
      }
      split[dest].push_back(seg.id);
      segments.push_back(std::move(seg));
    }
  }
  if (segments.empty()) throw EvalError("preprocessing rejected every record");

  write_dataset(segments, ds.manifest.label_names, split, out_dir);
  write_resolved(cfg, out_dir);

  json j;
  j["accepted"] = segments.size();
  j["rejected"] = rejected;
  j["records_in"] = ds.records.size();
  j["dir"] = out_dir;
  out << j.dump(2) << "\n";
}

void cmd_pretrain(RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  ResolvedConfig r = cfg.resolve();
  Dataset ds = load_dataset_checked(r.data_dir);
  write_resolved(cfg, out_dir);

  PretrainResult res = pretrain(ds, r.train_split, r.model, r.pretrain, r.seed_pretrain, out_dir);

  json j;
  j["checkpoint"] = res.checkpoint_stem;
  j["trace"] = res.trace_path;
  j["epochs"] = res.trace.size();
  j["final_loss"] = res.trace.back().loss;
  out << j.dump(2) << "\n";
}

namespace {

void run_finetune(RunConfig& cfg, const std::string& out_dir, std::ostream& out,
                  std::optional<FinetuneMode> forced) {
  ResolvedConfig r = cfg.resolve();
  Dataset ds = load_dataset_checked(r.data_dir);
  require_stem("checkpoint", "paths.checkpoint", r.checkpoint);
  write_resolved(cfg, out_dir);

  const FinetuneMode mode = forced ? *forced : r.finetune_mode;
  FinetuneResult res = finetune(r.checkpoint, r.task, mode, ds, r.train_split, r.finetune,
                                r.seed_finetune, out_dir, r.pool);

  json j;
  j["model"] = res.model_stem;
  j["head"] = res.head_stem;
  j["trace"] = res.trace_path;
  j["task"] = task_name(r.task);
  j["mode"] = mode == FinetuneMode::kFull ? "full" : "linear_probe";
  j["final_loss"] = res.trace.back().loss;
  j["skipped_batches"] = res.skipped_batches;
  out << j.dump(2) << "\n";
}

}  // namespace

void cmd_finetune(RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  run_finetune(cfg, out_dir, out, std::nullopt);
}

void cmd_probe(RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  run_finetune(cfg, out_dir, out, FinetuneMode::kLinearProbe);
}

void cmd_eval(RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  ResolvedConfig r = cfg.resolve();
  Dataset ds = load_dataset_checked(r.data_dir);
  require_stem("checkpoint", "paths.checkpoint", r.checkpoint);
  require_stem("head", "paths.head", r.head);

  LeastModel model = load_checkpoint(r.checkpoint);
  TaskHead head = load_head(r.head);
  if (head.kind != r.task)
    throw ConfigError("head at " + r.head + " was trained for " + task_name(head.kind) +
                      ", not " + task_name(r.task));
  const ModelConfig& mc = model.config();
  if (head.embed_dim != mc.embed_dim)
    throw ConfigError("head embedding width " + std::to_string(head.embed_dim) +
                      " does not match the checkpoint's " + std::to_string(mc.embed_dim));

  const std::vector<std::string>& ids = split_ids(ds, r.eval_split, r.data_dir);
  fs::create_directories(out_dir);
  write_resolved(cfg, out_dir);

  auto encode_one = [&](const SignalRecord& rec) {
    if (rec.lead_count != mc.lead_count || rec.sample_count != mc.input_len)
      throw DimensionError("record " + rec.id + " is " + std::to_string(rec.lead_count) + "x" +
                           std::to_string(rec.sample_count) + " but the model expects " +
                           std::to_string(mc.lead_count) + "x" + std::to_string(mc.input_len));
    Tensor x = Tensor::from({1, rec.lead_count, rec.sample_count}, rec.leads);
    return encode_all(model, x);
  };

  const std::string pred_path = (fs::path(out_dir) / "predictions.jsonl").string();
  std::ofstream pred(pred_path, std::ios::binary);
  if (!pred) throw IoError("cannot write " + pred_path);

  MetricReport rep;
  if (r.task == TaskKind::kClassification) {
    const int64_t k = head.label_count;
    std::vector<double> scores, truth;
    for (const std::string& id : ids) {
      const SignalRecord& rec = ds.by_id(id);
      if (!rec.label_vector) throw EvalError("record " + id + " has no label vector");
      if (static_cast<int64_t>(rec.label_vector->size()) != k)
        throw DimensionError("record " + id + " has " +
                             std::to_string(rec.label_vector->size()) + " labels, head expects " +
                             std::to_string(k));
      Tensor probs = sigmoid(classify_logits(encode_one(rec), 1, head));
      json pj;
      pj["id"] = id;
      json parr = json::array(), harr = json::array();
      for (int64_t c = 0; c < k; ++c) {
        const double pv = probs.data()[c];
        scores.push_back(pv);
        parr.push_back(pv);
        harr.push_back(pv > 0.5 ? 1 : 0);
      }
      for (int v : *rec.label_vector) truth.push_back(static_cast<double>(v));
      pj["probabilities"] = parr;
      pj["predicted"] = harr;
      pred << pj.dump() << "\n";
    }
    const int64_t n = static_cast<int64_t>(ids.size());
    rep = classification_report(Tensor::from({n, k}, scores), Tensor::from({n, k}, truth));
  } else if (r.task == TaskKind::kSegmentation) {
    std::vector<std::vector<int64_t>> preds, truths;
    double rate = 0.0;
    const std::string peaks_path = (fs::path(out_dir) / "peaks.jsonl").string();
    std::ofstream pk(peaks_path, std::ios::binary);
    if (!pk) throw IoError("cannot write " + peaks_path);
    for (const std::string& id : ids) {
      const SignalRecord& rec = ds.by_id(id);
      if (!rec.r_peaks) throw EvalError("record " + id + " has no annotated peaks");
      if (rate == 0.0) rate = rec.sampling_rate_hz;
      if (rec.sampling_rate_hz != rate)
        throw EvalError("split mixes sampling rates; cannot pool peak metrics");
      Tensor act = segment_activation(encode_one(rec), 1, head);
      std::vector<int64_t> found = detect_rpeaks(act.data(), rate, r.rpeak);
      auto pairs = match_rpeaks(found, *rec.r_peaks, rate, r.eval_window_ms);
      std::vector<bool> pred_hit(found.size(), false), truth_hit(rec.r_peaks->size(), false);
      json matched = json::array();
      for (const auto& [pi, ti] : pairs) {
        pred_hit[pi] = true;
        truth_hit[ti] = true;
        matched.push_back({found[pi], (*rec.r_peaks)[ti]});
      }
      json missed = json::array(), spurious = json::array();
      for (size_t t = 0; t < truth_hit.size(); ++t)
        if (!truth_hit[t]) missed.push_back((*rec.r_peaks)[t]);
      for (size_t q = 0; q < pred_hit.size(); ++q)
        if (!pred_hit[q]) spurious.push_back(found[q]);
      json pj;
      pj["id"] = id;
      pj["pred"] = found;
      pj["matched"] = matched;
      pj["missed"] = missed;
      pj["spurious"] = spurious;
      pk << pj.dump() << "\n";
      pred << pj.dump() << "\n";
      preds.push_back(std::move(found));
      truths.push_back(*rec.r_peaks);
    }
    rep = segmentation_report(preds, truths, rate, r.eval_window_ms);
  } else {
    std::vector<double> risks, times;
    std::vector<int> events;
    for (const std::string& id : ids) {
      const SignalRecord& rec = ds.by_id(id);
      if (!rec.survival) throw EvalError("record " + id + " has no survival outcome");
      risks.push_back(survival_risk(encode_one(rec), 1, head).item());
      times.push_back(rec.survival->time_days);
      events.push_back(rec.survival->event ? 1 : 0);
    }
    // baseline hazard comes from the training split so evaluation never peeks
    std::vector<double> tr_risks, tr_times;
    std::vector<int> tr_events;
    for (const std::string& id : split_ids(ds, r.train_split, r.data_dir)) {
      const SignalRecord& rec = ds.by_id(id);
      if (!rec.survival) throw EvalError("record " + id + " has no survival outcome");
      tr_risks.push_back(survival_risk(encode_one(rec), 1, head).item());
      tr_times.push_back(rec.survival->time_days);
      tr_events.push_back(rec.survival->event ? 1 : 0);
    }
    BaselineHazard base = breslow_baseline(tr_times, tr_events, tr_risks);
    const double horizon =
        r.brier_horizon_days > 0 ? r.brier_horizon_days : median_event_time(times, events);
    std::vector<double> surv(risks.size());
    for (size_t i = 0; i < risks.size(); ++i) {
      bool clamped = false;
      surv[i] = survival_probability(risks[i], base, horizon, &clamped);
      json pj;
      pj["id"] = ids[i];
      pj["risk"] = risks[i];
      pj["survival_at_horizon"] = surv[i];
      pj["horizon"] = horizon;
      pj["clamped"] = clamped;
      pred << pj.dump() << "\n";
    }
    rep = survival_report(risks, surv, times, events, horizon);
  }

  const std::string json_path = (fs::path(out_dir) / "report.json").string();
  const std::string csv_path = (fs::path(out_dir) / "report.csv").string();
  std::ofstream jf(json_path, std::ios::binary);
  if (!jf) throw IoError("cannot write " + json_path);
  jf << rep.to_json() << "\n";
  std::ofstream cf(csv_path, std::ios::binary);
  if (!cf) throw IoError("cannot write " + csv_path);
  cf << rep.to_csv();

  out << rep.to_json() << "\n";
}

void cmd_attribute(RunConfig& cfg, const std::string& out_dir, std::ostream& out) {
  ResolvedConfig r = cfg.resolve();
  Dataset ds = load_dataset_checked(r.data_dir);
  require_stem("checkpoint", "paths.checkpoint", r.checkpoint);
  require_stem("head", "paths.head", r.head);
  if (r.attribute_record.empty()) throw ConfigError("attribute.record_id is required");

  LeastModel model = load_checkpoint(r.checkpoint);
  TaskHead head = load_head(r.head);
  if (head.kind != TaskKind::kClassification)
    throw ConfigError("attribution needs a classification head, got " + task_name(head.kind));
  if (r.attribute_target >= head.label_count)
    throw ConfigError("attribute.target " + std::to_string(r.attribute_target) +
                      " is out of range for " + std::to_string(head.label_count) + " labels");

  const SignalRecord& rec = ds.by_id(r.attribute_record);
  const ModelConfig& mc = model.config();
  if (rec.lead_count != mc.lead_count || rec.sample_count != mc.input_len)
    throw DimensionError("record " + rec.id + " is " + std::to_string(rec.lead_count) + "x" +
                         std::to_string(rec.sample_count) + " but the model expects " +
                         std::to_string(mc.lead_count) + "x" + std::to_string(mc.input_len));

  Tensor x = Tensor::from({1, rec.lead_count, rec.sample_count}, rec.leads);
  Tensor map = attribution_map(model, head.w, head.b, x, r.attribute_target);

  fs::create_directories(out_dir);
  write_resolved(cfg, out_dir);
  const std::string csv_path = (fs::path(out_dir) / "attribution.csv").string();
  std::ofstream f(csv_path, std::ios::binary);
  if (!f) throw IoError("cannot write " + csv_path);
  f << "t,score\n";
  for (int64_t t = 0; t < map.numel(); ++t)
    f << t << "," << fmt_g17(map.data()[static_cast<size_t>(t)]) << "\n";

  json j;
  j["record"] = r.attribute_record;
  j["target"] = r.attribute_target;
  j["rows"] = map.numel();
  j["csv"] = csv_path;
  out << j.dump(2) << "\n";
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"masked-autoencoder pretraining and evaluation for multi-lead physiological signals"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;

  using Command = void (*)(RunConfig&, const std::string&, std::ostream&);
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands = {
      {"synth", {"generate a labeled synthetic dataset", &cmd_synth}},
      {"preprocess", {"resample, filter, and window an existing dataset", &cmd_preprocess}},
      {"pretrain", {"self-supervised pretraining on a dataset split", &cmd_pretrain}},
      {"finetune", {"supervised training from a pretrained checkpoint", &cmd_finetune}},
      {"probe", {"linear probing with the encoder frozen", &cmd_probe}},
      {"eval", {"run a trained head over a split and write metric reports", &cmd_eval}},
      {"attribute", {"per-timestep attribution for one record and label", &cmd_attribute}},
  };
  for (const auto& [name, entry] : commands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", config_path, "config file of section.key = value lines");
    sub->add_option("--set", sets, "override one key, section.key=value (repeatable)");
    sub->add_option("--out", out_dir, "output directory (default: out)");
    sub->add_option("--seed", seed, "set every seed.* key at once")
        ->each([&seed_given](const std::string&) { seed_given = true; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
    for (const std::string& kv : sets) cfg.apply_assignment(kv);
    if (seed_given) cfg.apply_seed(seed);
    const CLI::App* sub = app.get_subcommands().front();
    for (const auto& [name, entry] : commands) {
      if (name == sub->get_name()) {
        entry.second(cfg, out_dir, out);
        return 0;
      }
    }
    throw UsageError("no handler for subcommand " + sub->get_name());
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace least
