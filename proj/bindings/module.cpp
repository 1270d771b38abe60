#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <algorithm>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "least/cli.hpp"
#include "least/dataio.hpp"
#include "least/downstream.hpp"
#include "least/error.hpp"
#include "least/metrics.hpp"
#include "least/model.hpp"
#include "least/ops.hpp"
#include "least/signal.hpp"
#include "least/train.hpp"

namespace py = pybind11;
using namespace least;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(static_cast<size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<size_t>(i)] = a.shape(i);
  std::vector<double> values(a.data(), a.data() + a.size());
  return Tensor::from(std::move(shape), std::move(values));
}

py::array_t<double> to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

DftPath path_from_name(const std::string& name) {
  if (name == "auto") return DftPath::kAuto;
  if (name == "direct") return DftPath::kDirect;
  if (name == "fft") return DftPath::kFft;
  throw ConfigError("dft path must be auto, direct, or fft");
}

ModelConfig preset_from_name(const std::string& name) {
  if (name == "paper_default") return ModelConfig::paper_default();
  if (name == "tiny") return ModelConfig::tiny();
  if (name == "miniature") return ModelConfig::miniature();
  throw ConfigError("unknown preset '" + name + "' (expected paper_default, tiny, or miniature)");
}

Tensor batch3(const DoubleArray& x) {
  Tensor t = to_tensor(x);
  if (t.rank() == 2) return reshape(t, {1, t.dim(0), t.dim(1)});
  if (t.rank() != 3) throw DimensionError("expected a [batch x leads x samples] array");
  return t;
}

TrainConfig train_from_args(int64_t batch_size, int64_t epochs, double base_lr,
                            double warmup_epochs, double min_lr, double weight_decay,
                            double clip_norm, int64_t checkpoint_every) {
  TrainConfig t;
  t.batch_size = batch_size;
  t.epochs = epochs;
  t.schedule.base_lr = base_lr;
  t.schedule.warmup_epochs = warmup_epochs;
  t.schedule.total_epochs = static_cast<double>(epochs);
  t.schedule.min_lr = min_lr;
  t.optim.lr = base_lr;
  t.optim.weight_decay = weight_decay;
  t.optim.clip_norm = clip_norm;
  t.checkpoint_every = checkpoint_every;
  return t;
}

py::dict report_dict(const MetricReport& rep) {
  py::dict values, counts, d;
  for (const auto& [k, v] : rep.values) values[py::str(k)] = v;
  for (const auto& [k, v] : rep.counts) counts[py::str(k)] = v;
  d["task"] = rep.task;
  d["values"] = values;
  d["counts"] = counts;
  return d;
}

}  // namespace

PYBIND11_MODULE(_least, m) {
  m.doc() = "Masked-autoencoder pretraining for multi-lead physiological signals";
  m.attr("__version__") = "0.1.0";

  py::register_exception<Error>(m, "LeastError");

  py::class_<RunConfig>(m, "Config")
      .def(py::init<>())
      .def_static("from_file", &RunConfig::from_file, py::arg("path"))
      .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
      .def("get", [](const RunConfig& c, const std::string& key) { return c.get(key); },
           py::arg("key"))
      .def("seed", &RunConfig::apply_seed, py::arg("seed"),
           "Set every seed.* key to the same value.")
      .def("dump", &RunConfig::dump)
      .def("resolve",
           [](RunConfig& c) {
             c.resolve();
             py::dict d;
             std::istringstream ss(c.dump());
             std::string line;
             while (std::getline(ss, line)) {
               const size_t eq = line.find(" = ");
               if (eq == std::string::npos) continue;
               d[py::str(line.substr(0, eq))] = line.substr(eq + 3);
             }
             return d;
           },
           "Validate and canonicalize; returns the effective key/value map.");

  m.def(
      "run",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full;
        full.reserve(args.size() + 1);
        full.push_back("least");
        full.insert(full.end(), args.begin(), args.end());
        std::vector<const char*> argv;
        argv.reserve(full.size());
        for (const std::string& s : full) argv.push_back(s.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        py::dict d;
        d["code"] = code;
        d["stdout"] = out.str();
        d["stderr"] = err.str();
        return d;
      },
      py::arg("args"), "Run a CLI command in process; returns {code, stdout, stderr}.");

  m.def(
      "synth_record",
      [](uint64_t seed, double rate_hz, double duration_s, double mean_hr_bpm, double rr_jitter_s,
         double noise_sigma, bool af) {
        GeneratorConfig g;
        g.rate_hz = rate_hz;
        g.duration_s = duration_s;
        g.mean_hr_bpm = mean_hr_bpm;
        g.rr_jitter_s = rr_jitter_s;
        g.noise_sigma = noise_sigma;
        g.mode = af ? SynthClass::kAfLike : SynthClass::kNormal;
        SignalRecord r = synth_ecg(g, seed);
        py::dict d;
        d["leads"] = to_array(Tensor::from({r.lead_count, r.sample_count}, r.leads));
        d["rate_hz"] = r.sampling_rate_hz;
        d["r_peaks"] = *r.r_peaks;
        d["label"] = *r.label_vector;
        d["survival_days"] = r.survival->time_days;
        d["survival_event"] = r.survival->event;
        return d;
      },
      py::arg("seed"), py::arg("rate_hz") = 100.0, py::arg("duration_s") = 10.0,
      py::arg("mean_hr_bpm") = 70.0, py::arg("rr_jitter_s") = 0.0, py::arg("noise_sigma") = 0.0,
      py::arg("af") = false);

  m.def(
      "preprocess_record",
      [](DoubleArray leads, double rate_hz, double target_hz, double segment_seconds,
         double band_low_hz, double band_high_hz, int filter_order, double nan_fraction_limit) {
        if (leads.ndim() != 2) throw DimensionError("leads must be [lead_count x samples]");
        SignalRecord r;
        r.id = "py";
        r.lead_count = leads.shape(0);
        r.sample_count = leads.shape(1);
        r.sampling_rate_hz = rate_hz;
        r.leads.assign(leads.data(), leads.data() + leads.size());
        PipelineConfig cfg;
        cfg.target_hz = target_hz;
        cfg.segment_seconds = segment_seconds;
        cfg.band_low_hz = band_low_hz;
        cfg.band_high_hz = band_high_hz;
        cfg.filter_order = filter_order;
        cfg.nan_fraction_limit = nan_fraction_limit;
        PreprocessResult res = preprocess(r, cfg);
        py::list segs;
        for (const SignalRecord& s : res.segments)
          segs.append(to_array(Tensor::from({s.lead_count, s.sample_count}, s.leads)));
        py::dict d;
        d["segments"] = segs;
        d["rejected"] = res.rejected;
        return d;
      },
      py::arg("leads"), py::arg("rate_hz"), py::arg("target_hz") = 100.0,
      py::arg("segment_seconds") = 10.0, py::arg("band_low_hz") = 0.5,
      py::arg("band_high_hz") = 45.0, py::arg("filter_order") = 3,
      py::arg("nan_fraction_limit") = 0.05);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_static("preset", &preset_from_name, py::arg("name"))
      .def_readwrite("lead_count", &ModelConfig::lead_count)
      .def_readwrite("input_len", &ModelConfig::input_len)
      .def_readwrite("embed_dim", &ModelConfig::embed_dim)
      .def_readwrite("patch_count", &ModelConfig::patch_count)
      .def_readwrite("encoder_blocks", &ModelConfig::encoder_blocks)
      .def_readwrite("decoder_blocks", &ModelConfig::decoder_blocks)
      .def_readwrite("decoder_dim", &ModelConfig::decoder_dim)
      .def_readwrite("heads_attn", &ModelConfig::heads_attn)
      .def_readwrite("filter_heads", &ModelConfig::filter_heads)
      .def_readwrite("mask_ratio", &ModelConfig::mask_ratio)
      .def_readwrite("proto_dim", &ModelConfig::proto_dim)
      .def_readwrite("ffn_ratio", &ModelConfig::ffn_ratio)
      .def_readwrite("pairing", &ModelConfig::pairing)
      .def_readwrite("tff_enabled", &ModelConfig::tff_enabled)
      .def_readwrite("mgpr_enabled", &ModelConfig::mgpr_enabled)
      .def_readwrite("per_block_projections", &ModelConfig::per_block_projections)
      .def_property(
          "prototype_mode",
          [](const ModelConfig& c) {
            return c.prototype_mode == PrototypeMode::kPerSample ? "per_sample" : "batch_level";
          },
          [](ModelConfig& c, const std::string& v) {
            if (v == "per_sample") {
              c.prototype_mode = PrototypeMode::kPerSample;
            } else if (v == "batch_level") {
              c.prototype_mode = PrototypeMode::kBatchLevel;
            } else {
              throw ConfigError("prototype_mode must be per_sample or batch_level");
            }
          })
      .def("validate", &ModelConfig::validate);

  py::class_<LeastModel>(m, "Model")
      .def(py::init([](const ModelConfig& cfg, uint64_t seed) { return LeastModel(cfg, seed); }),
           py::arg("config"), py::arg("seed"))
      .def_static("load", &load_checkpoint, py::arg("stem"))
      .def("save", [](const LeastModel& mod, const std::string& stem) { save_checkpoint(mod, stem); },
           py::arg("stem"))
      .def_property_readonly("config", [](const LeastModel& mod) { return mod.config(); })
      .def("parameter_count",
           [](const LeastModel& mod) {
             int64_t n = 0;
             for (const auto& [name, t] : mod.parameters()) n += t.numel();
             return n;
           })
      .def(
          "encode",
          [](const LeastModel& mod, DoubleArray x) { return to_array(encode_all(mod, batch3(x))); },
          py::arg("x"), "Encoder tokens [batch*patch_count x embed_dim], no masking.")
      .def(
          "pretrain_losses",
          [](const LeastModel& mod, DoubleArray x, uint64_t mask_seed) {
            PretrainLosses pl = pretrain_forward(mod, batch3(x), mask_seed, 0);
            py::dict d;
            d["total"] = pl.total.item();
            d["ssl"] = pl.ssl.item();
            d["multi"] = pl.multi.defined() ? py::cast(pl.multi.item()) : py::none();
            return d;
          },
          py::arg("x"), py::arg("mask_seed"));

  py::class_<TaskHead>(m, "Head")
      .def_static(
          "create",
          [](const std::string& kind, int64_t embed_dim, int64_t label_count, int64_t upsample,
             uint64_t seed, const std::string& pool) {
            if (pool != "mean" && pool != "max") throw ConfigError("pool must be mean or max");
            return make_head(task_from_name(kind), embed_dim, label_count, upsample, seed,
                             pool == "max" ? PoolKind::kMax : PoolKind::kMean);
          },
          py::arg("kind"), py::arg("embed_dim"), py::arg("label_count") = 1,
          py::arg("upsample") = 1, py::arg("seed") = 0, py::arg("pool") = "mean")
      .def_static("load", &load_head, py::arg("stem"))
      .def("save", [](const TaskHead& h, const std::string& stem) { save_head(h, stem); },
           py::arg("stem"))
      .def_property_readonly("kind", [](const TaskHead& h) { return task_name(h.kind); })
      .def_property_readonly("label_count", [](const TaskHead& h) { return h.label_count; })
      .def_property_readonly("embed_dim", [](const TaskHead& h) { return h.embed_dim; });

  m.def(
      "classify",
      [](const LeastModel& mod, const TaskHead& head, DoubleArray x) {
        Tensor xt = batch3(x);
        return to_array(sigmoid(classify_logits(encode_all(mod, xt), xt.dim(0), head)));
      },
      py::arg("model"), py::arg("head"), py::arg("x"),
      "Per-label probabilities [batch x labels].");
  m.def(
      "segment",
      [](const LeastModel& mod, const TaskHead& head, DoubleArray x) {
        Tensor xt = batch3(x);
        return to_array(segment_activation(encode_all(mod, xt), xt.dim(0), head));
      },
      py::arg("model"), py::arg("head"), py::arg("x"),
      "Per-sample peak activation [batch x samples].");
  m.def(
      "risk",
      [](const LeastModel& mod, const TaskHead& head, DoubleArray x) {
        Tensor xt = batch3(x);
        return to_array(survival_risk(encode_all(mod, xt), xt.dim(0), head));
      },
      py::arg("model"), py::arg("head"), py::arg("x"), "Relative log-risk [batch].");
  m.def(
      "attribution",
      [](const LeastModel& mod, const TaskHead& head, DoubleArray x, int64_t target) {
        if (head.kind != TaskKind::kClassification)
          throw ConfigError("attribution needs a classification head");
        return to_array(attribution_map(mod, head.w, head.b, batch3(x), target));
      },
      py::arg("model"), py::arg("head"), py::arg("x"), py::arg("target") = 0,
      "Per-timestep relevance for one record and label, scaled to [0, 1].");

  m.def(
      "pretrain",
      [](const std::string& data_dir, const ModelConfig& cfg, const std::string& split,
         int64_t batch_size, int64_t epochs, double base_lr, double warmup_epochs, double min_lr,
         double weight_decay, double clip_norm, int64_t checkpoint_every, uint64_t seed,
         const std::string& out_dir) {
        Dataset ds = load_dataset(data_dir);
        TrainConfig t = train_from_args(batch_size, epochs, base_lr, warmup_epochs, min_lr,
                                        weight_decay, clip_norm, checkpoint_every);
        PretrainResult res = pretrain(ds, split, cfg, t, seed, out_dir);
        py::list losses;
        for (const TraceRow& row : res.trace) losses.append(row.loss);
        py::dict d;
        d["checkpoint"] = res.checkpoint_stem;
        d["trace"] = res.trace_path;
        d["loss"] = losses;
        return d;
      },
      py::arg("data_dir"), py::arg("config"), py::arg("split") = "train",
      py::arg("batch_size") = 16, py::arg("epochs") = 50, py::arg("base_lr") = 1e-3,
      py::arg("warmup_epochs") = 5.0, py::arg("min_lr") = 0.0, py::arg("weight_decay") = 0.05,
      py::arg("clip_norm") = 0.0, py::arg("checkpoint_every") = 0, py::arg("seed") = 42,
      py::arg("out_dir") = "out");

  m.def(
      "finetune",
      [](const std::string& checkpoint, const std::string& task, const std::string& data_dir,
         const std::string& split, const std::string& mode, const std::string& pool,
         int64_t batch_size, int64_t epochs, double base_lr, double warmup_epochs, double min_lr,
         double weight_decay, double clip_norm, uint64_t seed, const std::string& out_dir) {
        if (mode != "full" && mode != "linear_probe")
          throw ConfigError("mode must be full or linear_probe");
        if (pool != "mean" && pool != "max") throw ConfigError("pool must be mean or max");
        Dataset ds = load_dataset(data_dir);
        TrainConfig t =
            train_from_args(batch_size, epochs, base_lr, warmup_epochs, min_lr, weight_decay,
                            clip_norm, 0);
        FinetuneResult res = finetune(
            checkpoint, task_from_name(task),
            mode == "full" ? FinetuneMode::kFull : FinetuneMode::kLinearProbe, ds, split, t, seed,
            out_dir, pool == "max" ? PoolKind::kMax : PoolKind::kMean);
        py::list losses;
        for (const TraceRow& row : res.trace) losses.append(row.loss);
        py::dict d;
        d["model"] = res.model_stem;
        d["head"] = res.head_stem;
        d["trace"] = res.trace_path;
        d["loss"] = losses;
        d["skipped_batches"] = res.skipped_batches;
        return d;
      },
      py::arg("checkpoint"), py::arg("task"), py::arg("data_dir"), py::arg("split") = "train",
      py::arg("mode") = "full", py::arg("pool") = "mean", py::arg("batch_size") = 16,
      py::arg("epochs") = 30, py::arg("base_lr") = 1e-3, py::arg("warmup_epochs") = 3.0,
      py::arg("min_lr") = 0.0, py::arg("weight_decay") = 0.05, py::arg("clip_norm") = 0.0,
      py::arg("seed") = 9, py::arg("out_dir") = "out");

  m.def(
      "detect_rpeaks",
      [](const std::vector<double>& activation, double rate_hz, double min_prominence,
         double refractory_ms, double max_qrs_ms) {
        RPeakPostConfig cfg;
        cfg.min_prominence = min_prominence;
        cfg.refractory_ms = refractory_ms;
        cfg.max_qrs_ms = max_qrs_ms;
        return detect_rpeaks(activation, rate_hz, cfg);
      },
      py::arg("activation"), py::arg("rate_hz"), py::arg("min_prominence") = 0.1,
      py::arg("refractory_ms") = 200.0, py::arg("max_qrs_ms") = 120.0);

  m.def(
      "rpeak_metrics",
      [](const std::vector<int64_t>& pred, const std::vector<int64_t>& truth, double rate_hz,
         double window_ms, bool optimal) {
        RPeakScore s = rpeak_metrics(pred, truth, rate_hz, window_ms, optimal);
        py::dict d;
        d["sensitivity"] = s.se;
        d["ppv"] = s.ppv;
        d["f1"] = s.f1;
        d["matched"] = s.matched;
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("rate_hz"), py::arg("window_ms") = 75.0,
      py::arg("optimal") = false);

  m.def("auroc", &auroc, py::arg("scores"), py::arg("labels"));

  m.def(
      "c_index",
      [](const std::vector<double>& times, const std::vector<int>& events,
         const std::vector<double>& risks) {
        CIndexScore s = c_index(times, events, risks);
        py::dict d;
        d["value"] = s.value;
        d["comparable"] = s.comparable;
        return d;
      },
      py::arg("times"), py::arg("events"), py::arg("risks"));

  m.def("brier", &brier, py::arg("surv_prob_at_h"), py::arg("times"), py::arg("events"),
        py::arg("horizon"));

  m.def(
      "classification_report",
      [](DoubleArray scores, DoubleArray truth) {
        return report_dict(classification_report(to_tensor(scores), to_tensor(truth)));
      },
      py::arg("scores"), py::arg("truth"));

  m.def(
      "dft",
      [](DoubleArray x, const std::string& path) {
        Tensor xt = to_tensor(x);
        const bool flat = xt.rank() == 1;
        if (flat) xt = reshape(xt, {1, xt.dim(0)});
        ComplexTensor z = dft_forward(xt, path_from_name(path));
        Tensor re = flat ? reshape(z.re, {z.re.dim(1)}) : z.re;
        Tensor im = flat ? reshape(z.im, {z.im.dim(1)}) : z.im;
        return py::make_tuple(to_array(re), to_array(im));
      },
      py::arg("x"), py::arg("path") = "auto",
      "Complex spectrum over the last axis as (real, imag) arrays.");

  m.def(
      "idft",
      [](DoubleArray re, DoubleArray im, const std::string& path) {
        Tensor rt = to_tensor(re), it = to_tensor(im);
        const bool flat = rt.rank() == 1;
        if (flat) {
          rt = reshape(rt, {1, rt.dim(0)});
          it = reshape(it, {1, it.dim(0)});
        }
        Tensor back = dft_inverse(ComplexTensor{rt, it}, nullptr, path_from_name(path));
        if (flat) back = reshape(back, {back.dim(1)});
        return to_array(back);
      },
      py::arg("re"), py::arg("im"), py::arg("path") = "auto");
}
