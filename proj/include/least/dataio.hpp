#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "least/signal.hpp"
#include "least/tensor.hpp"

namespace least {

struct ManifestRecord {
  std::string id;
  int64_t blob_offset = 0;  // bytes into the blob
  int64_t lead_count = 0;
  int64_t sample_count = 0;
  double sampling_rate_hz = 0.0;
  std::optional<std::vector<int>> label_vector;
  std::optional<std::vector<int64_t>> r_peaks;
  std::optional<Survival> survival;
};

struct DatasetManifest {
  int version = 1;
  std::vector<ManifestRecord> records;
  std::vector<std::string> label_names;
  std::map<std::string, std::vector<std::string>> split;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SignalRecord> records;  // decoded to 64-bit, same order as manifest

  const SignalRecord& by_id(const std::string& id) const;
};

// Writes dir/manifest.json plus dir/signals.blob (raw little-endian 32-bit
// reals, lead-major per record, no header).
void write_dataset(const std::vector<SignalRecord>& records,
                   const std::vector<std::string>& label_names,
                   const std::map<std::string, std::vector<std::string>>& split,
                   const std::string& dir);

Dataset load_dataset(const std::string& dir);

struct Batch {
  std::vector<std::string> ids;
  Tensor signals;  // [B x L x T]
  Tensor labels;   // [B x K] when every record is labeled, else undefined
  std::vector<std::vector<int64_t>> r_peaks;
  std::vector<double> survival_times;
  std::vector<int> survival_events;
  bool has_labels = false;
  bool has_r_peaks = false;
  bool has_survival = false;
};

// Deterministic shuffled batches; epoch e uses shuffle seed (seed + e). The
// final short batch is emitted.
std::vector<Batch> iterate_batches(const Dataset& ds, const std::string& split_name,
                                   int64_t batch_size, uint64_t shuffle_seed, int64_t epoch);

}  // namespace least
