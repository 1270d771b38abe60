#include "least/dataio.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "least/rng.hpp"

namespace least {

namespace {

using nlohmann::json;

void append_f32_le(std::vector<unsigned char>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out.push_back(static_cast<unsigned char>(bits & 0xff));
  out.push_back(static_cast<unsigned char>((bits >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((bits >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((bits >> 24) & 0xff));
}

float read_f32_le(const unsigned char* p) {
  const uint32_t bits = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                        (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

json record_to_json(const ManifestRecord& r) {
  json j;
  j["id"] = r.id;
  j["blob_offset"] = r.blob_offset;
  j["lead_count"] = r.lead_count;
  j["sample_count"] = r.sample_count;
  j["sampling_rate_hz"] = r.sampling_rate_hz;
  if (r.label_vector) j["label_vector"] = *r.label_vector;
  if (r.r_peaks) j["r_peaks"] = *r.r_peaks;
  if (r.survival) {
    j["survival"] = json{{"time_days", r.survival->time_days}, {"event", r.survival->event}};
  }
  return j;
}

ManifestRecord record_from_json(const json& j) {
  ManifestRecord r;
  r.id = j.at("id").get<std::string>();
  r.blob_offset = j.at("blob_offset").get<int64_t>();
  r.lead_count = j.at("lead_count").get<int64_t>();
  r.sample_count = j.at("sample_count").get<int64_t>();
  r.sampling_rate_hz = j.at("sampling_rate_hz").get<double>();
  if (j.contains("label_vector")) r.label_vector = j.at("label_vector").get<std::vector<int>>();
  if (j.contains("r_peaks")) r.r_peaks = j.at("r_peaks").get<std::vector<int64_t>>();
  if (j.contains("survival")) {
    Survival s;
    s.time_days = j.at("survival").at("time_days").get<double>();
    s.event = j.at("survival").at("event").get<bool>();
    r.survival = s;
  }
  return r;
}

}  // namespace

const SignalRecord& Dataset::by_id(const std::string& id) const {
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    if (manifest.records[i].id == id) return records[i];
  }
  throw IoError("dataset has no record with id " + id);
}

void write_dataset(const std::vector<SignalRecord>& records,
                   const std::vector<std::string>& label_names,
                   const std::map<std::string, std::vector<std::string>>& split,
                   const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::vector<unsigned char> blob;
  json manifest;
  manifest["version"] = 1;
  manifest["label_names"] = label_names;
  json recs = json::array();
  for (const SignalRecord& rec : records) {
    rec.validate();
    ManifestRecord m;
    m.id = rec.id;
    m.blob_offset = static_cast<int64_t>(blob.size());
    m.lead_count = rec.lead_count;
    m.sample_count = rec.sample_count;
    m.sampling_rate_hz = rec.sampling_rate_hz;
    m.label_vector = rec.label_vector;
    m.r_peaks = rec.r_peaks;
    m.survival = rec.survival;
    for (double v : rec.leads) append_f32_le(blob, static_cast<float>(v));
    recs.push_back(record_to_json(m));
  }
  manifest["records"] = std::move(recs);
  json split_j = json::object();
  for (const auto& [name, ids] : split) split_j[name] = ids;
  manifest["split"] = std::move(split_j);

  {
    std::ofstream f(fs::path(dir) / "signals.blob", std::ios::binary);
    if (!f) throw IoError("cannot open " + dir + "/signals.blob for writing");
    f.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("short write to " + dir + "/signals.blob");
  }
  {
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot open " + dir + "/manifest.json for writing");
    f << manifest.dump(2) << "\n";
  }
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw IoError("cannot open " + dir + "/manifest.json");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest in " + dir + ": " + e.what());
  }

  std::ifstream bf(fs::path(dir) / "signals.blob", std::ios::binary);
  if (!bf) throw IoError("cannot open " + dir + "/signals.blob");
  std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bf)),
                                  std::istreambuf_iterator<char>());

  Dataset ds;
  try {
    ds.manifest.version = manifest.at("version").get<int>();
    ds.manifest.label_names = manifest.at("label_names").get<std::vector<std::string>>();
    for (const json& j : manifest.at("records")) {
      ds.manifest.records.push_back(record_from_json(j));
    }
    for (const auto& [name, ids] : manifest.at("split").items()) {
      ds.manifest.split[name] = ids.get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw IoError("manifest in " + dir + " missing required fields: " + e.what());
  }

  int64_t expected_end = 0;
  for (const ManifestRecord& m : ds.manifest.records) {
    const int64_t bytes = m.lead_count * m.sample_count * 4;
    if (m.blob_offset != expected_end) {
      throw IoError("record " + m.id + " offset " + std::to_string(m.blob_offset) +
                    " does not follow the previous record (expected " +
                    std::to_string(expected_end) + ")");
    }
    expected_end = m.blob_offset + bytes;
    if (expected_end > static_cast<int64_t>(blob.size())) {
      throw IoError("record " + m.id + " extends past the end of the blob");
    }
    SignalRecord rec;
    rec.id = m.id;
    rec.lead_count = m.lead_count;
    rec.sample_count = m.sample_count;
    rec.sampling_rate_hz = m.sampling_rate_hz;
    rec.label_vector = m.label_vector;
    rec.r_peaks = m.r_peaks;
    rec.survival = m.survival;
    rec.leads.resize(static_cast<size_t>(m.lead_count * m.sample_count));
    for (size_t i = 0; i < rec.leads.size(); ++i) {
      rec.leads[i] =
          static_cast<double>(read_f32_le(blob.data() + m.blob_offset + static_cast<int64_t>(i) * 4));
    }
    ds.records.push_back(std::move(rec));
  }
  if (expected_end != static_cast<int64_t>(blob.size())) {
    throw IoError("blob in " + dir + " has trailing bytes beyond the last record");
  }

  for (const auto& [name, ids] : ds.manifest.split) {
    for (const std::string& id : ids) {
      bool found = false;
      for (const ManifestRecord& m : ds.manifest.records) {
        if (m.id == id) {
          found = true;
          break;
        }
      }
      if (!found) {
        throw IoError("split " + name + " references unknown record id " + id);
      }
    }
  }
  return ds;
}

std::vector<Batch> iterate_batches(const Dataset& ds, const std::string& split_name,
                                   int64_t batch_size, uint64_t shuffle_seed, int64_t epoch) {
  if (batch_size < 1) throw ConfigError("iterate_batches: batch_size must be positive");
  auto it = ds.manifest.split.find(split_name);
  if (it == ds.manifest.split.end() || it->second.empty()) {
    throw ConfigError("iterate_batches: split " + split_name + " is empty or missing");
  }
  std::vector<const SignalRecord*> recs;
  for (const std::string& id : it->second) recs.push_back(&ds.by_id(id));
  const int64_t l = recs[0]->lead_count, t = recs[0]->sample_count;
  for (const SignalRecord* r : recs) {
    if (r->lead_count != l || r->sample_count != t) {
      throw DimensionError("iterate_batches: record " + r->id + " shape differs within split " +
                           split_name);
    }
  }

  Rng rng(shuffle_seed + static_cast<uint64_t>(epoch));
  rng.shuffle(recs);

  std::vector<Batch> out;
  for (size_t start = 0; start < recs.size(); start += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(recs.size(), start + static_cast<size_t>(batch_size));
    const int64_t b = static_cast<int64_t>(end - start);
    Batch batch;
    batch.has_labels = true;
    batch.has_r_peaks = true;
    batch.has_survival = true;
    std::vector<double> sig(static_cast<size_t>(b * l * t));
    std::vector<double> labels;
    for (size_t i = start; i < end; ++i) {
      const SignalRecord& r = *recs[i];
      batch.ids.push_back(r.id);
      std::copy(r.leads.begin(), r.leads.end(), sig.begin() + static_cast<int64_t>(i - start) * l * t);
      if (r.label_vector) {
        labels.insert(labels.end(), r.label_vector->begin(), r.label_vector->end());
      } else {
        batch.has_labels = false;
      }
      if (r.r_peaks) {
        batch.r_peaks.push_back(*r.r_peaks);
      } else {
        batch.has_r_peaks = false;
      }
      if (r.survival) {
        batch.survival_times.push_back(r.survival->time_days);
        batch.survival_events.push_back(r.survival->event ? 1 : 0);
      } else {
        batch.has_survival = false;
      }
    }
    batch.signals = Tensor::from({b, l, t}, std::move(sig));
    if (batch.has_labels && !labels.empty()) {
      const int64_t k = static_cast<int64_t>(labels.size()) / b;
      batch.labels = Tensor::from({b, k}, std::move(labels));
    }
    out.push_back(std::move(batch));
  }
  return out;
}

}  // namespace least
