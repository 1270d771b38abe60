#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "least/dataio.hpp"
#include "least/signal.hpp"

using namespace least;
namespace fs = std::filesystem;

namespace {

std::vector<SignalRecord> make_records(int count, int64_t leads = 12, int64_t samples = 1000) {
  std::vector<SignalRecord> out;
  Rng rng(77);
  for (int i = 0; i < count; ++i) {
    SignalRecord r;
    r.id = "rec" + std::to_string(i);
    r.lead_count = leads;
    r.sample_count = samples;
    r.sampling_rate_hz = 100.0;
    r.leads.resize(static_cast<size_t>(leads * samples));
    for (double& v : r.leads) v = rng.uniform();
    r.label_vector = std::vector<int>{i % 2, 1 - i % 2};
    r.r_peaks = std::vector<int64_t>{2 + i, samples / 2, samples - 5};
    r.survival = Survival{30.0 + i, i % 3 == 0};
    out.push_back(std::move(r));
  }
  return out;
}

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("least_test_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("dataset write and load round trip") {
  TempDir tmp;
  auto records = make_records(2);
  write_dataset(records, {"normal", "af_like"},
                {{"train", {"rec0"}}, {"test", {"rec1"}}}, tmp.path.string());

  CHECK(fs::file_size(tmp.path / "signals.blob") == 2u * 12u * 1000u * 4u);

  Dataset ds = load_dataset(tmp.path.string());
  CHECK(ds.manifest.version == 1);
  CHECK(ds.manifest.label_names == std::vector<std::string>{"normal", "af_like"});
  REQUIRE(ds.records.size() == 2);
  for (size_t r = 0; r < 2; ++r) {
    CHECK(ds.records[r].id == records[r].id);
    CHECK(*ds.records[r].r_peaks == *records[r].r_peaks);
    CHECK(*ds.records[r].label_vector == *records[r].label_vector);
    CHECK(ds.records[r].survival->time_days == records[r].survival->time_days);
    CHECK(ds.records[r].survival->event == records[r].survival->event);
    for (size_t i = 0; i < ds.records[r].leads.size(); ++i) {
      CHECK(std::abs(ds.records[r].leads[i] - records[r].leads[i]) <=
            std::abs(records[r].leads[i]) * 0x1.0p-20 + 0x1.0p-24);
    }
  }
}

TEST_CASE("manifest stable under rewrite") {
  TempDir tmp;
  auto records = make_records(3);
  write_dataset(records, {"a", "b"}, {{"train", {"rec0", "rec1", "rec2"}}}, tmp.path.string());
  std::ifstream f1(tmp.path / "manifest.json");
  std::string first((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());

  Dataset ds = load_dataset(tmp.path.string());
  write_dataset(ds.records, ds.manifest.label_names, ds.manifest.split, tmp.path.string());
  std::ifstream f2(tmp.path / "manifest.json");
  std::string second((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(first == second);
}

TEST_CASE("unknown split id is a load error naming the id") {
  TempDir tmp;
  write_dataset(make_records(1), {}, {{"train", {"rec0", "ghost7"}}}, tmp.path.string());
  CHECK_THROWS_WITH_AS(load_dataset(tmp.path.string()), doctest::Contains("ghost7"), IoError);
}

TEST_CASE("corrupt offsets rejected") {
  TempDir tmp;
  write_dataset(make_records(2), {}, {}, tmp.path.string());
  std::ifstream f(tmp.path / "manifest.json");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  f.close();
  const std::string needle = "\"blob_offset\": 48000";
  const size_t pos = text.find(needle);
  REQUIRE(pos != std::string::npos);
  text.replace(pos, needle.size(), "\"blob_offset\": 48004");
  std::ofstream out(tmp.path / "manifest.json");
  out << text;
  out.close();
  CHECK_THROWS_AS(load_dataset(tmp.path.string()), IoError);
}

TEST_CASE("batch iteration") {
  TempDir tmp;
  auto records = make_records(10, 2, 40);
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  write_dataset(records, {"x", "y"}, {{"train", ids}}, tmp.path.string());
  Dataset ds = load_dataset(tmp.path.string());

  SUBCASE("sizes four four two") {
    auto batches = iterate_batches(ds, "train", 4, 11, 0);
    REQUIRE(batches.size() == 3);
    CHECK(batches[0].signals.shape() == Shape{4, 2, 40});
    CHECK(batches[1].signals.shape() == Shape{4, 2, 40});
    CHECK(batches[2].signals.shape() == Shape{2, 2, 40});
    CHECK(batches[0].labels.shape() == Shape{4, 2});
    CHECK(batches[0].r_peaks.size() == 4);
    CHECK(batches[2].survival_times.size() == 2);
  }
  SUBCASE("same seed same order") {
    auto b1 = iterate_batches(ds, "train", 4, 19, 3);
    auto b2 = iterate_batches(ds, "train", 4, 19, 3);
    REQUIRE(b1.size() == b2.size());
    for (size_t i = 0; i < b1.size(); ++i) CHECK(b1[i].ids == b2[i].ids);
  }
  SUBCASE("adjacent seeds usually differ") {
    int differing = 0;
    for (uint64_t s = 100; s < 120; ++s) {
      auto b1 = iterate_batches(ds, "train", 10, s, 0);
      auto b2 = iterate_batches(ds, "train", 10, s + 1, 0);
      if (b1[0].ids != b2[0].ids) ++differing;
    }
    CHECK(differing >= 19);
  }
  SUBCASE("epoch advances the permutation") {
    auto b1 = iterate_batches(ds, "train", 10, 7, 0);
    auto b2 = iterate_batches(ds, "train", 10, 7, 1);
    CHECK(b1[0].ids != b2[0].ids);
  }
  SUBCASE("empty split rejected") {
    CHECK_THROWS_AS(iterate_batches(ds, "nope", 4, 1, 0), ConfigError);
  }
  SUBCASE("signal bytes land row major in the batch tensor") {
    auto batches = iterate_batches(ds, "train", 10, 11, 0);
    const Batch& b = batches[0];
    const SignalRecord& first = ds.by_id(b.ids[0]);
    for (int64_t i = 0; i < 2 * 40; ++i) CHECK(b.signals.data()[i] == first.leads[i]);
  }
}
