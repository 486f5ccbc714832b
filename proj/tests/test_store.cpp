#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "actgate/error.hpp"
#include "actgate/store.hpp"
#include "corpus.hpp"

using namespace actgate;
using store::Category;

namespace {

// Bitwise reflected CRC-32 (poly 0xEDB88320), independent of zlib.
std::uint32_t crc32_bitwise(const std::string& bytes) {
  std::uint32_t crc = 0xffffffffu;
  for (unsigned char b : bytes) {
    crc ^= b;
    for (int k = 0; k < 8; ++k) crc = (crc >> 1) ^ (0xedb88320u & (0u - (crc & 1u)));
  }
  return ~crc;
}

void put(std::string& s, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& s, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put(s, u, 4);
}

store::ActivationDataset small_dataset() {
  store::ActivationDataset ds;
  ds.model_id = "m";
  ds.num_layers = 2;
  ds.hidden_dim = 2;
  ds.records.push_back(store::make_record(7, Category::kBenign, {1.0f, -2.0f, 0.5f, 0.0f}));
  ds.records.push_back(store::make_record(9, Category::kGcg, {3.25f, 4.0f, -1.5f, 8.0f}));
  return ds;
}

std::string to_bytes(const store::ActivationDataset& ds) {
  std::ostringstream os;
  store::write_dataset(ds, os);
  return os.str();
}

store::ActivationDataset from_bytes(const std::string& bytes) {
  std::istringstream is(bytes);
  return store::read_dataset(is);
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Category, NamesRoundTripAndLabels) {
  for (int c = 0; c < store::kNumCategories; ++c) {
    const auto cat = store::category_from_code(c);
    EXPECT_EQ(store::parse_category(store::category_name(cat)), cat);
    EXPECT_EQ(store::binary_label(cat), c == 0 ? 0 : 1);
  }
  EXPECT_EQ(store::parse_category("codechamelon"), Category::kCodeChameleon);
  EXPECT_THROW(store::parse_category("dan"), Error);
  EXPECT_THROW(store::category_from_code(11), Error);
}

TEST(Actv, ByteLayoutMatchesHandEncoding) {
  const auto ds = small_dataset();
  std::string expected = "ACTV";
  put(expected, 1, 2);
  put(expected, 0, 2);
  put(expected, 1, 2);
  expected += "m";
  put(expected, 2, 4);
  put(expected, 2, 4);
  put(expected, 2, 8);
  put(expected, 0, 1);
  for (const auto& r : ds.records) {
    std::string payload;
    for (float f : r.values) put_f32(payload, f);
    put(expected, r.prompt_id, 8);
    put(expected, static_cast<std::uint8_t>(r.category), 1);
    put(expected, r.label, 1);
    put(expected, 0, 2);
    put(expected, crc32_bitwise(payload), 4);
    expected += payload;
  }
  EXPECT_EQ(to_bytes(ds), expected);
}

TEST(Actv, Crc32MatchesKnownVector) {
  const std::string check = "123456789";
  EXPECT_EQ(store::crc32({reinterpret_cast<const unsigned char*>(check.data()), check.size()}),
            0xcbf43926u);
}

TEST(Actv, RoundTripIsByteExact) {
  store::SynthConfig cfg;
  cfg.n_per_class = 30;
  cfg.num_layers = 3;
  cfg.hidden_dim = 5;
  const auto ds = store::synth_clusters(cfg);
  const auto bytes = to_bytes(ds);
  const auto back = from_bytes(bytes);
  EXPECT_EQ(back, ds);
  EXPECT_EQ(to_bytes(back), bytes);
}

TEST(Actv, FileRoundTrip) {
  testkit::TempDir dir("store");
  const auto ds = small_dataset();
  EXPECT_EQ(store::write_dataset(ds, dir / "a.actv"), 2u);
  EXPECT_EQ(store::read_dataset(dir / "a.actv"), ds);
  EXPECT_NE(error_of([&] { store::read_dataset(dir / "missing.actv"); }).find("missing.actv"),
            std::string::npos);
}

TEST(Actv, EmptyDatasetRoundTrips) {
  store::ActivationDataset ds;
  ds.model_id = "";
  ds.num_layers = 1;
  ds.hidden_dim = 1;
  EXPECT_EQ(from_bytes(to_bytes(ds)), ds);
}

TEST(Actv, RejectsCorruptInput) {
  const auto bytes = to_bytes(small_dataset());

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_EQ(error_of([&] { from_bytes(bad_magic); }), "bad magic");

  auto bad_version = bytes;
  bad_version[4] = 2;
  EXPECT_EQ(error_of([&] { from_bytes(bad_version); }), "unsupported version 2");

  EXPECT_EQ(error_of([&] { from_bytes(bytes.substr(0, 12)); }), "truncated header");
  EXPECT_EQ(error_of([&] { from_bytes(bytes.substr(0, bytes.size() - 3)); }),
            "truncated at record 1");

  // Flip one payload bit of the second record.
  auto flipped = bytes;
  flipped[flipped.size() - 2] ^= 0x10;
  EXPECT_EQ(error_of([&] { from_bytes(flipped); }), "checksum mismatch for prompt_id 9");

  EXPECT_NE(error_of([&] { from_bytes(bytes + "x"); }).find("trailing bytes"), std::string::npos);
}

TEST(Actv, RejectsNonFiniteValues) {
  auto ds = small_dataset();
  ds.records[1].values[2] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(to_bytes(ds), Error);

  // Encoded by hand past the writer's validation, with a valid checksum.
  auto bytes = to_bytes(small_dataset());
  const std::size_t payload_at = bytes.size() - 16;
  std::string payload = bytes.substr(payload_at);
  const float inf = std::numeric_limits<float>::infinity();
  std::memcpy(payload.data() + 4, &inf, 4);
  std::string crc;
  put(crc, crc32_bitwise(payload), 4);
  bytes.replace(payload_at - 4, 4, crc);
  bytes.replace(payload_at, 16, payload);
  EXPECT_EQ(error_of([&] { from_bytes(bytes); }), "non-finite value in record 1 (prompt_id 9)");
}

TEST(Actv, ValidateRejectsInconsistentRecords) {
  auto ds = small_dataset();
  ds.records[0].values.pop_back();
  EXPECT_NE(error_of([&] { ds.validate(); }).find("dimension mismatch"), std::string::npos);

  ds = small_dataset();
  ds.records[1].prompt_id = 7;
  EXPECT_NE(error_of([&] { ds.validate(); }).find("duplicate prompt_id 7"), std::string::npos);

  ds = small_dataset();
  ds.records[0].label = 1;
  EXPECT_THROW(ds.validate(), Error);
}

TEST(Wire, IngestAssemblesFrames) {
  const auto ds = small_dataset();
  std::string stream = store::encode_header_frame(ds.model_id, ds.num_layers, ds.hidden_dim);
  for (const auto& r : ds.records) stream += store::encode_record_frame(r);
  std::istringstream in(stream);
  const auto got = store::ingest_stream(in);
  EXPECT_EQ(got, ds);
  EXPECT_EQ(to_bytes(got), to_bytes(ds));
}

TEST(Wire, IngestErrors) {
  const auto ds = small_dataset();
  const auto header = store::encode_header_frame(ds.model_id, ds.num_layers, ds.hidden_dim);
  const auto rec = store::encode_record_frame(ds.records[0]);

  auto ingest = [](const std::string& s) {
    std::istringstream in(s);
    return store::ingest_stream(in);
  };
  EXPECT_NE(error_of([&] { ingest(rec); }).find("header frame absent"), std::string::npos);
  EXPECT_NE(error_of([&] { ingest(""); }).find("header frame absent"), std::string::npos);

  const auto wide = store::encode_header_frame(ds.model_id, ds.num_layers, ds.hidden_dim + 1);
  EXPECT_NE(error_of([&] { ingest(wide + rec); }).find("dimension mismatch in frame 0"),
            std::string::npos);

  auto corrupt = rec;
  corrupt.back() ^= 0x01;
  EXPECT_EQ(error_of([&] { ingest(header + corrupt); }), "checksum mismatch for prompt_id 7");
  EXPECT_NE(error_of([&] { ingest(header + rec.substr(0, 10)); }).find("truncated"),
            std::string::npos);
}

TEST(SelectLayer, RowsFollowRecordsAndLabels) {
  const auto ds = small_dataset();
  const auto m = store::select_layer(ds, 1);
  ASSERT_EQ(m.X.rows(), 2);
  ASSERT_EQ(m.X.cols(), 2);
  EXPECT_EQ(m.X(0, 0), 0.5);
  EXPECT_EQ(m.X(1, 1), 8.0);
  EXPECT_EQ(m.y, (std::vector<int>{0, 1}));
  const std::vector<std::size_t> rows{1};
  EXPECT_EQ(store::select_layer(ds, 0, rows).X(0, 0), 3.25);
  EXPECT_NE(error_of([&] { store::select_layer(ds, 2); }).find("layer out of range"),
            std::string::npos);
}

TEST(Synth, DeterministicAndShiftedOnAxisZero) {
  store::SynthConfig cfg;
  cfg.n_per_class = 200;
  cfg.num_layers = 4;
  cfg.hidden_dim = 8;
  cfg.separation = 4.0;
  cfg.signal_from_layer = 2;
  const auto a = store::synth_clusters(cfg);
  EXPECT_EQ(to_bytes(a), to_bytes(store::synth_clusters(cfg)));
  cfg.seed = 43;
  EXPECT_NE(to_bytes(a), to_bytes(store::synth_clusters(cfg)));

  for (int layer = 0; layer < 4; ++layer) {
    const auto m = store::select_layer(a, layer);
    double mean[2] = {0, 0};
    for (Eigen::Index i = 0; i < m.X.rows(); ++i) mean[m.y[i]] += m.X(i, 0) / 200.0;
    const double gap = mean[1] - mean[0];
    if (layer >= 2) {
      EXPECT_NEAR(gap, 4.0, 0.5) << "layer " << layer;
    } else {
      EXPECT_NEAR(gap, 0.0, 0.5) << "layer " << layer;
    }
  }
  EXPECT_EQ(a.records[0].category, Category::kBenign);
  EXPECT_EQ(a.records[200].category, Category::kMalicious);
  EXPECT_EQ(a.records[209].category, Category::kTap);
}

TEST(Synth, ZeroSeparationClassesShareDistribution) {
  store::SynthConfig cfg;
  cfg.n_per_class = 2000;
  cfg.num_layers = 1;
  cfg.hidden_dim = 2;
  cfg.separation = 0.0;
  const auto m = store::select_layer(store::synth_clusters(cfg), 0);
  double mean[2] = {0, 0}, var[2] = {0, 0};
  for (Eigen::Index i = 0; i < m.X.rows(); ++i) {
    mean[m.y[i]] += m.X(i, 0) / 2000.0;
    var[m.y[i]] += m.X(i, 0) * m.X(i, 0) / 2000.0;
  }
  // Standard error of a mean over 2000 unit draws is ~0.022.
  EXPECT_NEAR(mean[0], 0.0, 0.1);
  EXPECT_NEAR(mean[1], 0.0, 0.1);
  EXPECT_NEAR(var[0], 1.0, 0.1);
  EXPECT_NEAR(var[1], 1.0, 0.1);
}

TEST(Synth, RejectsBadArguments) {
  store::SynthConfig cfg;
  cfg.signal_from_layer = 9;
  EXPECT_THROW(store::synth_clusters(cfg), Error);
  cfg = {};
  cfg.separation = -1;
  EXPECT_THROW(store::synth_clusters(cfg), Error);
  cfg = {};
  cfg.n_per_class = 0;
  EXPECT_THROW(store::synth_clusters(cfg), Error);
}
