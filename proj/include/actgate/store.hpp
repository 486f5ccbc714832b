#pragma once

// Labeled last-token activation datasets and the ACTV binary format.
//
// ACTV layout (all integers little-endian):
//   header : "ACTV" | u16 version=1 | u16 flags=0 | u16 len + model_id bytes
//            | u32 num_layers | u32 hidden_dim | u64 record_count | u8 dtype=0
//   record : u64 prompt_id | u8 category | u8 label | u16 reserved
//            | u32 crc32(payload) | payload
//   payload: num_layers * hidden_dim float32, layer-major
//
// Stored layer l is the output of transformer block l+1; the embedding
// output is never stored.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace actgate::store {

enum class Category : std::uint8_t {
  kBenign = 0,
  kMalicious = 1,
  kAutoDan = 2,
  kCipher = 3,
  kCodeChameleon = 4,
  kDeepInception = 5,
  kGcg = 6,
  kIca = 7,
  kJailbroken = 8,
  kPair = 9,
  kTap = 10,
};

inline constexpr int kNumCategories = 11;

std::string_view category_name(Category c);
/// Accepts the lowercase names used in prompt manifests.
Category parse_category(std::string_view name);
Category category_from_code(int code);

constexpr std::uint8_t binary_label(Category c) {
  return c == Category::kBenign ? 0 : 1;
}

struct ActivationRecord {
  std::uint64_t prompt_id = 0;
  Category category = Category::kBenign;
  std::uint8_t label = 0;
  // num_layers * hidden_dim values, layer-major.
  std::vector<float> values;

  bool operator==(const ActivationRecord&) const = default;
};

ActivationRecord make_record(std::uint64_t prompt_id, Category category,
                             std::vector<float> values);

struct ActivationDataset {
  std::string model_id;
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::vector<ActivationRecord> records;

  std::span<const float> vector(std::size_t record, std::size_t layer) const;

  /// Throws actgate::Error naming the first violated invariant.
  void validate() const;

  bool operator==(const ActivationDataset&) const = default;
};

struct LabeledMatrix {
  Eigen::MatrixXd X;
  std::vector<int> y;
  int layer = 0;
};

// ---------------------------------------------------------------------------
// ACTV files

std::uint64_t write_dataset(const ActivationDataset& dataset, std::ostream& out);
std::uint64_t write_dataset(const ActivationDataset& dataset,
                            const std::filesystem::path& path);

ActivationDataset read_dataset(std::istream& in);
ActivationDataset read_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Wire framing: every frame is a u32 little-endian byte length followed by
// the frame body. The first frame carries an ACTV header (record_count is
// ignored), every following frame one record in the ACTV record layout.

std::string encode_header_frame(std::string_view model_id,
                                std::uint32_t num_layers,
                                std::uint32_t hidden_dim);
std::string encode_record_frame(const ActivationRecord& record);

/// Reads frames until end of stream.
ActivationDataset ingest_stream(std::istream& in);

// ---------------------------------------------------------------------------

/// Rows of X are record vectors at `layer`, in record order.
LabeledMatrix select_layer(const ActivationDataset& dataset, int layer);

/// Same as select_layer restricted to the given record indices.
LabeledMatrix select_layer(const ActivationDataset& dataset, int layer,
                           std::span<const std::size_t> rows);

struct SynthConfig {
  int n_per_class = 100;
  int num_layers = 8;
  int hidden_dim = 64;
  double separation = 4.0;
  int signal_from_layer = 0;
  std::uint64_t seed = 42;
};

/// Benign records (ids 0..n-1) then jailbreak records (ids n..2n-1, attack
/// categories cycling through 1..10). Entries are standard normal draws from
/// SplitMix64/Box-Muller in record, layer, dimension order; jailbreak records
/// get +separation on axis 0 at layers >= signal_from_layer.
ActivationDataset synth_clusters(const SynthConfig& config);

std::uint32_t crc32(std::span<const unsigned char> bytes);

}  // namespace actgate::store
