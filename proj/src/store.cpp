#include "actgate/store.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include <zlib.h>

#include "actgate/error.hpp"
#include "actgate/prng.hpp"

namespace actgate::store {
namespace {

constexpr std::array<char, 4> kMagic = {'A', 'C', 'T', 'V'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint8_t kDtypeFloat32 = 0;
constexpr std::size_t kRecordPrefixBytes = 8 + 1 + 1 + 2 + 4;

constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {
    "benign",        "malicious", "autodan", "cipher",    "codechameleon",
    "deepinception", "gcg",       "ica",     "jailbroken", "pair",
    "tap"};

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void bytes(std::string_view s) { buf_.append(s); }
  std::string& str() { return buf_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  bool has(std::size_t n) const { return data_.size() - pos_ >= n; }
  std::size_t remaining() const { return data_.size() - pos_; }

  std::uint8_t u8() { return static_cast<std::uint8_t>(take(1)[0]); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::string_view take(std::size_t n) {
    if (!has(n)) throw Error("truncated");
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

 private:
  std::uint64_t le(int n) {
    auto b = take(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::string read_exact(std::istream& in, std::size_t n) {
  std::string buf(n, '\0');
  in.read(buf.data(), static_cast<std::streamsize>(n));
  buf.resize(static_cast<std::size_t>(in.gcount()));
  return buf;
}

std::string encode_header(std::string_view model_id, std::uint32_t num_layers,
                          std::uint32_t hidden_dim, std::uint64_t record_count) {
  if (model_id.size() > 0xffff) throw Error("model_id longer than 65535 bytes");
  ByteWriter w;
  w.bytes(std::string_view(kMagic.data(), kMagic.size()));
  w.u16(kVersion);
  w.u16(0);
  w.u16(static_cast<std::uint16_t>(model_id.size()));
  w.bytes(model_id);
  w.u32(num_layers);
  w.u32(hidden_dim);
  w.u64(record_count);
  w.u8(kDtypeFloat32);
  return std::move(w.str());
}

struct Header {
  std::string model_id;
  std::uint32_t num_layers = 0;
  std::uint32_t hidden_dim = 0;
  std::uint64_t record_count = 0;
};

// Parses a header from the front of `r`; used by both file and frame readers.
Header decode_header(ByteReader& r) {
  try {
    auto magic = r.take(4);
    if (std::memcmp(magic.data(), kMagic.data(), 4) != 0) throw Error("bad magic");
    const auto version = r.u16();
    if (version != kVersion) {
      throw Error("unsupported version " + std::to_string(version));
    }
    r.u16();  // flags
    Header h;
    const auto id_len = r.u16();
    h.model_id = std::string(r.take(id_len));
    h.num_layers = r.u32();
    h.hidden_dim = r.u32();
    h.record_count = r.u64();
    const auto dtype = r.u8();
    if (dtype != kDtypeFloat32) throw Error("unsupported dtype " + std::to_string(dtype));
    if (h.num_layers == 0 || h.hidden_dim == 0) {
      throw Error("header declares zero num_layers or hidden_dim");
    }
    return h;
  } catch (const Error& e) {
    if (std::string_view(e.what()) == "truncated") throw Error("truncated header");
    throw;
  }
}

std::string payload_bytes(const std::vector<float>& values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(values[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

std::uint32_t crc_of(std::string_view bytes) {
  return crc32(std::span(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size()));
}

std::string encode_record(const ActivationRecord& rec) {
  ByteWriter w;
  const auto payload = payload_bytes(rec.values);
  w.u64(rec.prompt_id);
  w.u8(static_cast<std::uint8_t>(rec.category));
  w.u8(rec.label);
  w.u16(0);
  w.u32(crc_of(payload));
  w.bytes(payload);
  return std::move(w.str());
}

// `body` holds exactly one record; `index` is only used for messages.
ActivationRecord decode_record(std::string_view body, const Header& h, std::uint64_t index) {
  const std::size_t floats = static_cast<std::size_t>(h.num_layers) * h.hidden_dim;
  ByteReader r(body);
  ActivationRecord rec;
  rec.prompt_id = r.u64();
  const auto code = r.u8();
  if (code >= kNumCategories) {
    throw Error("record " + std::to_string(index) + ": category code " + std::to_string(code) +
                " out of range");
  }
  rec.category = static_cast<Category>(code);
  rec.label = r.u8();
  r.u16();
  const auto crc = r.u32();
  const auto payload = r.take(floats * 4);
  if (crc_of(payload) != crc) {
    throw Error("checksum mismatch for prompt_id " + std::to_string(rec.prompt_id));
  }
  rec.values.resize(floats);
  for (std::size_t i = 0; i < floats; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) {
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * i + b])) << (8 * b);
    }
    const float v = std::bit_cast<float>(bits);
    if (!std::isfinite(v)) {
      throw Error("non-finite value in record " + std::to_string(index) + " (prompt_id " +
                  std::to_string(rec.prompt_id) + ")");
    }
    rec.values[i] = v;
  }
  if (rec.label != binary_label(rec.category)) {
    throw Error("record " + std::to_string(index) + ": label inconsistent with category");
  }
  return rec;
}

void check_conforms(const ActivationRecord& rec, std::size_t expected, std::size_t index) {
  if (rec.values.size() != expected) {
    throw Error("dimension mismatch in record " + std::to_string(index) + ": " +
                std::to_string(rec.values.size()) + " values, expected " +
                std::to_string(expected));
  }
}

}  // namespace

std::string_view category_name(Category c) {
  return kCategoryNames.at(static_cast<std::size_t>(c));
}

Category parse_category(std::string_view name) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == name) return static_cast<Category>(i);
  }
  if (name == "codechamelon") return Category::kCodeChameleon;
  throw Error("unknown category '" + std::string(name) + "'");
}

Category category_from_code(int code) {
  if (code < 0 || code >= kNumCategories) {
    throw Error("category code " + std::to_string(code) + " out of range");
  }
  return static_cast<Category>(code);
}

ActivationRecord make_record(std::uint64_t prompt_id, Category category,
                             std::vector<float> values) {
  return ActivationRecord{prompt_id, category, binary_label(category), std::move(values)};
}

std::span<const float> ActivationDataset::vector(std::size_t record, std::size_t layer) const {
  const auto& values = records.at(record).values;
  return std::span<const float>(values).subspan(layer * hidden_dim, hidden_dim);
}

void ActivationDataset::validate() const {
  if (num_layers < 1) throw Error("num_layers must be >= 1");
  if (hidden_dim < 1) throw Error("hidden_dim must be >= 1");
  if (model_id.size() > 0xffff) throw Error("model_id longer than 65535 bytes");
  const std::size_t expected = static_cast<std::size_t>(num_layers) * hidden_dim;
  std::unordered_set<std::uint64_t> ids;
  ids.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    check_conforms(rec, expected, i);
    if (static_cast<int>(rec.category) >= kNumCategories) {
      throw Error("record " + std::to_string(i) + ": category out of range");
    }
    if (rec.label != binary_label(rec.category)) {
      throw Error("record " + std::to_string(i) + ": label inconsistent with category");
    }
    for (float v : rec.values) {
      if (!std::isfinite(v)) {
        throw Error("non-finite value in record " + std::to_string(i));
      }
    }
    if (!ids.insert(rec.prompt_id).second) {
      throw Error("duplicate prompt_id " + std::to_string(rec.prompt_id));
    }
  }
}

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1u << 30));
    crc = ::crc32(crc, bytes.data() + offset, n);
    offset += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t write_dataset(const ActivationDataset& dataset, std::ostream& out) {
  dataset.validate();
  const auto header = encode_header(dataset.model_id, dataset.num_layers, dataset.hidden_dim,
                                    dataset.records.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& rec : dataset.records) {
    const auto bytes = encode_record(rec);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  if (!out) throw Error("write failed");
  return dataset.records.size();
}

std::uint64_t write_dataset(const ActivationDataset& dataset, const std::filesystem::path& path) {
  dataset.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  const auto n = write_dataset(dataset, out);
  out.close();
  if (!out) throw Error("write failed for '" + path.string() + "'");
  return n;
}

ActivationDataset read_dataset(std::istream& in) {
  // Fixed-size prefix first, then the variable-length model_id and the tail.
  auto prefix = read_exact(in, 10);
  if (prefix.size() >= 4 && std::memcmp(prefix.data(), kMagic.data(), 4) != 0) {
    throw Error("bad magic");
  }
  if (prefix.size() < 10) throw Error("truncated header");
  const std::size_t id_len = static_cast<unsigned char>(prefix[8]) |
                             (static_cast<std::size_t>(static_cast<unsigned char>(prefix[9])) << 8);
  auto rest = read_exact(in, id_len + 4 + 4 + 8 + 1);
  const std::string head = prefix + rest;
  ByteReader hr(head);
  const Header h = decode_header(hr);

  ActivationDataset ds;
  ds.model_id = h.model_id;
  ds.num_layers = h.num_layers;
  ds.hidden_dim = h.hidden_dim;
  const std::size_t record_bytes =
      kRecordPrefixBytes + static_cast<std::size_t>(h.num_layers) * h.hidden_dim * 4;
  ds.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(h.record_count, 1u << 20)));
  for (std::uint64_t k = 0; k < h.record_count; ++k) {
    const auto body = read_exact(in, record_bytes);
    if (body.size() != record_bytes) throw Error("truncated at record " + std::to_string(k));
    ds.records.push_back(decode_record(body, h, k));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error("trailing bytes after " + std::to_string(h.record_count) + " records");
  }
  ds.validate();
  return ds;
}

ActivationDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return read_dataset(in);
}

std::string encode_header_frame(std::string_view model_id, std::uint32_t num_layers,
                                std::uint32_t hidden_dim) {
  const auto body = encode_header(model_id, num_layers, hidden_dim, 0);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.bytes(body);
  return std::move(w.str());
}

std::string encode_record_frame(const ActivationRecord& record) {
  const auto body = encode_record(record);
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(body.size()));
  w.bytes(body);
  return std::move(w.str());
}

ActivationDataset ingest_stream(std::istream& in) {
  std::optional<Header> header;
  ActivationDataset ds;
  std::size_t record_bytes = 0;
  std::uint64_t index = 0;
  while (true) {
    const auto len_bytes = read_exact(in, 4);
    if (len_bytes.empty()) break;
    if (len_bytes.size() < 4) throw Error("truncated frame length");
    ByteReader lr(len_bytes);
    const auto len = lr.u32();
    const auto body = read_exact(in, len);
    if (body.size() != len) throw Error("truncated frame body");

    if (!header) {
      if (len < 4 || std::memcmp(body.data(), kMagic.data(), 4) != 0) {
        throw Error("header frame absent: first frame is not an ACTV header");
      }
      ByteReader r(body);
      header = decode_header(r);
      ds.model_id = header->model_id;
      ds.num_layers = header->num_layers;
      ds.hidden_dim = header->hidden_dim;
      record_bytes = kRecordPrefixBytes +
                     static_cast<std::size_t>(header->num_layers) * header->hidden_dim * 4;
      continue;
    }
    if (len != record_bytes) {
      throw Error("dimension mismatch in frame " + std::to_string(index) + ": " +
                  std::to_string(len) + " bytes, expected " + std::to_string(record_bytes));
    }
    ds.records.push_back(decode_record(body, *header, index));
    ++index;
  }
  if (!header) throw Error("header frame absent: empty stream");
  ds.validate();
  return ds;
}

LabeledMatrix select_layer(const ActivationDataset& dataset, int layer) {
  std::vector<std::size_t> rows(dataset.records.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return select_layer(dataset, layer, rows);
}

LabeledMatrix select_layer(const ActivationDataset& dataset, int layer,
                           std::span<const std::size_t> rows) {
  if (layer < 0 || static_cast<std::uint32_t>(layer) >= dataset.num_layers) {
    throw Error("layer out of range: " + std::to_string(layer) + " not in [0, " +
                std::to_string(dataset.num_layers) + ")");
  }
  LabeledMatrix m;
  m.layer = layer;
  m.X.resize(static_cast<Eigen::Index>(rows.size()), dataset.hidden_dim);
  m.y.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto v = dataset.vector(rows[r], static_cast<std::size_t>(layer));
    for (std::size_t j = 0; j < v.size(); ++j) {
      m.X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = v[j];
    }
    m.y.push_back(dataset.records[rows[r]].label);
  }
  return m;
}

ActivationDataset synth_clusters(const SynthConfig& config) {
  if (config.n_per_class < 1) throw Error("n_per_class must be >= 1");
  if (config.num_layers < 1 || config.hidden_dim < 1) throw Error("invalid dimensions");
  if (config.signal_from_layer < 0 || config.signal_from_layer > config.num_layers) {
    throw Error("signal_from_layer must lie in [0, num_layers]");
  }
  if (!(config.separation >= 0.0)) throw Error("separation must be >= 0");

  ActivationDataset ds;
  std::ostringstream id;
  id << "synth:sep=" << config.separation << ",from=" << config.signal_from_layer
     << ",seed=" << config.seed;
  ds.model_id = id.str();
  ds.num_layers = static_cast<std::uint32_t>(config.num_layers);
  ds.hidden_dim = static_cast<std::uint32_t>(config.hidden_dim);

  SplitMix64 rng(config.seed);
  const auto n = static_cast<std::uint64_t>(config.n_per_class);
  const std::size_t d = static_cast<std::size_t>(config.hidden_dim);
  ds.records.reserve(2 * n);
  for (std::uint64_t i = 0; i < 2 * n; ++i) {
    const bool attack = i >= n;
    const Category cat = attack ? category_from_code(1 + static_cast<int>((i - n) % 10))
                                : Category::kBenign;
    std::vector<float> values(static_cast<std::size_t>(config.num_layers) * d);
    for (int l = 0; l < config.num_layers; ++l) {
      for (std::size_t j = 0; j < d; ++j) {
        double v = rng.normal();
        if (attack && j == 0 && l >= config.signal_from_layer) v += config.separation;
        values[static_cast<std::size_t>(l) * d + j] = static_cast<float>(v);
      }
    }
    ds.records.push_back(make_record(i, cat, std::move(values)));
  }
  return ds;
}

}  // namespace actgate::store
