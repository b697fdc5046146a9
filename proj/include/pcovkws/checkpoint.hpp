#pragma once

// Checkpoint container. All integers little-endian.
//
//   "PCOV"  u16 version
//   u32 meta length, meta bytes (canonical JSON: config + label vocabularies)
//   u32 tensor count, then per tensor:
//     u16 name length, name, u8 dtype (1 = f32, 2 = f64), u8 rank,
//     u64 extent * rank, payload (IEEE-754, little-endian)
//   u32 profile count, then per profile:
//     u16 name length, name, u32 n_enroll, u32 dim, f64 * dim keyword anchor,
//     f64 * dim speaker anchor
//   u32 CRC-32 (zlib) of every preceding byte

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pcovkws/config.hpp"
#include "pcovkws/inference.hpp"
#include "pcovkws/model.hpp"

namespace pcovkws {

inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what) : std::runtime_error("checkpoint: " + what) {}
};

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<double> values;  // exact for both dtypes

  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

struct ModelMeta {
  TrainConfig config;
  std::vector<std::string> keywords;
  std::vector<std::string> speakers;

  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

struct Checkpoint {
  ModelMeta meta;
  std::vector<TensorRecord> tensors;
  std::map<std::string, EnrollmentProfile> profiles;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline Json to_json(const ModelMeta& m) {
  return {{"config", to_json(m.config)}, {"keywords", m.keywords}, {"speakers", m.speakers}};
}

inline ModelMeta model_meta_from_json(const Json& j) {
  detail::reject_unknown(j, {"config", "keywords", "speakers"}, "<meta>");
  ModelMeta m;
  m.config = train_config_from_json(j.at("config"));
  m.keywords = j.at("keywords").get<std::vector<std::string>>();
  m.speakers = j.at("speakers").get<std::vector<std::string>>();
  return m;
}

namespace detail {

class Writer {
 public:
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { buf_ += s; }
  void name(const std::string& s) {
    if (s.size() > 0xffff) throw CheckpointError("name too long: " + s.substr(0, 40));
    uint(static_cast<std::uint16_t>(s.size()));
    bytes(s);
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : d_(data) {}

  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(d_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(d_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string name() { return bytes(uint<std::uint16_t>()); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (d_.size() - pos_ < n) throw CheckpointError("truncated at byte " + std::to_string(pos_));
  }
  std::string_view d_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::string_view s) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers
  std::size_t off = 0;
  while (off < s.size()) {
    const std::size_t n = std::min<std::size_t>(s.size() - off, 1u << 30);
    c = crc32(c, reinterpret_cast<const Bytef*>(s.data() + off), static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(c);
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  detail::Writer w;
  w.bytes("PCOV");
  w.uint(kCheckpointVersion);
  const std::string meta = dump_canonical(to_json(ck.meta));
  w.uint(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);
  w.uint(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    if (t.values.size() != shape_size(t.shape)) throw CheckpointError("tensor " + t.name + " size/shape mismatch");
    w.name(t.name);
    w.uint(static_cast<std::uint8_t>(t.dtype));
    w.uint(static_cast<std::uint8_t>(t.shape.size()));
    for (std::size_t e : t.shape) w.uint(static_cast<std::uint64_t>(e));
    for (double v : t.values) {
      if (t.dtype == DType::f32) {
        w.f32(static_cast<float>(v));
      } else {
        w.f64(v);
      }
    }
  }
  w.uint(static_cast<std::uint32_t>(ck.profiles.size()));
  for (const auto& [name, p] : ck.profiles) {
    if (p.keyword_anchor.size() != p.speaker_anchor.size()) throw CheckpointError("profile " + name + ": ragged anchors");
    w.name(name);
    w.uint(static_cast<std::uint32_t>(p.n_enroll));
    w.uint(static_cast<std::uint32_t>(p.keyword_anchor.size()));
    for (double v : p.keyword_anchor) w.f64(v);
    for (double v : p.speaker_anchor) w.f64(v);
  }
  w.uint(detail::crc32_of(w.buffer()));
  return std::move(w.buffer());
}

inline Checkpoint deserialize(std::string_view data) {
  if (data.size() < 4 + 2 + 4 || data.substr(0, 4) != "PCOV") throw CheckpointError("bad magic (not a checkpoint)");
  const std::size_t body = data.size() - 4;
  detail::Reader tail(data.substr(body));
  const std::uint32_t stored = tail.uint<std::uint32_t>();
  if (stored != detail::crc32_of(data.substr(0, body))) throw CheckpointError("checksum mismatch (file corrupted)");

  detail::Reader r(data.substr(0, body));
  r.bytes(4);
  const auto version = r.uint<std::uint16_t>();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported version " + std::to_string(version));
  Checkpoint ck;
  const std::string meta = r.bytes(r.uint<std::uint32_t>());
  try {
    ck.meta = model_meta_from_json(Json::parse(meta));
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("malformed metadata: ") + e.what());
  }
  const auto n_tensors = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    TensorRecord t;
    t.name = r.name();
    const auto tag = r.uint<std::uint8_t>();
    if (tag != 1 && tag != 2) throw CheckpointError("tensor " + t.name + ": unknown dtype tag " + std::to_string(tag));
    t.dtype = static_cast<DType>(tag);
    const auto rank = r.uint<std::uint8_t>();
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>()));
    const std::size_t n = shape_size(t.shape);
    t.values.resize(n);
    for (std::size_t k = 0; k < n; ++k) t.values[k] = t.dtype == DType::f32 ? r.f32() : r.f64();
    ck.tensors.push_back(std::move(t));
  }
  const auto n_profiles = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_profiles; ++i) {
    const std::string name = r.name();
    EnrollmentProfile p;
    p.n_enroll = r.uint<std::uint32_t>();
    const auto dim = r.uint<std::uint32_t>();
    p.keyword_anchor.resize(dim);
    p.speaker_anchor.resize(dim);
    for (auto& v : p.keyword_anchor) v = r.f64();
    for (auto& v : p.speaker_anchor) v = r.f64();
    ck.profiles.emplace(name, std::move(p));
  }
  if (r.pos() != body) throw CheckpointError("trailing bytes before checksum");
  return ck;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temporary and renames, so a crash never leaves a
// half-written checkpoint behind.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize(ck);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

template <typename S>
constexpr DType dtype_of() {
  return sizeof(S) == 4 ? DType::f32 : DType::f64;
}

template <typename S>
Checkpoint make_checkpoint(PcovModel<S>& model, const ModelMeta& meta) {
  Checkpoint ck;
  ck.meta = meta;
  for (auto* p : model.all_params()) {
    TensorRecord t{p->name, dtype_of<S>(), p->value.shape(), {}};
    t.values.assign(p->value.data().begin(), p->value.data().end());
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

// Rebuilds the model described by the metadata and copies every tensor in.
// Tensors stored at another precision are converted.
template <typename S>
PcovModel<S> model_from_checkpoint(const Checkpoint& ck) {
  const auto& cfg = ck.meta.config;
  auto model = build_model<S>(cfg.encoder, ck.meta.keywords.size(), ck.meta.speakers.size(), cfg.keyword_loss,
                              cfg.speaker_loss, cfg.seed);
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  const auto params = model.all_params();
  if (by_name.size() != params.size()) {
    throw CheckpointError("expected " + std::to_string(params.size()) + " tensors, found " +
                          std::to_string(by_name.size()));
  }
  for (auto* p : params) {
    const auto it = by_name.find(p->name);
    if (it == by_name.end()) throw CheckpointError("missing tensor " + p->name);
    if (it->second->shape != p->value.shape()) {
      throw CheckpointError("tensor " + p->name + " has shape " + shape_str(it->second->shape) + ", model expects " +
                            shape_str(p->value.shape()));
    }
    for (std::size_t i = 0; i < p->size(); ++i) p->value[i] = static_cast<S>(it->second->values[i]);
  }
  return model;
}

}  // namespace pcovkws
