#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "quadrank/adadelta.hpp"
#include "quadrank/core.hpp"
#include "quadrank/model.hpp"

namespace quadrank {

// Model file layout (all integers and floats little-endian):
//   "QRNK" | u32 version | u32 len, architecture bytes | u32 layer count |
//   per layer: u32 n, n x f32 parameters, u32 m, m x f32 running statistics |
//   u32 section count | per section: 4-byte tag, u64 length, payload |
//   u32 CRC32 of all preceding bytes.
// Section "ADLT" holds optimizer state for resuming training:
//   u64 epoch | f64 rho | f64 epsilon | u64 n | n x f64 Eg | n x f64 Ex.

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::string_view kModelMagic = "QRNK";

struct TrainingState {
  std::uint64_t epoch = 0;
  AdadeltaState optimizer;
  bool operator==(const TrainingState&) const = default;
};

struct ModelFile {
  std::uint32_t version = kModelFormatVersion;
  ResponseModel model;
  std::optional<TrainingState> training;
};

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    out_.append(reinterpret_cast<const char*>(b), sizeof(U));
  }
  void raw(std::string_view s) { out_.append(s); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view in) : in_(in) {}

  template <class U>
  U get() {
    need(sizeof(U));
    unsigned char b[sizeof(U)];
    std::memcpy(b, in_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw Error("bad model file: truncated");
  }
  std::string_view in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_model(const ResponseModel& model,
                                const TrainingState* training = nullptr) {
  detail::ByteWriter w;
  w.raw(kModelMagic);
  w.put<std::uint32_t>(kModelFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.architecture().size()));
  w.raw(model.architecture());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.layers().size()));
  for (std::size_t k = 0; k < model.layers().size(); ++k) {
    const auto np = model.param_size(k);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(np));
    for (std::size_t i = 0; i < np; ++i) w.put<float>(model.params()[model.param_offset(k) + i]);
    const auto nb = model.buffer_size(k);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(nb));
    for (std::size_t i = 0; i < nb; ++i) w.put<float>(model.buffers()[model.buffer_offset(k) + i]);
  }
  w.put<std::uint32_t>(training ? 1u : 0u);
  if (training) {
    const AdadeltaState& s = training->optimizer;
    detail::ByteWriter sec;
    sec.put<std::uint64_t>(training->epoch);
    sec.put<double>(s.rho);
    sec.put<double>(s.epsilon);
    sec.put<std::uint64_t>(s.size());
    for (double v : s.acc_grad_sq) sec.put<double>(v);
    for (double v : s.acc_update_sq) sec.put<double>(v);
    w.raw("ADLT");
    w.put<std::uint64_t>(sec.str().size());
    w.raw(sec.str());
  }
  const std::uint32_t crc = crc32_of(w.str().data(), w.str().size());
  w.put<std::uint32_t>(crc);
  return std::move(w.str());
}

inline ModelFile decode_model(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != kModelMagic)
    throw Error("bad model file: wrong magic bytes");
  detail::ByteReader r(bytes);
  r.raw(4);
  const auto version = r.get<std::uint32_t>();
  if (version == 0 || version > kModelFormatVersion)
    throw Error("unsupported model file version " + std::to_string(version) +
                " (this build reads version " + std::to_string(kModelFormatVersion) + ")");
  if (bytes.size() < 12) throw Error("bad model file: truncated");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  detail::ByteReader tail(bytes.substr(bytes.size() - 4));
  if (crc32_of(body.data(), body.size()) != tail.get<std::uint32_t>())
    throw Error("bad model file: checksum mismatch");

  detail::ByteReader b(body);
  b.raw(8);
  const auto arch_len = b.get<std::uint32_t>();
  const std::string arch(b.raw(arch_len));
  const auto resolved = resolve_architecture(arch);
  const auto nlayers = b.get<std::uint32_t>();
  if (nlayers != resolved.layers.size())
    throw Error("bad model file: layer count does not match architecture");
  std::vector<float> params, buffers;
  std::vector<std::pair<std::uint32_t, std::uint32_t>> sizes;
  for (std::uint32_t k = 0; k < nlayers; ++k) {
    const auto np = b.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < np; ++i) params.push_back(b.get<float>());
    const auto nb = b.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < nb; ++i) buffers.push_back(b.get<float>());
    sizes.emplace_back(np, nb);
  }
  ModelFile file;
  file.version = version;
  file.model = make_model_from_parts<float>(arch, std::move(params), std::move(buffers));
  for (std::size_t k = 0; k < nlayers; ++k) {
    if (sizes[k].first != file.model.param_size(k) || sizes[k].second != file.model.buffer_size(k))
      throw Error("bad model file: layer " + std::to_string(k) + " payload size mismatch");
  }
  const auto nsections = b.get<std::uint32_t>();
  for (std::uint32_t s = 0; s < nsections; ++s) {
    const std::string_view tag = b.raw(4);
    const auto len = b.get<std::uint64_t>();
    if (len > b.remaining()) throw Error("bad model file: truncated section");
    const std::string_view payload = b.raw(static_cast<std::size_t>(len));
    if (tag != "ADLT") continue;  // unknown sections are skipped
    detail::ByteReader p(payload);
    TrainingState t;
    t.epoch = p.get<std::uint64_t>();
    t.optimizer.rho = p.get<double>();
    t.optimizer.epsilon = p.get<double>();
    const auto n = p.get<std::uint64_t>();
    if (n != file.model.param_count())
      throw Error("bad model file: optimizer state does not match parameter count");
    t.optimizer.acc_grad_sq.resize(n);
    t.optimizer.acc_update_sq.resize(n);
    for (auto& v : t.optimizer.acc_grad_sq) v = p.get<double>();
    for (auto& v : t.optimizer.acc_update_sq) v = p.get<double>();
    file.training = std::move(t);
  }
  if (b.remaining() != 0) throw Error("bad model file: trailing bytes");
  return file;
}

inline void save_model(const ResponseModel& model, const std::filesystem::path& path,
                       const TrainingState* training = nullptr) {
  write_file_atomic(path, encode_model(model, training));
}

inline ModelFile load_model_file(const std::filesystem::path& path) {
  return decode_model(read_file(path));
}

inline ResponseModel load_model(const std::filesystem::path& path) {
  return load_model_file(path).model;
}

}  // namespace quadrank
