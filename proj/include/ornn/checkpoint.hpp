#pragma once

// Binary checkpoints: model parameters, optional RMSProp state and the
// resolved run configuration.  Byte layout is documented in
// docs/checkpoint_format.md; every integer and real is little-endian.

#include "ornn/models.hpp"
#include "ornn/training.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ornn {

inline constexpr std::array<char, 8> kCheckpointMagic{'O', 'R', 'N', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::uint64_t update = 0;
  std::optional<RmsPropState> optimizer;
  std::string config_json;  ///< resolved configuration of the run that wrote it
  double loss_sum = 0.0;    ///< training losses accumulated since the last on-grid metrics row
  std::uint64_t loss_count = 0;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class LeWriter {
 public:
  explicit LeWriter(std::ostream& os) : os_(os) {}
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void bytes(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void matrix(const std::string& name, const Matrix& m) {
    bytes(name);
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) f64(m(r, c));
  }

 private:
  void put(std::uint64_t v, int n) {
    char buf[8];
    for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os_.write(buf, n);
  }
  std::ostream& os_;
};

class LeReader {
 public:
  explicit LeReader(std::istream& is) : is_(is) {}
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string bytes(std::uint64_t limit = 1u << 24) {
    const std::uint64_t n = u64();
    if (n > limit) throw CheckpointError("checkpoint: string field too long");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) throw CheckpointError("checkpoint: truncated file");
    return s;
  }
  void matrix(const std::string& expected_name, Matrix& m) {
    const std::string name = bytes(256);
    if (name != expected_name) {
      throw CheckpointError("checkpoint: expected tensor " + expected_name + ", found " + name);
    }
    const std::uint64_t rows = u64(), cols = u64();
    if (rows > (1u << 20) || cols > (1u << 20)) throw CheckpointError("checkpoint: tensor too large");
    m.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = f64();
  }

 private:
  std::uint64_t get(int n) {
    unsigned char buf[8];
    is_.read(reinterpret_cast<char*>(buf), n);
    if (!is_) throw CheckpointError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& is_;
};

struct ModelHeader {
  std::uint32_t architecture = 0;
  std::uint32_t nonlinearity = 0;
  std::uint32_t pool = 0;
  std::uint32_t peephole = 0;
};

inline ModelHeader header_of(const Model& m) {
  ModelHeader h;
  h.architecture = static_cast<std::uint32_t>(m.index());
  std::visit([&](const auto& p) {
    using P = std::decay_t<decltype(p)>;
    if constexpr (std::is_same_v<P, LstmParams>) {
      h.peephole = p.peephole ? 1 : 0;
    } else {
      h.nonlinearity = static_cast<std::uint32_t>(p.nonlinearity);
      if constexpr (std::is_same_v<P, PooledLtRnnParams>) h.pool = static_cast<std::uint32_t>(p.pool);
    }
  }, m);
  return h;
}

inline Model empty_model(const ModelHeader& h) {
  if (h.nonlinearity > 2) throw CheckpointError("checkpoint: unknown nonlinearity code");
  const auto nl = static_cast<Nonlinearity>(h.nonlinearity);
  switch (h.architecture) {
    case 0: return SRnnParams{{}, {}, {}, {}, nl};
    case 1: return LtRnnParams{{}, {}, {}, {}, nl};
    case 2: {
      LstmParams p;
      p.peephole = h.peephole != 0;
      return p;
    }
    case 3: {
      if (h.pool < 1) throw CheckpointError("checkpoint: pool size must be >= 1");
      return PooledLtRnnParams{{}, {}, {}, {}, {}, static_cast<int>(h.pool), nl};
    }
    default: throw CheckpointError("checkpoint: unknown architecture code");
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  detail::LeWriter w(os);
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(kCheckpointVersion);
  const detail::ModelHeader h = detail::header_of(ck.model);
  w.u32(h.architecture);
  w.u32(h.nonlinearity);
  w.u32(h.pool);
  w.u32(h.peephole);
  w.u64(ck.update);
  w.bytes(ck.config_json);
  const auto params = tensors(ck.model);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& t : params) w.matrix(std::string(t.name), *t.value);
  w.u32(ck.optimizer ? 1 : 0);
  if (ck.optimizer) {
    const RmsPropState& s = *ck.optimizer;
    w.f64(s.decay);
    w.f64(s.epsilon);
    w.f64(s.learning_rate);
    w.u64(s.step);
    for (const auto& t : tensors(s.cache)) w.matrix(std::string(t.name), *t.value);
  }
  w.f64(ck.loss_sum);
  w.u64(ck.loss_count);
  if (!os) throw CheckpointError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw CheckpointError("checkpoint: bad magic");
  detail::LeReader r(is);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  }
  detail::ModelHeader h;
  h.architecture = r.u32();
  h.nonlinearity = r.u32();
  h.pool = r.u32();
  h.peephole = r.u32();
  Checkpoint ck;
  ck.model = detail::empty_model(h);
  ck.update = r.u64();
  ck.config_json = r.bytes();
  auto params = tensors(ck.model);
  if (r.u32() != params.size()) throw CheckpointError("checkpoint: tensor count mismatch");
  for (auto& t : params) r.matrix(std::string(t.name), *t.value);
  const std::uint32_t has_opt = r.u32();
  if (has_opt > 1) throw CheckpointError("checkpoint: bad optimizer flag");
  if (has_opt) {
    RmsPropState s;
    s.decay = r.f64();
    s.epsilon = r.f64();
    s.learning_rate = r.f64();
    s.step = r.u64();
    s.cache = zeros_like(ck.model);
    for (auto& t : tensors(s.cache)) r.matrix(std::string(t.name), *t.value);
    ck.optimizer = std::move(s);
  }
  ck.loss_sum = r.f64();
  ck.loss_count = r.u64();
  for (const auto& t : tensors(std::as_const(ck.model))) {
    if (!t.value->allFinite()) throw CheckpointError("checkpoint: non-finite entry in " + std::string(t.name));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes");
  return ck;
}

/// Writes to path via a temporary file and a rename, so a crash never leaves a torn checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("checkpoint: cannot open " + tmp.string());
    write_checkpoint(os, ck);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open " + path.string());
  return read_checkpoint(is);
}

}  // namespace ornn
