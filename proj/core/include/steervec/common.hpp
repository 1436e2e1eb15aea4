#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace steervec {

inline constexpr std::string_view kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Errors

enum class Errc {
  io_error,
  invalid_argument,
  parse_error,
  missing_translation,
  sequence_too_long,
  diverged_training,
  non_finite_loss,
  empty_slice,
  degenerate_sample,
  unknown_language,
  duplicate_language,
  model_mismatch,
  version_mismatch,
  corrupt_file,
  degenerate_vectors,
  no_language_signal,
  degenerate_direction,
  shape_mismatch,
  mode_mismatch,
  probe_degenerate,
  empty_position_bucket,
  insufficient_languages,
  empty_input,
};

std::string_view errc_name(Errc c);

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg),
        code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void raise(Errc code, const std::string& msg) {
  throw Error(code, msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 core with hand-rolled distributions so
// that streams are identical across standard libraries.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

  std::uint64_t u64();
  // uniform integer in [lo, hi], inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  // uniform in [0, 1)
  double real01();
  double normal(double mean = 0.0, double stddev = 1.0);
  // index sampled from non-negative weights (need not be normalized)
  std::size_t categorical(std::span<const double> weights);

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// 256-bit content digest (4 independent FNV-1a-64 lanes). Used for model and
// corpus provenance hashes; an integrity check, not a cryptographic one.

struct Digest256 {
  std::array<std::uint8_t, 32> bytes{};
  bool operator==(const Digest256&) const = default;
  std::string hex() const;
};

class DigestBuilder {
 public:
  DigestBuilder();
  void update(const void* data, std::size_t len);
  void update_u32(std::uint32_t v);
  void update_u64(std::uint64_t v);
  void update_f32(std::span<const float> v);
  void update_str(std::string_view s);
  Digest256 finish() const;

 private:
  std::array<std::uint64_t, 4> lanes_;
};

// ---------------------------------------------------------------------------
// Little-endian binary buffers for file formats.

class BinaryWriter {
 public:
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f32s(std::span<const float> v);
  void bytes(const void* data, std::size_t len);
  void str(std::string_view s);  // u32 length prefix + raw bytes

  const std::string& data() const { return buf_; }
  std::size_t size() const { return buf_.size(); }
  // appends a CRC32 (of everything written so far) as a trailing u32
  void finish_crc32();

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::string_view buf) : buf_(buf) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  void f32s(std::span<float> out);
  void bytes(void* out, std::size_t len);
  std::string str();

  std::size_t remaining() const { return buf_.size() - pos_; }
  // validates the trailing CRC32 over buf[0, size-4); call before reading
  void check_crc32() const;
  // drops the trailing 4 CRC bytes from the readable range
  void strip_crc32();

 private:
  void need(std::size_t n) const;
  std::string_view buf_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::string_view data);

// ---------------------------------------------------------------------------
// Filesystem helpers. All artifact writes go through atomic_write_file
// (temp file in the destination directory + rename).

std::string read_file(const std::filesystem::path& path);
void atomic_write_file(const std::filesystem::path& path, std::string_view data);
Digest256 file_digest(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Threading. resolve_threads: explicit request > STEERVEC_THREADS env >
// hardware concurrency. parallel_for partitions [0, n) across workers;
// results must be written to per-index slots so the outcome is independent
// of the thread count.

int resolve_threads(int requested);
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

inline bool is_finite(float v) { return v == v && v < 1e30f && v > -1e30f; }

}  // namespace steervec
