#include "steervec/common.hpp"

#include <unistd.h>
#include <zlib.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>
#include <thread>

namespace steervec {

std::string_view errc_name(Errc c) {
  switch (c) {
    case Errc::io_error: return "IoError";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::parse_error: return "ParseError";
    case Errc::missing_translation: return "MissingTranslation";
    case Errc::sequence_too_long: return "SequenceTooLong";
    case Errc::diverged_training: return "DivergedTraining";
    case Errc::non_finite_loss: return "NonFiniteLoss";
    case Errc::empty_slice: return "EmptySlice";
    case Errc::degenerate_sample: return "DegenerateSample";
    case Errc::unknown_language: return "UnknownLanguage";
    case Errc::duplicate_language: return "DuplicateLanguage";
    case Errc::model_mismatch: return "ModelMismatch";
    case Errc::version_mismatch: return "VersionMismatch";
    case Errc::corrupt_file: return "CorruptFile";
    case Errc::degenerate_vectors: return "DegenerateVectors";
    case Errc::no_language_signal: return "NoLanguageSignal";
    case Errc::degenerate_direction: return "DegenerateDirection";
    case Errc::shape_mismatch: return "ShapeMismatch";
    case Errc::mode_mismatch: return "ModeMismatch";
    case Errc::probe_degenerate: return "ProbeDegenerate";
    case Errc::empty_position_bucket: return "EmptyPositionBucket";
    case Errc::insufficient_languages: return "InsufficientLanguages";
    case Errc::empty_input: return "EmptyInput";
  }
  return "Error";
}

// ---------------------------------------------------------------------------
// Rng: splitmix64 core (stable across stdlibs), Box-Muller normals.

std::uint64_t Rng::u64() {
  state_ += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) raise(Errc::invalid_argument, "uniform_int: hi < lo");
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  if (span == 0) return static_cast<std::int64_t>(u64());  // full range
  // multiply-shift bounded draw; bias is negligible for span << 2^64
  const unsigned __int128 wide = static_cast<unsigned __int128>(u64()) * span;
  return lo + static_cast<std::int64_t>(wide >> 64);
}

double Rng::real01() {
  return static_cast<double>(u64() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
  if (have_spare_) {
    have_spare_ = false;
    return mean + stddev * spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * real01() - 1.0;
    v = 2.0 * real01() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double m = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * m;
  have_spare_ = true;
  return mean + stddev * u * m;
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) total += w;
  if (!(total > 0.0)) raise(Errc::invalid_argument, "categorical: non-positive weight sum");
  double x = real01() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    x -= weights[i];
    if (x < 0.0) return i;
  }
  return weights.size() - 1;
}

// ---------------------------------------------------------------------------
// Digest

namespace {
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;
constexpr std::array<std::uint64_t, 4> kLaneBasis = {
    0xcbf29ce484222325ull, 0xaf63bd4c8601b7dfull,
    0x6c62272e07bb0142ull, 0x100000001b3c2a47ull};
}  // namespace

DigestBuilder::DigestBuilder() : lanes_(kLaneBasis) {}

void DigestBuilder::update(const void* data, std::size_t len) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    for (std::size_t l = 0; l < 4; ++l) {
      lanes_[l] ^= static_cast<std::uint64_t>(p[i]) + (l << 8);
      lanes_[l] *= kFnvPrime;
    }
  }
}

void DigestBuilder::update_u32(std::uint32_t v) {
  std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                       static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
  update(b, 4);
}

void DigestBuilder::update_u64(std::uint64_t v) {
  update_u32(static_cast<std::uint32_t>(v));
  update_u32(static_cast<std::uint32_t>(v >> 32));
}

void DigestBuilder::update_f32(std::span<const float> v) {
  static_assert(sizeof(float) == 4);
  update(v.data(), v.size() * 4);
}

void DigestBuilder::update_str(std::string_view s) {
  update_u64(s.size());
  update(s.data(), s.size());
}

Digest256 DigestBuilder::finish() const {
  Digest256 d;
  for (std::size_t l = 0; l < 4; ++l) {
    for (std::size_t b = 0; b < 8; ++b) {
      d.bytes[l * 8 + b] = static_cast<std::uint8_t>(lanes_[l] >> (8 * b));
    }
  }
  return d;
}

std::string Digest256::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (auto b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xf]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary buffers

void BinaryWriter::u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>(v >> (8 * i)));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>(v >> (8 * i)));
}

void BinaryWriter::f32(float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  u32(bits);
}

void BinaryWriter::f32s(std::span<const float> v) {
  for (float x : v) f32(x);
}

void BinaryWriter::bytes(const void* data, std::size_t len) {
  buf_.append(static_cast<const char*>(data), len);
}

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.append(s);
}

void BinaryWriter::finish_crc32() { u32(crc32_of(buf_)); }

void BinaryReader::need(std::size_t n) const {
  if (pos_ + n > buf_.size()) raise(Errc::corrupt_file, "truncated buffer");
}

std::uint8_t BinaryReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(buf_[pos_++]);
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[pos_++])) << (8 * i);
  return v;
}

std::uint64_t BinaryReader::u64() {
  std::uint64_t lo = u32();
  std::uint64_t hi = u32();
  return lo | (hi << 32);
}

float BinaryReader::f32() {
  std::uint32_t bits = u32();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

void BinaryReader::f32s(std::span<float> out) {
  for (float& x : out) x = f32();
}

void BinaryReader::bytes(void* out, std::size_t len) {
  need(len);
  std::memcpy(out, buf_.data() + pos_, len);
  pos_ += len;
}

std::string BinaryReader::str() {
  std::uint32_t n = u32();
  need(n);
  std::string s(buf_.substr(pos_, n));
  pos_ += n;
  return s;
}

void BinaryReader::check_crc32() const {
  if (buf_.size() < 4) raise(Errc::corrupt_file, "file too short for checksum");
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) {
    stored |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(buf_[buf_.size() - 4 + i])) << (8 * i);
  }
  const std::uint32_t actual = crc32_of(buf_.substr(0, buf_.size() - 4));
  if (stored != actual) raise(Errc::corrupt_file, "checksum mismatch");
}

void BinaryReader::strip_crc32() {
  if (buf_.size() < 4) raise(Errc::corrupt_file, "file too short for checksum");
  buf_ = buf_.substr(0, buf_.size() - 4);
}

std::uint32_t crc32_of(std::string_view data) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data.data()), static_cast<uInt>(data.size())));
}

// ---------------------------------------------------------------------------
// Filesystem

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(Errc::io_error, "cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) raise(Errc::io_error, "read failed: " + path.string());
  return data;
}

void atomic_write_file(const std::filesystem::path& path, std::string_view data) {
  namespace fs = std::filesystem;
  fs::path dir = path.parent_path();
  if (dir.empty()) dir = ".";
  fs::path tmp = dir / (path.filename().string() + ".tmp." + std::to_string(::getpid()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) raise(Errc::io_error, "cannot create " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) raise(Errc::io_error, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    raise(Errc::io_error, "rename failed: " + path.string() + " (" + ec.message() + ")");
  }
}

Digest256 file_digest(const std::filesystem::path& path) {
  const std::string data = read_file(path);
  DigestBuilder b;
  b.update(data.data(), data.size());
  return b.finish();
}

// ---------------------------------------------------------------------------
// Threading

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("STEERVEC_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  threads = resolve_threads(threads);
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr first_error;
  std::mutex err_mu;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace steervec
