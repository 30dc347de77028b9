#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sigmt {

/// Library-wide error type. Messages carry enough context (file, line
/// number, tensor name, ...) to act on without a debugger.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] void fail(const std::string& msg);

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// All randomness in the library flows through this wrapper so that results
// are identical across platforms: the std distributions are implementation
// defined, so we derive uniform draws from raw mt19937_64 output ourselves.
// ---------------------------------------------------------------------------
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

  /// Uniform real in [0, 1).
  double real01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  /// Uniform real in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * real01(); }

  /// In-place Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------
// UTF-8
// ---------------------------------------------------------------------------

/// Byte length of the UTF-8 codepoint starting at `first`; 1 for invalid
/// lead bytes so scanning always advances.
std::size_t utf8_len(unsigned char first);

/// Splits text into codepoints (each returned element is one codepoint's
/// byte sequence).
std::vector<std::string> utf8_codepoints(std::string_view text);

/// Encodes a single codepoint as UTF-8.
std::string utf8_encode(char32_t cp);

// ---------------------------------------------------------------------------
// Strings
// ---------------------------------------------------------------------------
std::vector<std::string> split(std::string_view s, char sep);
std::vector<std::string> split_ws(std::string_view s);
std::string trim(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::string lower(std::string_view s);

/// Round-trippable formatting for doubles (17 significant digits).
std::string format_double(double v);
double parse_double(std::string_view s, const std::string& context);
long long parse_int(std::string_view s, const std::string& context);

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// FNV-1a 64-bit hash, used for config/content fingerprints in manifests.
std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t v);

}  // namespace sigmt
