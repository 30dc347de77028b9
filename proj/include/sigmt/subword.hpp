#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sigmt/util.hpp"

namespace sigmt {

/// Byte-pair-encoding subword model with a reserved-token block at the
/// lowest ids: PAD, BOS, EOS, UNK, SEP, then all language/signal tags.
/// Merges never produce reserved tokens.
class SubwordModel {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;

  /// End-of-word marker appended to the last character of every word before
  /// merging (classic BPE convention).
  static constexpr const char* kEow = "</w>";

  SubwordModel() = default;

  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  int num_reserved() const { return num_reserved_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const {
    return merges_;
  }
  const std::string& token(int id) const;
  bool is_reserved(int id) const { return id >= 0 && id < num_reserved_; }

  /// Id of a reserved tag token; throws if the tag was not registered.
  int tag_id(const std::string& tag) const;
  bool has_token(const std::string& token) const {
    return token_to_id_.count(token) > 0;
  }

  /// Applies merges within each whitespace-separated word. Unknown symbols
  /// map to UNK. BOS/EOS are not added here.
  std::vector<int> encode(std::string_view text) const;

  /// Inverse of encode: concatenates tokens, turns end-of-word markers into
  /// spaces and drops reserved tokens. Throws on out-of-range ids.
  std::string decode(const std::vector<int>& ids) const;

  /// Fingerprint of the full vocabulary; ensemble components must agree.
  std::uint64_t vocab_hash() const;

  void save(const std::filesystem::path& path) const;
  static SubwordModel load(const std::filesystem::path& path);

  friend SubwordModel train_bpe(const std::vector<std::string>& texts,
                                int vocab_size,
                                const std::vector<std::string>& tags);

 private:
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  int num_reserved_ = 0;

  void index_tokens();
  std::vector<std::string> word_symbols(const std::string& word) const;
};

/// Learns a BPE vocabulary of size `vocab_size` (reserved tokens included)
/// by greedy highest-frequency pair merging; frequency ties break by
/// lexicographic pair order. `tags` become reserved tokens after SEP.
SubwordModel train_bpe(const std::vector<std::string>& texts, int vocab_size,
                       const std::vector<std::string>& tags = {});

}  // namespace sigmt
