#include "sigmt/subword.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

namespace sigmt {

namespace {

const char* kBaseReserved[] = {"<pad>", "<bos>", "<eos>", "<unk>", "<sep>"};

std::string pair_key(const std::string& a, const std::string& b) {
  return a + '\x1f' + b;
}

/// Counts adjacent symbol pairs, left-to-right with non-overlapping
/// occurrences of identical-symbol pairs (matches what a merge would
/// actually consume).
void count_pairs(const std::vector<std::string>& syms, long freq,
                 std::map<std::pair<std::string, std::string>, long>& counts) {
  std::size_t i = 0;
  while (i + 1 < syms.size()) {
    counts[{syms[i], syms[i + 1]}] += freq;
    i += (syms[i] == syms[i + 1]) ? 2 : 1;
  }
}

/// Replaces non-overlapping occurrences of (a,b) with their concatenation.
std::vector<std::string> apply_merge(const std::vector<std::string>& syms,
                                     const std::string& a,
                                     const std::string& b) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  std::size_t i = 0;
  while (i < syms.size()) {
    if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
      out.push_back(a + b);
      i += 2;
    } else {
      out.push_back(syms[i]);
      ++i;
    }
  }
  return out;
}

}  // namespace

void SubwordModel::index_tokens() {
  token_to_id_.clear();
  token_to_id_.reserve(id_to_token_.size());
  for (int i = 0; i < static_cast<int>(id_to_token_.size()); ++i) {
    auto [it, inserted] = token_to_id_.emplace(id_to_token_[i], i);
    if (!inserted)
      fail("subword model: duplicate token '" + id_to_token_[i] + "'");
  }
}

const std::string& SubwordModel::token(int id) const {
  if (id < 0 || id >= vocab_size())
    fail("subword model: id " + std::to_string(id) + " out of range [0, " +
         std::to_string(vocab_size()) + ")");
  return id_to_token_[static_cast<std::size_t>(id)];
}

int SubwordModel::tag_id(const std::string& tag) const {
  auto it = token_to_id_.find(tag);
  if (it == token_to_id_.end() || !is_reserved(it->second))
    fail("subword model: unknown tag '" + tag + "'");
  return it->second;
}

std::vector<std::string> SubwordModel::word_symbols(
    const std::string& word) const {
  std::vector<std::string> syms = utf8_codepoints(word);
  if (!syms.empty()) syms.back() += kEow;
  return syms;
}

std::vector<int> SubwordModel::encode(std::string_view text) const {
  // Rank map for greedy lowest-rank merging within each word.
  std::unordered_map<std::string, int> rank;
  rank.reserve(merges_.size());
  for (int r = 0; r < static_cast<int>(merges_.size()); ++r)
    rank.emplace(pair_key(merges_[r].first, merges_[r].second), r);

  std::vector<int> ids;
  for (const std::string& word : split_ws(text)) {
    std::vector<std::string> syms = word_symbols(word);
    while (syms.size() > 1) {
      int best = std::numeric_limits<int>::max();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank.find(pair_key(syms[i], syms[i + 1]));
        if (it != rank.end() && it->second < best) best = it->second;
      }
      if (best == std::numeric_limits<int>::max()) break;
      syms = apply_merge(syms, merges_[static_cast<std::size_t>(best)].first,
                         merges_[static_cast<std::size_t>(best)].second);
    }
    for (const std::string& s : syms) {
      auto it = token_to_id_.find(s);
      if (it == token_to_id_.end() || is_reserved(it->second)) {
        ids.push_back(kUnk);
      } else {
        ids.push_back(it->second);
      }
    }
  }
  return ids;
}

std::string SubwordModel::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab_size())
      fail("decode: id " + std::to_string(id) + " out of range");
    if (is_reserved(id)) continue;
    out += id_to_token_[static_cast<std::size_t>(id)];
  }
  const std::string eow = kEow;
  std::string text;
  text.reserve(out.size());
  std::size_t i = 0;
  while (i < out.size()) {
    if (out.compare(i, eow.size(), eow) == 0) {
      text += ' ';
      i += eow.size();
    } else {
      text += out[i];
      ++i;
    }
  }
  while (!text.empty() && text.back() == ' ') text.pop_back();
  return text;
}

std::uint64_t SubwordModel::vocab_hash() const {
  std::string blob = std::to_string(num_reserved_);
  for (const std::string& t : id_to_token_) {
    blob += '\n';
    blob += t;
  }
  return fnv1a64(blob);
}

SubwordModel train_bpe(const std::vector<std::string>& texts, int vocab_size,
                       const std::vector<std::string>& tags) {
  SubwordModel model;
  for (const char* t : kBaseReserved) model.id_to_token_.emplace_back(t);
  for (const std::string& tag : tags) model.id_to_token_.push_back(tag);
  model.num_reserved_ = static_cast<int>(model.id_to_token_.size());

  // Word frequencies over the whole corpus.
  std::map<std::string, long> word_freq;
  for (const std::string& text : texts)
    for (const std::string& w : split_ws(text)) ++word_freq[w];

  struct Word {
    std::vector<std::string> syms;
    long freq;
  };
  std::vector<Word> words;
  words.reserve(word_freq.size());
  std::set<std::string> inventory;
  for (const auto& [word, freq] : word_freq) {
    std::vector<std::string> syms = utf8_codepoints(word);
    syms.back() += SubwordModel::kEow;
    for (const std::string& s : syms) inventory.insert(s);
    words.push_back({std::move(syms), freq});
  }

  std::set<std::string> reserved_set(model.id_to_token_.begin(),
                                     model.id_to_token_.end());
  for (const std::string& s : inventory) model.id_to_token_.push_back(s);

  if (vocab_size <= model.vocab_size())
    fail("train_bpe: vocab_size " + std::to_string(vocab_size) +
         " must exceed reserved + character inventory = " +
         std::to_string(model.vocab_size()));

  std::set<std::string> vocab_set(model.id_to_token_.begin(),
                                  model.id_to_token_.end());
  while (model.vocab_size() < vocab_size) {
    std::map<std::pair<std::string, std::string>, long> counts;
    for (const Word& w : words) count_pairs(w.syms, w.freq, counts);
    // Highest frequency wins; ties break by lexicographic pair order (the
    // std::map iteration order), so the first max is the canonical choice.
    const std::pair<std::string, std::string>* best = nullptr;
    long best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count > best_count &&
          !reserved_set.count(pair.first + pair.second)) {
        best = &pair;
        best_count = count;
      }
    }
    if (!best) break;  // nothing left to merge
    const std::string merged = best->first + best->second;
    model.merges_.push_back(*best);
    for (Word& w : words) w.syms = apply_merge(w.syms, best->first, best->second);
    if (vocab_set.insert(merged).second) model.id_to_token_.push_back(merged);
  }

  model.index_tokens();
  return model;
}

void SubwordModel::save(const std::filesystem::path& path) const {
  std::ostringstream out;
  out << "sigmt-subword v1\n";
  out << "reserved " << num_reserved_ << "\n";
  for (int i = 0; i < num_reserved_; ++i) out << id_to_token_[i] << "\n";
  out << "vocab " << (vocab_size() - num_reserved_) << "\n";
  for (int i = num_reserved_; i < vocab_size(); ++i)
    out << id_to_token_[i] << "\n";
  out << "merges " << merges_.size() << "\n";
  for (const auto& [a, b] : merges_) out << a << '\t' << b << "\n";
  write_file(path, out.str());
}

SubwordModel SubwordModel::load(const std::filesystem::path& path) {
  std::vector<std::string> lines = read_lines(path);
  std::size_t ln = 0;
  auto next = [&]() -> const std::string& {
    if (ln >= lines.size()) fail(path.string() + ": truncated subword model");
    return lines[ln++];
  };
  auto expect_count = [&](const std::string& line, const std::string& key) {
    std::vector<std::string> parts = split_ws(line);
    if (parts.size() != 2 || parts[0] != key)
      fail(path.string() + ": expected '" + key + " <n>', got '" + line + "'");
    return parse_int(parts[1], path.string());
  };

  if (next() != "sigmt-subword v1")
    fail(path.string() + ": unsupported subword model version");
  SubwordModel model;
  long long reserved = expect_count(next(), "reserved");
  for (long long i = 0; i < reserved; ++i) model.id_to_token_.push_back(next());
  model.num_reserved_ = static_cast<int>(reserved);
  long long vocab = expect_count(next(), "vocab");
  for (long long i = 0; i < vocab; ++i) model.id_to_token_.push_back(next());
  long long merges = expect_count(next(), "merges");
  for (long long i = 0; i < merges; ++i) {
    std::vector<std::string> cols = split(next(), '\t');
    if (cols.size() != 2)
      fail(path.string() + ":" + std::to_string(ln) + ": malformed merge line");
    model.merges_.emplace_back(cols[0], cols[1]);
  }
  model.index_tokens();
  return model;
}

}  // namespace sigmt
