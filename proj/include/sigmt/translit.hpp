#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace sigmt {

struct MultiwayCorpus;

/// The input signal a corpus variant carries: the original script (base) or
/// one of the alternative representations derived from it.
enum class SignalKind { Base, Ipa, Romani, Transl };

inline constexpr SignalKind kAllKinds[] = {SignalKind::Base, SignalKind::Ipa,
                                           SignalKind::Romani,
                                           SignalKind::Transl};

std::string to_string(SignalKind kind);
std::optional<SignalKind> signal_kind_from_string(std::string_view s);

/// Language/signal tag prepended to every source sequence, e.g. "__bn__" for
/// the base signal of language bn and "__bn_ipa__" for its phonetic variant.
std::string lang_tag(const std::string& language, SignalKind kind);

struct Rule {
  std::string source;  // never empty
  std::string target;  // may be empty (deletion)
};

/// Ordered grapheme rewrite table. Rules are kept sorted by descending
/// source byte length (ties lexicographic), so a linear scan at a text
/// position finds the longest match first.
struct RuleTable {
  std::vector<Rule> rules;
  std::string source_script;
  std::string target_script;
  SignalKind kind = SignalKind::Base;

  bool is_sorted() const;
};

/// Sorts rules into canonical order and rejects empty or duplicate sources.
void normalize_rules(RuleTable& table);

/// File format: UTF-8 text, one "source<TAB>target" rule per line, '#'
/// comment lines; header comments declare source_script / target_script /
/// kind. See docs in README.
RuleTable load_rule_table(const std::filesystem::path& path);
void save_rule_table(const RuleTable& table, const std::filesystem::path& path);

/// Greedy longest-match left-to-right rewrite. Characters with no matching
/// rule pass through unchanged. Pure function of (text, table).
std::string transliterate(std::string_view text, const RuleTable& table);

/// Adds a `kind` variant to every record: text = transliterate(base text)
/// through the language's table, or a verbatim copy for languages in
/// `exempt` (already in the target script). Base variants, ids and targets
/// are untouched.
MultiwayCorpus augment_corpus(const MultiwayCorpus& corpus,
                              const std::map<std::string, RuleTable>& tables,
                              SignalKind kind,
                              const std::set<std::string>& exempt = {});

}  // namespace sigmt
