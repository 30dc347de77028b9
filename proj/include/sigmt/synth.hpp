#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "sigmt/corpus.hpp"
#include "sigmt/translit.hpp"

namespace sigmt {

/// Configuration of the synthetic language family used for desk-scale
/// verification: N languages sharing one phoneme inventory and lexicon,
/// each written in its own disjoint glyph range.
struct SyntheticFamilyConfig {
  int num_languages = 2;
  int num_phonemes = 24;      // size of the shared phoneme inventory
  int lexicon_size = 300;     // shared lexemes (meaning + phoneme form)
  int sentence_min = 3;       // words per sentence, inclusive bounds
  int sentence_max = 9;
  int num_records = 1000;     // multi-way aligned records to generate
  double divergence_rate = 0.0;  // per-(lexeme, language) substitution prob
  double entity_fraction = 0.1;  // lexemes promoted to named entities
  std::uint64_t seed = 1;

  void validate() const;
};

/// Entity types assigned to gazetteer lexemes, cycling PER/LOC/ORG/EVT.
struct SyntheticFamily {
  MultiwayCorpus corpus;
  /// Gold tables per language: kind=ipa maps each language's glyphs to the
  /// shared phoneme symbols; kind=transl maps them to language 0's glyphs.
  std::map<std::string, RuleTable> ipa_tables;
  std::map<std::string, RuleTable> transl_tables;
  /// English-side surface form -> entity type, for NE-F1 evaluation.
  std::map<std::string, std::string> gazetteer;
};

/// Deterministically generates the family from the seed: shared phoneme
/// lexicon, per-language scripts over disjoint glyph ranges, per-lexeme
/// divergent forms, and gold rule tables.
SyntheticFamily generate_synthetic_family(const SyntheticFamilyConfig& config);

/// Language name for index i ("l0", "l1", ...).
std::string synth_language_name(int index);

}  // namespace sigmt
