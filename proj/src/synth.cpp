#include "sigmt/synth.hpp"

#include <algorithm>
#include <set>

#include "sigmt/util.hpp"

namespace sigmt {

namespace {

// Glyph layout: the shared phoneme inventory lives in the IPA extensions
// block; each language's script is a disjoint slice of the CJK range.
constexpr char32_t kPhonemeBase = 0x0250;
constexpr char32_t kGlyphBase = 0x3400;
constexpr char32_t kGlyphStride = 0x100;

const char* kEntityTypes[] = {"PER", "LOC", "ORG", "EVT"};

std::string render(const std::vector<int>& phonemes, char32_t base) {
  std::string out;
  for (int p : phonemes) out += utf8_encode(base + static_cast<char32_t>(p));
  return out;
}

std::vector<int> draw_form(Rng& rng, int num_phonemes,
                           std::set<std::vector<int>>& used) {
  while (true) {
    std::size_t len = 2 + rng.below(4);  // 2..5 phonemes
    std::vector<int> form(len);
    for (auto& p : form) p = static_cast<int>(rng.below(num_phonemes));
    if (used.insert(form).second) return form;
  }
}

std::string draw_gloss(Rng& rng, std::set<std::string>& used) {
  static const std::string consonants = "bcdfghjklmnprstvwz";
  static const std::string vowels = "aeiou";
  while (true) {
    std::size_t len = 3 + rng.below(5);  // 3..7 letters
    std::string g;
    for (std::size_t i = 0; i < len; ++i) {
      const std::string& pool = (i % 2 == 0) ? consonants : vowels;
      g += pool[rng.below(pool.size())];
    }
    if (used.insert(g).second) return g;
  }
}

}  // namespace

std::string synth_language_name(int index) {
  return "l" + std::to_string(index);
}

void SyntheticFamilyConfig::validate() const {
  if (num_languages < 1) fail("synth: num_languages must be >= 1");
  if (num_phonemes < 2 || num_phonemes > 88)
    fail("synth: num_phonemes must be in [2, 88]");
  if (lexicon_size < 1) fail("synth: lexicon_size must be >= 1");
  if (sentence_min < 1 || sentence_max < sentence_min)
    fail("synth: sentence length bounds invalid");
  if (num_records < 1) fail("synth: num_records must be >= 1");
  if (divergence_rate < 0.0 || divergence_rate > 1.0)
    fail("synth: divergence_rate must be in [0, 1]");
  if (entity_fraction < 0.0 || entity_fraction > 1.0)
    fail("synth: entity_fraction must be in [0, 1]");
  if (static_cast<char32_t>(num_languages) * kGlyphStride + kGlyphBase >
      0x9000)
    fail("synth: too many languages for the glyph layout");
}

SyntheticFamily generate_synthetic_family(const SyntheticFamilyConfig& config) {
  config.validate();
  Rng rng(config.seed);
  SyntheticFamily family;

  // Shared lexicon: phoneme form + English-side gloss per entry.
  std::set<std::vector<int>> used_forms;
  std::set<std::string> used_glosses;
  std::vector<std::vector<int>> shared_forms(config.lexicon_size);
  std::vector<std::string> glosses(config.lexicon_size);
  for (int e = 0; e < config.lexicon_size; ++e)
    shared_forms[e] = draw_form(rng, config.num_phonemes, used_forms);
  for (int e = 0; e < config.lexicon_size; ++e)
    glosses[e] = draw_gloss(rng, used_glosses);

  // Entity designation: a seeded sample of lexemes gets a capitalized gloss
  // and a gazetteer entry.
  const int num_entities = static_cast<int>(
      config.entity_fraction * static_cast<double>(config.lexicon_size));
  std::vector<int> entity_order(config.lexicon_size);
  for (int e = 0; e < config.lexicon_size; ++e) entity_order[e] = e;
  rng.shuffle(entity_order);
  for (int i = 0; i < num_entities; ++i) {
    int e = entity_order[i];
    glosses[e][0] = static_cast<char>(std::toupper(glosses[e][0]));
    family.gazetteer[glosses[e]] = kEntityTypes[i % 4];
  }

  // Per-(lexeme, language) divergence: a language may carry its own private
  // form for a meaning, drawn once. Forms are stored in one pool; entries
  // 0..lexicon-1 are the shared forms.
  std::vector<std::vector<int>> form_pool = shared_forms;
  std::vector<std::vector<int>> form_of(
      config.num_languages, std::vector<int>(config.lexicon_size));
  for (int l = 0; l < config.num_languages; ++l) {
    for (int e = 0; e < config.lexicon_size; ++e) {
      if (rng.real01() < config.divergence_rate) {
        form_pool.push_back(draw_form(rng, config.num_phonemes, used_forms));
        form_of[l][e] = static_cast<int>(form_pool.size()) - 1;
      } else {
        form_of[l][e] = e;
      }
    }
  }

  family.corpus.languages.reserve(config.num_languages);
  for (int l = 0; l < config.num_languages; ++l)
    family.corpus.languages.push_back(synth_language_name(l));

  // Sentences: uniform lexeme draws, shared across languages per record.
  for (int r = 0; r < config.num_records; ++r) {
    std::size_t len =
        config.sentence_min +
        rng.below(config.sentence_max - config.sentence_min + 1);
    std::vector<int> entries(len);
    for (auto& e : entries)
      e = static_cast<int>(rng.below(config.lexicon_size));

    Record rec;
    rec.id = r;
    std::vector<std::string> tgt_words;
    tgt_words.reserve(len);
    for (int e : entries) tgt_words.push_back(glosses[e]);
    rec.target = join(tgt_words, " ");
    for (int l = 0; l < config.num_languages; ++l) {
      const char32_t glyph_base = kGlyphBase + l * kGlyphStride;
      std::vector<std::string> words;
      words.reserve(len);
      for (int e : entries)
        words.push_back(render(form_pool[form_of[l][e]], glyph_base));
      rec.variants[{synth_language_name(l), SignalKind::Base}] =
          join(words, " ");
    }
    family.corpus.records.push_back(std::move(rec));
  }

  // Gold rule tables. ipa: glyphs -> shared phoneme symbols; transl: glyphs
  // -> language 0's glyphs.
  for (int l = 0; l < config.num_languages; ++l) {
    const std::string lang = synth_language_name(l);
    const char32_t glyph_base = kGlyphBase + l * kGlyphStride;
    RuleTable ipa, transl;
    ipa.source_script = lang;
    ipa.target_script = "phoneme";
    ipa.kind = SignalKind::Ipa;
    transl.source_script = lang;
    transl.target_script = synth_language_name(0);
    transl.kind = SignalKind::Transl;
    for (int p = 0; p < config.num_phonemes; ++p) {
      std::string glyph = utf8_encode(glyph_base + static_cast<char32_t>(p));
      ipa.rules.push_back(
          {glyph, utf8_encode(kPhonemeBase + static_cast<char32_t>(p))});
      transl.rules.push_back(
          {glyph, utf8_encode(kGlyphBase + static_cast<char32_t>(p))});
    }
    normalize_rules(ipa);
    normalize_rules(transl);
    family.ipa_tables[lang] = std::move(ipa);
    family.transl_tables[lang] = std::move(transl);
  }

  family.corpus.validate(/*require_multiway=*/true);
  return family;
}

}  // namespace sigmt
