#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sigmt/subword.hpp"
#include "sigmt/translit.hpp"

namespace sigmt {

/// One id-aligned parallel record: per-(language, signal) source variants
/// plus a single target-side sentence shared by all of them.
struct Record {
  std::int64_t id = 0;
  std::map<std::pair<std::string, SignalKind>, std::string> variants;
  std::string target;

  const std::string* find_variant(const std::string& language,
                                  SignalKind kind) const;
};

struct MultiwayCorpus {
  std::vector<Record> records;
  std::vector<std::string> languages;  // ordered, no duplicates

  std::set<SignalKind> kinds_present() const;
  bool has_language(const std::string& language) const;

  /// Enforces the type invariants: dense ids from 0, unique, non-empty
  /// targets, languages consistent with variants. Throws on violation.
  void validate(bool require_multiway = false) const;
};

// Corpus files: sources as TSV (id, language, signal, text) and targets as
// TSV (id, text), each starting with a format-version line.
void save_corpus(const MultiwayCorpus& corpus,
                 const std::filesystem::path& src_path,
                 const std::filesystem::path& tgt_path);
MultiwayCorpus load_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path);

// ---------------------------------------------------------------------------
// Temperature sampling
// ---------------------------------------------------------------------------

/// Direction sampling probabilities p_i proportional to share_i^(1/T).
struct SamplingSchedule {
  std::vector<std::string> directions;
  std::vector<double> probabilities;  // sums to 1
  double temperature = 1.0;

  /// Draws a direction index from the schedule.
  std::size_t draw(Rng& rng) const;
};

SamplingSchedule temperature_schedule(
    const std::map<std::string, std::size_t>& sizes, double temperature);

// ---------------------------------------------------------------------------
// Training example streams
// ---------------------------------------------------------------------------

/// One training example. `sources` holds one token sequence per encoder
/// (single-encoder systems use exactly one). Every sequence already carries
/// its language/signal tag at position 0; targets are bare subword ids.
struct TrainExample {
  std::int64_t record_id = 0;
  std::string language;
  std::string direction;  // sampling key, e.g. "l0|ipa"
  std::vector<std::vector<int>> sources;
  std::vector<int> target;
};

/// Signal-mixture stream: one example per (record, language, kind), all
/// kinds of a record sharing the identical target token sequence.
std::vector<TrainExample> build_training_mixture(
    const MultiwayCorpus& corpus, const std::set<SignalKind>& kinds,
    const SubwordModel& model);

/// Straight concatenation: per (record, language) one example whose single
/// source is [tag k1] sig1 [SEP] [tag k2] sig2 ... in the given order.
std::vector<TrainExample> build_concat_mixture(
    const MultiwayCorpus& corpus, const std::vector<SignalKind>& kinds,
    const SubwordModel& model);

/// Multi-encoder stream: per (record, language) one example with one source
/// sequence per kind, in the given order.
std::vector<TrainExample> build_multi_source_mixture(
    const MultiwayCorpus& corpus, const std::vector<SignalKind>& kinds,
    const SubwordModel& model);

// ---------------------------------------------------------------------------
// Subsetting
// ---------------------------------------------------------------------------

/// Keeps ceil(fraction * R) records chosen by seeded sampling without
/// replacement; all variants of a selected record stay together. Record ids
/// are re-numbered densely, preserving relative order.
MultiwayCorpus subset(const MultiwayCorpus& corpus, double fraction,
                      std::uint64_t seed);

}  // namespace sigmt
