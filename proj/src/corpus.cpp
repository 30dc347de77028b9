#include "sigmt/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace sigmt {

const std::string* Record::find_variant(const std::string& language,
                                        SignalKind kind) const {
  auto it = variants.find({language, kind});
  return it == variants.end() ? nullptr : &it->second;
}

std::set<SignalKind> MultiwayCorpus::kinds_present() const {
  std::set<SignalKind> kinds;
  for (const Record& r : records)
    for (const auto& [key, text] : r.variants) kinds.insert(key.second);
  return kinds;
}

bool MultiwayCorpus::has_language(const std::string& language) const {
  return std::find(languages.begin(), languages.end(), language) !=
         languages.end();
}

void MultiwayCorpus::validate(bool require_multiway) const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const Record& r = records[i];
    if (r.id != static_cast<std::int64_t>(i))
      fail("corpus: record ids must be dense from 0; found id " +
           std::to_string(r.id) + " at position " + std::to_string(i));
    if (r.target.empty())
      fail("corpus: record " + std::to_string(r.id) + " has empty target");
    for (const auto& [key, text] : r.variants)
      if (!has_language(key.first))
        fail("corpus: record " + std::to_string(r.id) +
             " references undeclared language '" + key.first + "'");
    if (require_multiway) {
      for (const std::string& lang : languages)
        if (!r.find_variant(lang, SignalKind::Base))
          fail("corpus: record " + std::to_string(r.id) +
               " missing base variant for '" + lang + "'");
    }
  }
  std::set<std::string> seen(languages.begin(), languages.end());
  if (seen.size() != languages.size()) fail("corpus: duplicate language");
}

void save_corpus(const MultiwayCorpus& corpus,
                 const std::filesystem::path& src_path,
                 const std::filesystem::path& tgt_path) {
  std::ostringstream src, tgt;
  src << "# sigmt-corpus-src v1\n";
  tgt << "# sigmt-corpus-tgt v1\n";
  for (const Record& r : corpus.records) {
    for (const std::string& lang : corpus.languages) {
      for (SignalKind kind : kAllKinds) {
        const std::string* text = r.find_variant(lang, kind);
        if (!text) continue;
        src << r.id << '\t' << lang << '\t' << to_string(kind) << '\t' << *text
            << '\n';
      }
    }
    tgt << r.id << '\t' << r.target << '\n';
  }
  write_file(src_path, src.str());
  write_file(tgt_path, tgt.str());
}

MultiwayCorpus load_corpus(const std::filesystem::path& src_path,
                           const std::filesystem::path& tgt_path) {
  MultiwayCorpus corpus;
  std::map<std::int64_t, Record> by_id;

  std::vector<std::string> src_lines = read_lines(src_path);
  if (src_lines.empty() || src_lines[0] != "# sigmt-corpus-src v1")
    fail(src_path.string() + ": missing or unsupported format-version line");
  for (std::size_t i = 1; i < src_lines.size(); ++i) {
    if (src_lines[i].empty()) continue;
    std::vector<std::string> cols = split(src_lines[i], '\t');
    if (cols.size() != 4)
      fail(src_path.string() + ":" + std::to_string(i + 1) +
           ": expected 4 columns, got " + std::to_string(cols.size()));
    std::int64_t id = parse_int(cols[0], src_path.string());
    auto kind = signal_kind_from_string(cols[2]);
    if (!kind)
      fail(src_path.string() + ":" + std::to_string(i + 1) +
           ": unknown signal '" + cols[2] + "'");
    Record& rec = by_id[id];
    rec.id = id;
    rec.variants[{cols[1], *kind}] = cols[3];
    if (!corpus.has_language(cols[1])) corpus.languages.push_back(cols[1]);
  }

  std::vector<std::string> tgt_lines = read_lines(tgt_path);
  if (tgt_lines.empty() || tgt_lines[0] != "# sigmt-corpus-tgt v1")
    fail(tgt_path.string() + ": missing or unsupported format-version line");
  for (std::size_t i = 1; i < tgt_lines.size(); ++i) {
    if (tgt_lines[i].empty()) continue;
    std::vector<std::string> cols = split(tgt_lines[i], '\t');
    if (cols.size() != 2)
      fail(tgt_path.string() + ":" + std::to_string(i + 1) +
           ": expected 2 columns, got " + std::to_string(cols.size()));
    std::int64_t id = parse_int(cols[0], tgt_path.string());
    auto it = by_id.find(id);
    if (it == by_id.end())
      fail(tgt_path.string() + ":" + std::to_string(i + 1) +
           ": target for unknown record id " + std::to_string(id));
    it->second.target = cols[1];
  }

  corpus.records.reserve(by_id.size());
  for (auto& [id, rec] : by_id) corpus.records.push_back(std::move(rec));
  corpus.validate();
  return corpus;
}

std::size_t SamplingSchedule::draw(Rng& rng) const {
  double u = rng.real01();
  double acc = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    acc += probabilities[i];
    if (u < acc) return i;
  }
  return probabilities.size() - 1;
}

SamplingSchedule temperature_schedule(
    const std::map<std::string, std::size_t>& sizes, double temperature) {
  if (temperature <= 0.0) fail("temperature_schedule: T must be positive");
  double total = 0.0;
  for (const auto& [dir, n] : sizes) total += static_cast<double>(n);
  if (total <= 0.0) fail("temperature_schedule: all direction sizes are zero");

  SamplingSchedule schedule;
  schedule.temperature = temperature;
  double norm = 0.0;
  for (const auto& [dir, n] : sizes) {
    double share = static_cast<double>(n) / total;
    double p = share > 0.0 ? std::pow(share, 1.0 / temperature) : 0.0;
    schedule.directions.push_back(dir);
    schedule.probabilities.push_back(p);
    norm += p;
  }
  for (double& p : schedule.probabilities) p /= norm;
  return schedule;
}

namespace {

std::vector<int> tagged_source(const SubwordModel& model,
                               const std::string& language, SignalKind kind,
                               const std::string& text) {
  std::vector<int> ids;
  ids.push_back(model.tag_id(lang_tag(language, kind)));
  std::vector<int> body = model.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

const std::string& require_variant(const Record& rec,
                                   const std::string& language,
                                   SignalKind kind) {
  const std::string* text = rec.find_variant(language, kind);
  if (!text)
    fail("missing variant (record " + std::to_string(rec.id) + ", " +
         language + ", " + to_string(kind) + ")");
  return *text;
}

}  // namespace

std::vector<TrainExample> build_training_mixture(
    const MultiwayCorpus& corpus, const std::set<SignalKind>& kinds,
    const SubwordModel& model) {
  std::vector<TrainExample> stream;
  for (const Record& rec : corpus.records) {
    const std::vector<int> target = model.encode(rec.target);
    for (const std::string& lang : corpus.languages) {
      for (SignalKind kind : kAllKinds) {
        if (!kinds.count(kind)) continue;
        const std::string& text = require_variant(rec, lang, kind);
        TrainExample ex;
        ex.record_id = rec.id;
        ex.language = lang;
        ex.direction = lang + "|" + to_string(kind);
        ex.sources.push_back(tagged_source(model, lang, kind, text));
        ex.target = target;
        stream.push_back(std::move(ex));
      }
    }
  }
  return stream;
}

std::vector<TrainExample> build_concat_mixture(
    const MultiwayCorpus& corpus, const std::vector<SignalKind>& kinds,
    const SubwordModel& model) {
  if (kinds.empty()) fail("build_concat_mixture: need at least one kind");
  std::vector<TrainExample> stream;
  for (const Record& rec : corpus.records) {
    const std::vector<int> target = model.encode(rec.target);
    for (const std::string& lang : corpus.languages) {
      std::vector<int> source;
      for (std::size_t k = 0; k < kinds.size(); ++k) {
        if (k > 0) source.push_back(SubwordModel::kSep);
        std::vector<int> part = tagged_source(
            model, lang, kinds[k], require_variant(rec, lang, kinds[k]));
        source.insert(source.end(), part.begin(), part.end());
      }
      TrainExample ex;
      ex.record_id = rec.id;
      ex.language = lang;
      ex.direction = lang;
      ex.sources.push_back(std::move(source));
      ex.target = target;
      stream.push_back(std::move(ex));
    }
  }
  return stream;
}

std::vector<TrainExample> build_multi_source_mixture(
    const MultiwayCorpus& corpus, const std::vector<SignalKind>& kinds,
    const SubwordModel& model) {
  if (kinds.empty()) fail("build_multi_source_mixture: need at least one kind");
  std::vector<TrainExample> stream;
  for (const Record& rec : corpus.records) {
    const std::vector<int> target = model.encode(rec.target);
    for (const std::string& lang : corpus.languages) {
      TrainExample ex;
      ex.record_id = rec.id;
      ex.language = lang;
      ex.direction = lang;
      for (SignalKind kind : kinds)
        ex.sources.push_back(
            tagged_source(model, lang, kind, require_variant(rec, lang, kind)));
      ex.target = target;
      stream.push_back(std::move(ex));
    }
  }
  return stream;
}

MultiwayCorpus subset(const MultiwayCorpus& corpus, double fraction,
                      std::uint64_t seed) {
  if (fraction <= 0.0 || fraction > 1.0)
    fail("subset: fraction must be in (0, 1]");
  const std::size_t total = corpus.records.size();
  if (total == 0) return corpus;
  auto want = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(total) - 1e-9));
  want = std::clamp<std::size_t>(want, 1, total);

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(want);
  std::sort(order.begin(), order.end());

  MultiwayCorpus out;
  out.languages = corpus.languages;
  out.records.reserve(want);
  for (std::size_t idx : order) {
    Record rec = corpus.records[idx];
    rec.id = static_cast<std::int64_t>(out.records.size());
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace sigmt
