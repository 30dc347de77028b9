#include "sigmt/translit.hpp"

#include <algorithm>
#include <sstream>

#include "sigmt/corpus.hpp"
#include "sigmt/util.hpp"

namespace sigmt {

std::string to_string(SignalKind kind) {
  switch (kind) {
    case SignalKind::Base: return "base";
    case SignalKind::Ipa: return "ipa";
    case SignalKind::Romani: return "romani";
    case SignalKind::Transl: return "transl";
  }
  return "?";
}

std::optional<SignalKind> signal_kind_from_string(std::string_view s) {
  if (s == "base") return SignalKind::Base;
  if (s == "ipa") return SignalKind::Ipa;
  if (s == "romani") return SignalKind::Romani;
  if (s == "transl") return SignalKind::Transl;
  return std::nullopt;
}

std::string lang_tag(const std::string& language, SignalKind kind) {
  if (kind == SignalKind::Base) return "__" + language + "__";
  return "__" + language + "_" + to_string(kind) + "__";
}

static bool rule_order(const Rule& a, const Rule& b) {
  if (a.source.size() != b.source.size())
    return a.source.size() > b.source.size();
  return a.source < b.source;
}

bool RuleTable::is_sorted() const {
  return std::is_sorted(rules.begin(), rules.end(), rule_order);
}

void normalize_rules(RuleTable& table) {
  for (const Rule& r : table.rules)
    if (r.source.empty()) fail("rule table: empty source side");
  std::stable_sort(table.rules.begin(), table.rules.end(), rule_order);
  for (std::size_t i = 1; i < table.rules.size(); ++i)
    if (table.rules[i].source == table.rules[i - 1].source)
      fail("rule table: duplicate source sequence '" + table.rules[i].source +
           "'");
}

RuleTable load_rule_table(const std::filesystem::path& path) {
  RuleTable table;
  std::vector<std::string> lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) continue;
    if (line[0] == '#') {
      // Header comments: "# key: value".
      std::string body = trim(std::string_view(line).substr(1));
      std::size_t colon = body.find(':');
      if (colon == std::string::npos) continue;
      std::string key = trim(body.substr(0, colon));
      std::string value = trim(body.substr(colon + 1));
      if (key == "source_script") {
        table.source_script = value;
      } else if (key == "target_script") {
        table.target_script = value;
      } else if (key == "kind") {
        auto kind = signal_kind_from_string(value);
        if (!kind)
          fail(path.string() + ":" + std::to_string(i + 1) +
               ": unknown kind '" + value + "'");
        table.kind = *kind;
      }
      continue;
    }
    std::vector<std::string> cols = split(line, '\t');
    if (cols.size() != 2)
      fail(path.string() + ":" + std::to_string(i + 1) +
           ": expected 2 tab-separated columns, got " +
           std::to_string(cols.size()));
    if (cols[0].empty())
      fail(path.string() + ":" + std::to_string(i + 1) + ": empty source side");
    table.rules.push_back({cols[0], cols[1]});
  }
  normalize_rules(table);
  return table;
}

void save_rule_table(const RuleTable& table, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "# sigmt-ruletable v1\n";
  out << "# source_script: " << table.source_script << "\n";
  out << "# target_script: " << table.target_script << "\n";
  out << "# kind: " << to_string(table.kind) << "\n";
  for (const Rule& r : table.rules) out << r.source << '\t' << r.target << '\n';
  write_file(path, out.str());
}

std::string transliterate(std::string_view text, const RuleTable& table) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const std::string_view rest = text.substr(i);
    const Rule* hit = nullptr;
    // Rules are sorted longest-first, so the first prefix match wins.
    for (const Rule& r : table.rules) {
      if (rest.size() >= r.source.size() &&
          rest.compare(0, r.source.size(), r.source) == 0) {
        hit = &r;
        break;
      }
    }
    if (hit) {
      out += hit->target;
      i += hit->source.size();
    } else {
      std::size_t n = utf8_len(static_cast<unsigned char>(text[i]));
      n = std::min(n, text.size() - i);
      out.append(text.substr(i, n));
      i += n;
    }
  }
  return out;
}

MultiwayCorpus augment_corpus(const MultiwayCorpus& corpus,
                              const std::map<std::string, RuleTable>& tables,
                              SignalKind kind,
                              const std::set<std::string>& exempt) {
  if (kind == SignalKind::Base) return corpus;
  for (const std::string& lang : corpus.languages) {
    if (exempt.count(lang)) continue;
    auto it = tables.find(lang);
    if (it == tables.end())
      fail("augment_corpus: no " + to_string(kind) + " rule table for '" +
           lang + "' and not exempt");
    if (it->second.kind != kind)
      fail("augment_corpus: table for '" + lang + "' has kind " +
           to_string(it->second.kind) + ", expected " + to_string(kind));
  }
  MultiwayCorpus out = corpus;
  for (Record& rec : out.records) {
    for (const std::string& lang : out.languages) {
      const std::string* base = rec.find_variant(lang, SignalKind::Base);
      if (!base) continue;
      if (exempt.count(lang)) {
        rec.variants[{lang, kind}] = *base;
      } else {
        rec.variants[{lang, kind}] = transliterate(*base, tables.at(lang));
      }
    }
  }
  return out;
}

}  // namespace sigmt
