#include "rlqfs/corpus/qfs.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>

#include "json.hpp"

#include "rlqfs/corpus/vocab.hpp"
#include "rlqfs/errors.hpp"

namespace rlqfs::corpus {

using nlohmann::json;

std::vector<QfsExample> load_qfs_jsonl(const std::filesystem::path& path, bool require_summary) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<QfsExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(where + "malformed JSON (" + e.what() + ")");
    }
    QfsExample ex;
    auto field = [&](const char* name, std::string& dst, bool required) {
      if (!j.contains(name)) {
        if (required) throw DataError(where + "missing field '" + name + "'");
        return;
      }
      if (!j[name].is_string()) throw DataError(where + "field '" + name + "' must be a string");
      dst = j[name].get<std::string>();
      if (required && normalize(dst).empty()) throw DataError(where + "field '" + name + "' is empty");
    };
    field("id", ex.id, true);
    field("query", ex.query, true);
    field("document", ex.document, true);
    field("summary", ex.summary, require_summary);
    out.push_back(std::move(ex));
  }
  return out;
}

void save_qfs_jsonl(const std::filesystem::path& path, const std::vector<QfsExample>& examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& e : examples) {
    json j{{"id", e.id}, {"query", e.query}, {"document", e.document}, {"summary", e.summary}};
    out << j.dump() << '\n';
  }
}

namespace {

constexpr std::array<std::string_view, 24> kEntities{
    "alvar", "brisk", "corin", "delma", "elsin", "farro", "gavin", "helka", "ivor", "jessa", "kolby", "lunet",
    "morrow", "nadia", "orvel", "pella", "quinn", "rosco", "selma", "tovin", "ulric", "vesna", "wendel", "yara"};

constexpr std::array<std::string_view, 12> kFamilies{"ashby", "barlow", "crane", "dunmore", "elwood", "fenwick",
                                                     "garrow", "hale", "irving", "jarvis", "kemble", "lowry"};

// Two-word names over closed lists, unique for the first 288 documents; held-out
// documents reuse words already seen in training.
std::string entity_name(std::size_t d) {
  const std::size_t r = d % kEntities.size(), a = d / kEntities.size();
  std::string name = std::string(kEntities[r]) + " " + std::string(kFamilies[(r + a) % kFamilies.size()]);
  const std::size_t cycle = kEntities.size() * kFamilies.size();
  if (d >= cycle) name += std::to_string(d / cycle);
  return name;
}

struct Attribute {
  std::string_view name;
  std::array<std::string_view, 8> values;
};

constexpr std::array<Attribute, 8> kAttributes{{
    {"color", {"red", "blue", "green", "amber", "violet", "gray", "white", "black"}},
    {"home", {"harbor", "valley", "forest", "desert", "island", "mountain", "village", "canyon"}},
    {"food", {"bread", "rice", "apples", "cheese", "soup", "beans", "honey", "fish"}},
    {"tool", {"hammer", "needle", "shovel", "lantern", "compass", "rope", "ladder", "chisel"}},
    {"pet", {"cat", "dog", "parrot", "turtle", "rabbit", "goat", "horse", "owl"}},
    {"job", {"baker", "sailor", "farmer", "painter", "healer", "smith", "weaver", "miner"}},
    {"song", {"lullaby", "anthem", "ballad", "hymn", "shanty", "waltz", "chant", "carol"}},
    {"friend", {"marta", "olin", "petra", "silas", "tamsin", "edric", "liora", "bram"}},
}};

constexpr std::size_t kFactsPerDoc = 5;

}  // namespace

SyntheticQfs make_synthetic_qfs(std::size_t n_docs, std::size_t queries_per_doc, nd::Rng& rng) {
  if (queries_per_doc == 0) throw ContractError("make_synthetic_qfs: queries_per_doc must be >= 1");
  if (queries_per_doc > kFactsPerDoc) {
    throw ContractError("make_synthetic_qfs: at most " + std::to_string(kFactsPerDoc) + " queries per document");
  }
  SyntheticQfs out;
  for (std::size_t d = 0; d < n_docs; ++d) {
    const std::string entity = entity_name(d);
    std::vector<std::size_t> attrs(kAttributes.size());
    for (std::size_t i = 0; i < attrs.size(); ++i) attrs[i] = i;
    for (std::size_t i = attrs.size(); i > 1; --i) std::swap(attrs[i - 1], attrs[rng.uniform_int(i)]);
    attrs.resize(kFactsPerDoc);

    std::vector<std::string_view> values;
    std::string document;
    for (auto a : attrs) {
      const auto& attr = kAttributes[a];
      values.push_back(attr.values[rng.uniform_int(attr.values.size())]);
      if (!document.empty()) document += ' ';
      document += "the " + std::string(attr.name) + " of " + entity + " is " + std::string(values.back()) + " .";
    }
    for (std::size_t q = 0; q < queries_per_doc; ++q) {
      const auto& attr = kAttributes[attrs[q]];
      QfsExample ex;
      ex.id = "syn-" + std::to_string(d) + "-" + std::to_string(q);
      ex.query = "what is the " + std::string(attr.name) + " of " + entity + " ?";
      ex.document = document;
      ex.summary = entity + " 's " + std::string(attr.name) + " is " + std::string(values[q]) + " .";
      out.examples.push_back(std::move(ex));
    }
  }
  out.avg_queries_per_document = n_docs ? static_cast<double>(out.examples.size()) / static_cast<double>(n_docs) : 0.0;
  return out;
}

std::string best_overlap_sentence(const std::string& query, const std::string& document) {
  const auto qw = split_words(query);
  const std::set<std::string> qset(qw.begin(), qw.end());
  std::vector<std::string> sentences;
  std::string cur;
  for (const auto& w : split_words(document)) {
    if (!cur.empty()) cur += ' ';
    cur += w;
    if (w == "." || w == "!" || w == "?") {
      sentences.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) sentences.push_back(cur);
  std::string best;
  std::size_t best_score = 0;
  for (const auto& s : sentences) {
    std::set<std::string> sw;
    for (auto& w : split_words(s)) sw.insert(w);
    std::size_t score = 0;
    for (const auto& w : sw) score += qset.count(w);
    if (best.empty() || score > best_score) {
      best = s;
      best_score = score;
    }
  }
  return best;
}

}  // namespace rlqfs::corpus
