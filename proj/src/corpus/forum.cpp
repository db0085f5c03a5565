#include "rlqfs/corpus/forum.hpp"

#include <fstream>

#include "json.hpp"
#include "rlqfs/corpus/vocab.hpp"
#include "rlqfs/errors.hpp"

namespace rlqfs::corpus {

using nlohmann::json;

namespace {

template <typename F>
void for_each_jsonl(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
      f(j, where);
    } catch (const json::exception& e) {
      throw DataError(where + "malformed record (" + e.what() + ")");
    }
  }
}

const json& require(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw DataError(where + "missing field '" + key + "'");
  return j.at(key);
}

std::int64_t require_int(const json& j, const char* key, const std::string& where) {
  const json& v = require(j, key, where);
  if (!v.is_number_integer()) throw DataError(where + "field '" + key + "' must be an integer");
  return v.get<std::int64_t>();
}

std::string require_str(const json& j, const char* key, const std::string& where) {
  const json& v = require(j, key, where);
  if (!v.is_string()) throw DataError(where + "field '" + key + "' must be a string");
  return v.get<std::string>();
}

}  // namespace

ForumDump load_forum_jsonl(const std::filesystem::path& path) {
  ForumDump dump;
  for_each_jsonl(path, [&](const json& j, const std::string& where) {
    ForumPost p;
    p.post_id = require_str(j, "post_id", where);
    p.forum = require_str(j, "forum", where);
    p.score = require_int(j, "score", where);
    p.title = require_str(j, "title", where);
    const json& cs = require(j, "comments", where);
    if (!cs.is_array()) throw DataError(where + "field 'comments' must be an array");
    for (const auto& c : cs) p.comments.push_back({require_int(c, "score", where), require_str(c, "body", where)});
    dump.push_back(std::move(p));
  });
  return dump;
}

void save_forum_jsonl(const std::filesystem::path& path, const ForumDump& dump) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& p : dump) {
    json cs = json::array();
    for (const auto& c : p.comments) cs.push_back({{"score", c.score}, {"body", c.body}});
    out << json{{"post_id", p.post_id}, {"forum", p.forum}, {"score", p.score}, {"title", p.title}, {"comments", cs}}
               .dump()
        << '\n';
  }
}

ForumDump filter_forum_dump(const ForumDump& dump) {
  ForumDump out;
  for (const auto& p : dump) {
    if (p.score < kMinPostScore) continue;
    ForumPost kept = p;
    kept.comments.clear();
    for (const auto& c : p.comments) {
      if (c.score >= kMinCommentScore && count_words(c.body) >= kMinCommentWords) kept.comments.push_back(c);
    }
    if (!kept.comments.empty()) out.push_back(std::move(kept));
  }
  return out;
}

ForumSplit split_by_forum(const ForumDump& filtered, const std::string& test_forum) {
  ForumSplit s;
  for (const auto& p : filtered) (p.forum == test_forum ? s.test : s.train).push_back(p);
  if (s.test.empty()) s.warnings.push_back("no posts from forum '" + test_forum + "'; test split is empty");
  return s;
}

std::vector<PairRecord> make_positive_pairs(const ForumDump& posts) {
  std::vector<PairRecord> out;
  for (const auto& p : posts) {
    for (std::size_t i = 0; i < p.comments.size(); ++i) {
      for (std::size_t j = i + 1; j < p.comments.size(); ++j) {
        out.push_back({p.post_id, p.comments[i].body, p.comments[j].body});
      }
    }
  }
  return out;
}

std::vector<PairRecord> load_pairs_jsonl(const std::filesystem::path& path) {
  std::vector<PairRecord> out;
  for_each_jsonl(path, [&](const json& j, const std::string& where) {
    out.push_back({require_str(j, "query_id", where), require_str(j, "p_text", where),
                   require_str(j, "q_text", where)});
  });
  return out;
}

void save_pairs_jsonl(const std::filesystem::path& path, const std::vector<PairRecord>& pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& p : pairs) {
    out << json{{"query_id", p.query_id}, {"p_text", p.p_text}, {"q_text", p.q_text}}.dump() << '\n';
  }
}

ForumStats forum_stats(const ForumDump& posts) {
  ForumStats s;
  s.questions = posts.size();
  std::size_t answers = 0, qwords = 0, awords = 0;
  for (const auto& p : posts) {
    answers += p.comments.size();
    qwords += count_words(p.title);
    for (const auto& c : p.comments) awords += count_words(c.body);
  }
  if (s.questions) {
    s.avg_answers_per_question = static_cast<double>(answers) / static_cast<double>(s.questions);
    s.avg_words_per_question = static_cast<double>(qwords) / static_cast<double>(s.questions);
  }
  if (answers) s.avg_words_per_answer = static_cast<double>(awords) / static_cast<double>(answers);
  s.positive_pairs = make_positive_pairs(posts).size();
  s.training_samples = 2 * s.positive_pairs;
  return s;
}

}  // namespace rlqfs::corpus
