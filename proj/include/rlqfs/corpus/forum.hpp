#pragma once
// Question/answer forum dumps: loading, the quality filter, the per-forum
// train/test split, and passage-pair generation.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rlqfs::corpus {

struct ForumComment {
  std::int64_t score = 0;
  std::string body;

  friend bool operator==(const ForumComment&, const ForumComment&) = default;
};

struct ForumPost {
  std::string post_id;
  std::string forum;
  std::int64_t score = 0;
  std::string title;
  std::vector<ForumComment> comments;

  friend bool operator==(const ForumPost&, const ForumPost&) = default;
};

using ForumDump = std::vector<ForumPost>;

inline constexpr std::int64_t kMinPostScore = 2;
inline constexpr std::int64_t kMinCommentScore = 2;
inline constexpr std::size_t kMinCommentWords = 50;

// One post per line: {post_id, forum, score, title, comments: [{score, body}]}.
// Throws DataError naming the line of the first malformed record.
ForumDump load_forum_jsonl(const std::filesystem::path& path);
void save_forum_jsonl(const std::filesystem::path& path, const ForumDump& dump);

// Keeps posts with score >= 2; inside them, comments with score >= 2 and at
// least 50 words; then drops posts left without comments. Idempotent.
ForumDump filter_forum_dump(const ForumDump& dump);

struct ForumSplit {
  ForumDump train;
  ForumDump test;
  std::vector<std::string> warnings;
};

// Every post of `test_forum` goes to test, everything else to train.
ForumSplit split_by_forum(const ForumDump& filtered, const std::string& test_forum);

struct PairRecord {
  std::string query_id;
  std::string p_text;
  std::string q_text;

  friend bool operator==(const PairRecord&, const PairRecord&) = default;
};

// All unordered answer pairs under the same post (positives only).
std::vector<PairRecord> make_positive_pairs(const ForumDump& posts);

std::vector<PairRecord> load_pairs_jsonl(const std::filesystem::path& path);
void save_pairs_jsonl(const std::filesystem::path& path, const std::vector<PairRecord>& pairs);

struct ForumStats {
  std::size_t questions = 0;
  double avg_answers_per_question = 0.0;
  double avg_words_per_question = 0.0;
  double avg_words_per_answer = 0.0;
  std::size_t positive_pairs = 0;
  // Positives plus one in-batch negative each.
  std::size_t training_samples = 0;
};

ForumStats forum_stats(const ForumDump& posts);

}  // namespace rlqfs::corpus
