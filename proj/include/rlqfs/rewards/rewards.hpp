#pragma once
// Sequence-level rewards: text x text -> [0, 1].

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rlqfs::rewards {

using Words = std::vector<std::string>;

// Longest common subsequence length, O(|a||b|) time and O(|b|) space.
template <typename T>
std::size_t lcs_len(std::span<const T> a, std::span<const T> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

enum class RougeVariant { Recall, Precision, F };

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

PRF rouge_l_scores(const Words& reference, const Words& hypothesis);
double rouge_l(std::string_view reference, std::string_view hypothesis, RougeVariant variant = RougeVariant::Recall);

// ROUGE-N with clipped n-gram overlap; F is the balanced harmonic mean.
PRF rouge_n(const Words& reference, const Words& hypothesis, std::size_t n);

enum class BleuSmoothing { Epsilon, AddOne };
inline constexpr double kBleuEpsilon = 1e-9;

struct NgramCounts {
  std::size_t matches = 0;  // clipped
  std::size_t total = 0;    // hypothesis n-grams
  std::size_t reference_total = 0;
};

NgramCounts ngram_counts(const Words& reference, const Words& hypothesis, std::size_t n);
// Modified precision for order n after smoothing.
double bleu_precision(const NgramCounts& c, std::size_t n, BleuSmoothing smoothing);
double brevity_penalty(std::size_t ref_len, std::size_t hyp_len);
// BLEU-`max_order`: brevity penalty times the geometric mean of orders 1..max_order.
double bleu(const Words& reference, const Words& hypothesis, std::size_t max_order, BleuSmoothing smoothing);
// Arithmetic mean of BLEU-1..4.
double bleu_mean(std::string_view reference, std::string_view hypothesis,
                 BleuSmoothing smoothing = BleuSmoothing::Epsilon);

// Anything that maps text to a fixed-width vector.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual std::vector<double> embed(std::string_view text) const = 0;
  virtual std::size_t dim() const = 0;
};

// Splits after '.', '!' or '?' when followed by whitespace.
std::vector<std::string> split_sentences(std::string_view text);
double cosine(std::span<const double> a, std::span<const double> b);
inline double rescale_cosine(double c) { return std::clamp((c + 1.0) / 2.0, 0.0, 1.0); }

// Cosine between per-side means of sentence embeddings, rescaled to [0, 1].
double sent_avg_cos(std::string_view reference, std::string_view hypothesis, const TextEmbedder& embedder);
// Cosine between whole-passage embeddings, rescaled to [0, 1].
double sfpeg(std::string_view reference, std::string_view hypothesis, const TextEmbedder& embedder);

enum class RewardComponent { RougeL, BleuMean, SentAvgCos, Sfpeg };

std::string_view component_name(RewardComponent c);
bool needs_embedder(RewardComponent c);

struct RewardSpec {
  std::vector<std::pair<RewardComponent, double>> components;
  RougeVariant rouge_variant = RougeVariant::Recall;
  BleuSmoothing bleu_smoothing = BleuSmoothing::Epsilon;

  // Weights nonnegative, summing to 1; at least one component.
  void validate() const;
  bool needs_embedder() const;
};

// "rouge_l", "rouge_l+bleu", "rouge_l:0.7,sfpeg:0.3". Components joined with
// '+' share weight equally. Names: rouge_l, bleu, sent_avg_cos (aliases
// simcse, sbert), sfpeg.
RewardSpec parse_reward_spec(std::string_view text);

// Weighted sum of component rewards. Throws ConfigError when a semantic
// component is requested without an embedder, RewardError when the
// embedder fails.
double composite_reward(const RewardSpec& spec, std::string_view reference, std::string_view hypothesis,
                        const TextEmbedder* embedder = nullptr);

}  // namespace rlqfs::rewards
