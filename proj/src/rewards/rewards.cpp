#include "rlqfs/rewards/rewards.hpp"

#include <cctype>
#include <cmath>
#include <map>

#include "rlqfs/corpus/vocab.hpp"
#include "rlqfs/errors.hpp"

namespace rlqfs::rewards {

PRF rouge_l_scores(const Words& reference, const Words& hypothesis) {
  if (reference.empty() && hypothesis.empty()) return {1.0, 1.0, 1.0};
  if (reference.empty() || hypothesis.empty()) return {};
  const double l = static_cast<double>(lcs_len<std::string>(reference, hypothesis));
  PRF s;
  s.recall = l / static_cast<double>(reference.size());
  s.precision = l / static_cast<double>(hypothesis.size());
  const double b2 = kRougeBeta * kRougeBeta;
  const double denom = s.recall + b2 * s.precision;
  s.f = denom > 0.0 ? (1.0 + b2) * s.recall * s.precision / denom : 0.0;
  return s;
}

double rouge_l(std::string_view reference, std::string_view hypothesis, RougeVariant variant) {
  const PRF s = rouge_l_scores(corpus::split_words(reference), corpus::split_words(hypothesis));
  switch (variant) {
    case RougeVariant::Recall:
      return s.recall;
    case RougeVariant::Precision:
      return s.precision;
    case RougeVariant::F:
      return s.f;
  }
  return s.f;
}

namespace {

std::map<std::vector<std::string>, std::size_t> ngram_map(const Words& w, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> m;
  if (w.size() < n) return m;
  for (std::size_t i = 0; i + n <= w.size(); ++i) {
    ++m[std::vector<std::string>(w.begin() + static_cast<std::ptrdiff_t>(i),
                                 w.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return m;
}

}  // namespace

NgramCounts ngram_counts(const Words& reference, const Words& hypothesis, std::size_t n) {
  NgramCounts c;
  c.total = hypothesis.size() >= n ? hypothesis.size() - n + 1 : 0;
  c.reference_total = reference.size() >= n ? reference.size() - n + 1 : 0;
  const auto ref = ngram_map(reference, n);
  for (const auto& [g, cnt] : ngram_map(hypothesis, n)) {
    auto it = ref.find(g);
    if (it != ref.end()) c.matches += std::min(cnt, it->second);
  }
  return c;
}

PRF rouge_n(const Words& reference, const Words& hypothesis, std::size_t n) {
  const NgramCounts c = ngram_counts(reference, hypothesis, n);
  if (c.total == 0 && c.reference_total == 0) {
    return reference.empty() && hypothesis.empty() ? PRF{1.0, 1.0, 1.0} : PRF{};
  }
  PRF s;
  if (c.total) s.precision = static_cast<double>(c.matches) / static_cast<double>(c.total);
  if (c.reference_total) s.recall = static_cast<double>(c.matches) / static_cast<double>(c.reference_total);
  if (s.precision + s.recall > 0.0) s.f = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

double bleu_precision(const NgramCounts& c, std::size_t n, BleuSmoothing smoothing) {
  // Neither side has n-grams of this order: nothing to disagree on.
  if (c.total == 0 && c.reference_total == 0) return 1.0;
  if (smoothing == BleuSmoothing::AddOne && n >= 2) {
    return (static_cast<double>(c.matches) + 1.0) / (static_cast<double>(c.total) + 1.0);
  }
  if (c.matches == 0) return kBleuEpsilon;
  return static_cast<double>(c.matches) / static_cast<double>(c.total);
}

double brevity_penalty(std::size_t ref_len, std::size_t hyp_len) {
  if (hyp_len == 0) return ref_len == 0 ? 1.0 : 0.0;
  if (hyp_len > ref_len) return 1.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

double bleu(const Words& reference, const Words& hypothesis, std::size_t max_order, BleuSmoothing smoothing) {
  if (reference.empty() && hypothesis.empty()) return 1.0;
  const double bp = brevity_penalty(reference.size(), hypothesis.size());
  if (bp == 0.0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_order; ++n) {
    log_sum += std::log(bleu_precision(ngram_counts(reference, hypothesis, n), n, smoothing));
  }
  return std::clamp(bp * std::exp(log_sum / static_cast<double>(max_order)), 0.0, 1.0);
}

double bleu_mean(std::string_view reference, std::string_view hypothesis, BleuSmoothing smoothing) {
  const Words ref = corpus::split_words(reference);
  const Words hyp = corpus::split_words(hypothesis);
  double s = 0.0;
  for (std::size_t i = 1; i <= 4; ++i) s += bleu(ref, hyp, i, smoothing);
  return s / 4.0;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    cur.push_back(text[i]);
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') &&
        (i + 1 == text.size() || std::isspace(static_cast<unsigned char>(text[i + 1])))) {
      if (!corpus::normalize(cur).empty()) out.push_back(cur);
      cur.clear();
    }
  }
  if (!corpus::normalize(cur).empty()) out.push_back(cur);
  return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors of different length");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

namespace {

std::vector<double> checked_embed(const TextEmbedder& e, std::string_view text) {
  std::vector<double> v;
  try {
    v = e.embed(text);
  } catch (const RewardError&) {
    throw;
  } catch (const std::exception& ex) {
    throw RewardError(std::string("embedder failed: ") + ex.what());
  }
  if (v.size() != e.dim()) throw RewardError("embedder returned a vector of unexpected width");
  for (double x : v) {
    if (!std::isfinite(x)) throw RewardError("embedder returned a non-finite value");
  }
  return v;
}

std::vector<double> mean_sentence_embedding(const TextEmbedder& e, const std::vector<std::string>& sents) {
  std::vector<double> acc(e.dim(), 0.0);
  for (const auto& s : sents) {
    const auto v = checked_embed(e, s);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v[i];
  }
  for (auto& x : acc) x /= static_cast<double>(sents.size());
  return acc;
}

// Both empty -> 1, exactly one empty -> 0, otherwise nullopt-like -1.
double empty_rule(std::string_view a, std::string_view b) {
  const bool ea = corpus::normalize(a).empty();
  const bool eb = corpus::normalize(b).empty();
  if (ea && eb) return 1.0;
  if (ea || eb) return 0.0;
  return -1.0;
}

}  // namespace

double sent_avg_cos(std::string_view reference, std::string_view hypothesis, const TextEmbedder& embedder) {
  if (double r = empty_rule(reference, hypothesis); r >= 0.0) return r;
  if (corpus::normalize(reference) == corpus::normalize(hypothesis)) return 1.0;
  const auto a = mean_sentence_embedding(embedder, split_sentences(reference));
  const auto b = mean_sentence_embedding(embedder, split_sentences(hypothesis));
  return rescale_cosine(cosine(a, b));
}

double sfpeg(std::string_view reference, std::string_view hypothesis, const TextEmbedder& embedder) {
  if (double r = empty_rule(reference, hypothesis); r >= 0.0) return r;
  if (corpus::normalize(reference) == corpus::normalize(hypothesis)) return 1.0;
  return rescale_cosine(cosine(checked_embed(embedder, reference), checked_embed(embedder, hypothesis)));
}

std::string_view component_name(RewardComponent c) {
  switch (c) {
    case RewardComponent::RougeL:
      return "rouge_l";
    case RewardComponent::BleuMean:
      return "bleu";
    case RewardComponent::SentAvgCos:
      return "sent_avg_cos";
    case RewardComponent::Sfpeg:
      return "sfpeg";
  }
  return "?";
}

bool needs_embedder(RewardComponent c) {
  return c == RewardComponent::SentAvgCos || c == RewardComponent::Sfpeg;
}

void RewardSpec::validate() const {
  if (components.empty()) throw ConfigError("reward spec: at least one component is required");
  double total = 0.0;
  for (const auto& [c, w] : components) {
    if (!(w >= 0.0)) throw ConfigError("reward spec: negative weight for " + std::string(component_name(c)));
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("reward spec: weights must sum to 1");
}

bool RewardSpec::needs_embedder() const {
  return std::any_of(components.begin(), components.end(),
                     [](const auto& cw) { return rewards::needs_embedder(cw.first); });
}

namespace {

RewardComponent parse_component(std::string name) {
  for (auto& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (name == "rouge_l" || name == "rougel" || name == "rouge") return RewardComponent::RougeL;
  if (name == "bleu" || name == "bleu_mean") return RewardComponent::BleuMean;
  if (name == "sent_avg_cos" || name == "simcse" || name == "sbert") return RewardComponent::SentAvgCos;
  if (name == "sfpeg") return RewardComponent::Sfpeg;
  throw ConfigError("reward spec: unknown component '" + name + "'");
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

RewardSpec parse_reward_spec(std::string_view text) {
  RewardSpec spec;
  const std::string t = trim(text);
  if (t.empty()) throw ConfigError("reward spec: empty");
  if (t.find(':') != std::string::npos) {
    std::size_t start = 0;
    while (start <= t.size()) {
      const auto end = std::min(t.find(',', start), t.size());
      const std::string item = trim(std::string_view(t).substr(start, end - start));
      const auto colon = item.find(':');
      if (colon == std::string::npos) throw ConfigError("reward spec: expected name:weight, got '" + item + "'");
      double w = 0.0;
      try {
        w = std::stod(item.substr(colon + 1));
      } catch (const std::exception&) {
        throw ConfigError("reward spec: bad weight in '" + item + "'");
      }
      spec.components.emplace_back(parse_component(trim(item.substr(0, colon))), w);
      start = end + 1;
    }
  } else {
    std::vector<RewardComponent> cs;
    std::size_t start = 0;
    while (start <= t.size()) {
      const auto end = std::min(t.find('+', start), t.size());
      cs.push_back(parse_component(trim(std::string_view(t).substr(start, end - start))));
      start = end + 1;
    }
    for (auto c : cs) spec.components.emplace_back(c, 1.0 / static_cast<double>(cs.size()));
  }
  spec.validate();
  return spec;
}

double composite_reward(const RewardSpec& spec, std::string_view reference, std::string_view hypothesis,
                        const TextEmbedder* embedder) {
  if (spec.needs_embedder() && embedder == nullptr) {
    throw ConfigError("reward spec uses a semantic component but no embedder was provided");
  }
  double total = 0.0;
  for (const auto& [c, w] : spec.components) {
    if (w == 0.0) continue;
    double r = 0.0;
    switch (c) {
      case RewardComponent::RougeL:
        r = rouge_l(reference, hypothesis, spec.rouge_variant);
        break;
      case RewardComponent::BleuMean:
        r = bleu_mean(reference, hypothesis, spec.bleu_smoothing);
        break;
      case RewardComponent::SentAvgCos:
        r = sent_avg_cos(reference, hypothesis, *embedder);
        break;
      case RewardComponent::Sfpeg:
        r = sfpeg(reference, hypothesis, *embedder);
        break;
    }
    total += w * r;
  }
  return std::clamp(total, 0.0, 1.0);
}

}  // namespace rlqfs::rewards
