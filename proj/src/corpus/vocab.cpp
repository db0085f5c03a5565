#include "rlqfs/corpus/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <map>

#include "rlqfs/errors.hpp"

namespace rlqfs::corpus {

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

std::string normalize(std::string_view text) {
  std::string out;
  for (const auto& w : split_words(text)) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  for (const auto& w : split_words(text)) {
    if (std::any_of(w.begin(), w.end(), [](char c) {
          const auto u = static_cast<unsigned char>(c);
          return u >= 0x80 || std::isalnum(u);
        })) {
      ++n;
    }
  }
  return n;
}

Vocabulary::Vocabulary() {
  for (auto s : kSpecialTokens) tokens_.emplace_back(s);
  index();
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& words) {
  Vocabulary v;
  for (const auto& w : words) {
    if (v.ids_.count(w)) throw DataError("duplicate vocabulary token '" + w + "'");
    v.tokens_.push_back(w);
    v.ids_[w] = static_cast<TokenId>(v.tokens_.size() - 1);
  }
  v.index();
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, std::size_t min_freq) {
  std::map<std::string, std::size_t> freq;
  for (const auto& t : texts) {
    for (auto& w : split_words(t)) ++freq[w];
  }
  std::vector<std::pair<std::string, std::size_t>> items;
  for (auto& [w, c] : freq) {
    if (c >= min_freq) items.emplace_back(w, c);
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  words.reserve(items.size());
  for (auto& [w, c] : items) words.push_back(w);
  return from_tokens(words);
}

void Vocabulary::index() {
  ids_.clear();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    ids_[tokens_[i]] = static_cast<TokenId>(i);
    for (char c : tokens_[i]) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    h ^= 0x0a;
    h *= 0x100000001b3ULL;
  }
  hash_ = h;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash_));
  out << "# rlqfs-vocab hash=" << hex << '\n';
  for (std::size_t i = kNumSpecial; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  std::string header;
  std::getline(in, header);
  const std::string prefix = "# rlqfs-vocab hash=";
  if (header.rfind(prefix, 0) != 0) throw DataError(path.string() + ":1: missing vocabulary header");
  const std::uint64_t expect = std::stoull(header.substr(prefix.size()), nullptr, 16);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) words.push_back(line);
  Vocabulary v = from_tokens(words);
  if (v.hash() != expect) throw DataError(path.string() + ": vocabulary hash does not match header");
  return v;
}

std::vector<TokenId> tokenize(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(std::span<const TokenId> ids, const Vocabulary& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (!out.empty()) out.push_back(' ');
    out += vocab.token(id);
  }
  return out;
}

std::vector<TokenId> make_encoder_input(std::span<const TokenId> query, std::span<const TokenId> document,
                                        std::size_t max_positions) {
  if (query.empty()) throw ContractError("encoder input: empty query");
  if (query.size() + 3 > max_positions) {
    throw ContractError("encoder input: query of " + std::to_string(query.size()) +
                        " tokens does not fit max_positions " + std::to_string(max_positions));
  }
  const std::size_t doc_budget = max_positions - query.size() - 3;
  const std::size_t doc_len = std::min(doc_budget, document.size());
  std::vector<TokenId> out;
  out.reserve(query.size() + doc_len + 3);
  out.push_back(kBos);
  out.insert(out.end(), query.begin(), query.end());
  out.push_back(kSep);
  out.insert(out.end(), document.begin(), document.begin() + static_cast<std::ptrdiff_t>(doc_len));
  out.push_back(kEos);
  return out;
}

}  // namespace rlqfs::corpus
