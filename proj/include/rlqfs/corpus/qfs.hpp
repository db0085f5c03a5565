#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rlqfs/ndgrad/rng.hpp"

namespace rlqfs::corpus {

struct QfsExample {
  std::string id;
  std::string query;
  std::string document;
  std::string summary;

  friend bool operator==(const QfsExample&, const QfsExample&) = default;
};

// JSONL with fields {id, query, document, summary}. When `require_summary`
// is false the summary field may be absent (generation inputs).
std::vector<QfsExample> load_qfs_jsonl(const std::filesystem::path& path, bool require_summary = true);
void save_qfs_jsonl(const std::filesystem::path& path, const std::vector<QfsExample>& examples);

struct SyntheticQfs {
  std::vector<QfsExample> examples;
  double avg_queries_per_document = 0.0;
};

// Templated fact documents. Each document lists attributes of one entity;
// each query asks for one attribute and the summary restates that fact.
SyntheticQfs make_synthetic_qfs(std::size_t n_docs, std::size_t queries_per_doc, nd::Rng& rng);

// Extractive sanity baseline: the document sentence with the largest word
// overlap with the query.
std::string best_overlap_sentence(const std::string& query, const std::string& document);

}  // namespace rlqfs::corpus
