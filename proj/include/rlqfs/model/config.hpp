#pragma once

#include <cstddef>
#include <string>

namespace rlqfs::model {

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 2;
  std::size_t n_dec_layers = 2;
  std::size_t ffn_dim = 256;
  std::size_t max_positions = 256;
  double dropout_p = 0.0;
  double init_std = 0.02;

  // Throws ConfigError naming the first offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace rlqfs::model
