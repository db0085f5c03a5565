#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rlqfs/ndgrad/tensor.hpp"

namespace rlqfs::nd {

struct NamedParam {
  std::string name;
  Tensor tensor;
};
using ParamList = std::vector<NamedParam>;

void zero_grads(ParamList& params);
// Scales all gradients so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(ParamList& params, double max_norm);

enum class OptimizerKind { SGD, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 3e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg);

  // Applies one update to every parameter. Throws ContractError if any
  // parameter has no gradient buffer (call zero_grads before backward).
  void step(ParamList& params);

  const OptimizerConfig& config() const { return cfg_; }
  void set_learning_rate(double lr);
  std::uint64_t steps_taken() const { return t_; }

  // Moment buffers, one pair per parameter in step() order.
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(std::uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

 private:
  OptimizerConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace rlqfs::nd
