#include "rlqfs/ndgrad/optim.hpp"

#include <cmath>

#include "rlqfs/errors.hpp"

namespace rlqfs::nd {

void zero_grads(ParamList& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

double clip_grad_norm(ParamList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.tensor.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto& p : params) {
      for (double& g : p.tensor.grad()) g *= s;
    }
  }
  return norm;
}

Optimizer::Optimizer(OptimizerConfig cfg) : cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0)) throw ContractError("optimizer: learning rate must be > 0");
}

void Optimizer::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw ContractError("optimizer: learning rate must be > 0");
  cfg_.learning_rate = lr;
}

void Optimizer::restore(std::uint64_t t, std::vector<std::vector<double>> m,
                        std::vector<std::vector<double>> v) {
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

void Optimizer::step(ParamList& params) {
  for (const auto& p : params) {
    if (p.tensor.grad().size() != p.tensor.size()) {
      throw ContractError("optimizer step: parameter '" + p.name + "' has no gradient");
    }
  }
  const double lr = cfg_.learning_rate;
  if (cfg_.kind == OptimizerKind::SGD) {
    for (auto& p : params) {
      auto d = p.tensor.data();
      auto g = p.tensor.grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
    }
    ++t_;
    return;
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.tensor.size(), 0.0);
      v_.emplace_back(p.tensor.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("optimizer step: parameter set changed");
  ++t_;
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto d = params[k].tensor.data();
    auto g = params[k].tensor.grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (m.size() != d.size()) throw ContractError("optimizer step: moment/parameter shape mismatch");
    for (std::size_t i = 0; i < d.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      d[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
    }
  }
}

}  // namespace rlqfs::nd
