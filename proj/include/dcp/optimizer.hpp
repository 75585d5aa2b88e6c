#pragma once

#include <cmath>
#include <vector>

#include "dcp/errors.hpp"
#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// Plain SGD with heavy-ball momentum: v = mu v + g; w -= lr v.
/// An optional global-norm clip rescales the whole gradient before the
/// momentum update (used by the contrastive warm-up, off for prompt tuning).
/// Velocity slots are keyed by position, so the leaf list must keep a stable
/// order across steps. Updates allocate fresh value buffers; tensors already
/// recorded on a tape are never mutated.
class SgdMomentum {
 public:
  SgdMomentum(double learning_rate, double momentum, double max_grad_norm = 0.0)
      : lr_(learning_rate), momentum_(momentum), max_grad_norm_(max_grad_norm) {
    if (!(learning_rate > 0.0)) throw ConfigError("sgd: learning rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd: momentum must be in [0, 1)");
    if (max_grad_norm < 0.0) throw ConfigError("sgd: max_grad_norm must be non-negative");
  }

  /// masters[i] is the detached parameter; taped[i] its leaf on the tape that
  /// backward() just ran on.
  void step(std::vector<Tensor*> masters, const std::vector<Tensor>& taped, GradientMap& grads) {
    if (masters.size() != taped.size()) throw ContractError("sgd: leaf list size mismatch");
    if (velocity_.empty()) velocity_.resize(masters.size());
    if (velocity_.size() != masters.size()) throw ContractError("sgd: leaf count changed");

    double scale = 1.0;
    if (max_grad_norm_ > 0.0) {
      double norm_sq = 0.0;
      for (const Tensor& t : taped)
        for (double g : grads.at(t)) norm_sq += g * g;
      const double norm = std::sqrt(norm_sq);
      if (norm > max_grad_norm_) scale = max_grad_norm_ / norm;
    }

    for (std::size_t i = 0; i < masters.size(); ++i) {
      const std::vector<double>& g = grads.at(taped[i]);
      auto& v = velocity_[i];
      if (v.empty()) v.assign(g.size(), 0.0);
      std::vector<double> next(masters[i]->values());
      for (std::size_t j = 0; j < g.size(); ++j) {
        v[j] = momentum_ * v[j] + scale * g[j];
        next[j] -= lr_ * v[j];
      }
      *masters[i] = masters[i]->with_values(std::move(next));
    }
  }

 private:
  double lr_;
  double momentum_;
  double max_grad_norm_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace dcp
