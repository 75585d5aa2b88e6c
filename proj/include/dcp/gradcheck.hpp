#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dcp/rng.hpp"
#include "dcp/tape.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

/// Outcome of one finite-difference audit entry.
struct FdCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t comparisons = 0;
  bool pass(double tol) const { return max_rel_error <= tol; }
};

struct FdOptions {
  double step = 1e-5;
  // Relative error uses an absolute floor so that finite-difference noise on
  // near-zero gradients does not register as failure.
  double denom_floor = 1e-2;
};

/// A differentiable scalar function of a list of leaves. The callback must
/// register each leaf on the given tape (trainable) in order and return the
/// scalar loss.
using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

namespace detail {

inline double fd_eval(const ScalarFn& fn, const std::vector<Tensor>& leaves) {
  Tape tape;
  std::vector<Tensor> lifted;
  lifted.reserve(leaves.size());
  for (const Tensor& leaf : leaves) lifted.push_back(tape.leaf(leaf, true));
  return fn(tape, lifted).at(0);
}

inline double rel_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace detail

/// Compare the tape gradient of `fn` against central differences, element by
/// element across every leaf.
inline FdCheckResult fd_check(const std::string& name, const std::vector<Tensor>& leaves,
                              const ScalarFn& fn, FdOptions opts = {}) {
  FdCheckResult result{name};

  Tape tape;
  std::vector<Tensor> lifted;
  for (const Tensor& leaf : leaves) lifted.push_back(tape.leaf(leaf, true));
  Tensor loss = fn(tape, lifted);
  GradientMap grads = tape.backward(loss);

  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const std::vector<double>& analytic = grads.at(lifted[li]);
    for (std::size_t i = 0; i < leaves[li].size(); ++i) {
      std::vector<Tensor> bumped = leaves;
      std::vector<double> plus(leaves[li].values());
      std::vector<double> minus(plus);
      plus[i] += opts.step;
      minus[i] -= opts.step;
      bumped[li] = leaves[li].with_values(std::move(plus));
      const double f_plus = detail::fd_eval(fn, bumped);
      bumped[li] = leaves[li].with_values(std::move(minus));
      const double f_minus = detail::fd_eval(fn, bumped);
      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      result.max_rel_error =
          std::max(result.max_rel_error, detail::rel_error(analytic[i], numeric, opts.denom_floor));
      ++result.comparisons;
    }
  }
  return result;
}

/// Directional variant: perturb whole leaves along random unit directions and
/// compare g.u against the finite difference of the loss. One probe per leaf
/// per round; much cheaper than elementwise for large leaves.
inline FdCheckResult fd_check_directional(const std::string& name,
                                          const std::vector<Tensor>& leaves, const ScalarFn& fn,
                                          Rng& rng, std::size_t rounds = 2, FdOptions opts = {}) {
  FdCheckResult result{name};

  Tape tape;
  std::vector<Tensor> lifted;
  for (const Tensor& leaf : leaves) lifted.push_back(tape.leaf(leaf, true));
  Tensor loss = fn(tape, lifted);
  GradientMap grads = tape.backward(loss);

  for (std::size_t round = 0; round < rounds; ++round) {
    for (std::size_t li = 0; li < leaves.size(); ++li) {
      const std::size_t n = leaves[li].size();
      std::vector<double> dir(n);
      double norm = 0.0;
      for (double& d : dir) {
        d = rng.normal();
        norm += d * d;
      }
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (double& d : dir) d /= norm;

      const std::vector<double>& analytic = grads.at(lifted[li]);
      double directional = 0.0;
      for (std::size_t i = 0; i < n; ++i) directional += analytic[i] * dir[i];

      std::vector<Tensor> bumped = leaves;
      std::vector<double> plus(leaves[li].values());
      std::vector<double> minus(plus);
      for (std::size_t i = 0; i < n; ++i) {
        plus[i] += opts.step * dir[i];
        minus[i] -= opts.step * dir[i];
      }
      bumped[li] = leaves[li].with_values(std::move(plus));
      const double f_plus = detail::fd_eval(fn, bumped);
      bumped[li] = leaves[li].with_values(std::move(minus));
      const double f_minus = detail::fd_eval(fn, bumped);
      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      result.max_rel_error =
          std::max(result.max_rel_error, detail::rel_error(directional, numeric, opts.denom_floor));
      ++result.comparisons;
    }
  }
  return result;
}

/// Compare externally supplied gradients (one buffer per leaf) against
/// central differences. Used by negative-control tests that feed corrupted
/// gradients through the same comparison path.
inline FdCheckResult fd_check_given(const std::string& name, const std::vector<Tensor>& leaves,
                                    const std::vector<std::vector<double>>& given_grads,
                                    const ScalarFn& fn, FdOptions opts = {}) {
  FdCheckResult result{name};
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    for (std::size_t i = 0; i < leaves[li].size(); ++i) {
      std::vector<Tensor> bumped = leaves;
      std::vector<double> plus(leaves[li].values());
      std::vector<double> minus(plus);
      plus[i] += opts.step;
      minus[i] -= opts.step;
      bumped[li] = leaves[li].with_values(std::move(plus));
      const double f_plus = detail::fd_eval(fn, bumped);
      bumped[li] = leaves[li].with_values(std::move(minus));
      const double f_minus = detail::fd_eval(fn, bumped);
      const double numeric = (f_plus - f_minus) / (2.0 * opts.step);
      result.max_rel_error = std::max(
          result.max_rel_error, detail::rel_error(given_grads[li][i], numeric, opts.denom_floor));
      ++result.comparisons;
    }
  }
  return result;
}

}  // namespace dcp
