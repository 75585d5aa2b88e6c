#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dcp/errors.hpp"
#include "dcp/tensor.hpp"

namespace dcp {

class Tape;

/// Read-only view of the gradient buffers produced by Tape::backward().
/// Leaves that the loss does not reach report zero gradients.
class GradientMap {
 public:
  explicit GradientMap(Tape* tape) : tape_(tape) {}
  const std::vector<double>& at(const Tensor& t) const;

 private:
  Tape* tape_;
};

/// Reverse-mode differentiation tape over immutable f64 tensors.
///
/// Every operation records one node; nodes are created in topological order,
/// so backward() is a single reverse sweep. A tape is built per forward pass
/// and must not be written from two threads at once.
///
/// Broadcasting rule (the only one): for binary elementwise ops the operand
/// shapes must be identical, or the right operand's shape must be a strict
/// suffix of the left operand's shape, in which case the right operand is
/// repeated over the leading axes. Anything else is a ShapeError.
class Tape {
 public:
  Tape() : id_(next_id()) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Record a leaf. Trainable leaves receive gradient buffers in backward().
  Tensor leaf(const Tensor& value, bool requires_grad) {
    if (!value.defined()) throw ContractError("leaf: undefined tensor");
    return emit(value.shape, value.data, requires_grad, {}, nullptr);
  }

  /// Record a non-trainable constant.
  Tensor constant(const Tensor& value) { return leaf(value, false); }

  // ---- core linear algebra -------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    const long pa = lift(a), pb = lift(b);
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) {
      throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                       shape_str(b.shape));
    }
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    std::vector<double> out(m * n, 0.0);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    PullFn pull;
    if (needs(pa) || needs(pb)) {
      pull = [pa, pb, m, k, n](Tape& t, long, const std::vector<double>& g) {
        if (t.needs(pa)) detail::gemm_nt(g.data(), t.val(pb).data(), t.gacc(pa).data(), m, n, k);
        if (t.needs(pb)) detail::gemm_tn(t.val(pa).data(), g.data(), t.gacc(pb).data(), m, k, n);
      };
    }
    return emit({m, n}, std::move(out), {pa, pb}, std::move(pull));
  }

  Tensor transpose(const Tensor& a) {
    const long pa = lift(a);
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape));
    const std::size_t m = a.shape[0], n = a.shape[1];
    std::vector<double> out(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, m, n](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
      };
    }
    return emit({n, m}, std::move(out), {pa}, std::move(pull));
  }

  // ---- elementwise family --------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add); }
  Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub); }
  Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul); }

  Tensor scale(const Tensor& a, double factor) {
    const long pa = lift(a);
    std::vector<double> out(a.values());
    for (double& x : out) x *= factor;
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, factor](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
      };
    }
    return emit(a.shape, std::move(out), {pa}, std::move(pull));
  }

  /// Exact erf-based GELU: 0.5 x (1 + erf(x / sqrt(2))).
  Tensor gelu(const Tensor& a) {
    const long pa = lift(a);
    std::vector<double> out(a.size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
    PullFn pull;
    if (needs(pa)) {
      pull = [pa](Tape& t, long, const std::vector<double>& g) {
        const auto& x = t.val(pa);
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
          const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
          ga[i] += g[i] * (cdf + x[i] * pdf);
        }
      };
    }
    return emit(a.shape, std::move(out), {pa}, std::move(pull));
  }

  Tensor concat_axis(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat_axis: no parts");
    std::vector<long> pids(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) pids[i] = lift(parts[i]);
    const Shape& base = parts[0].shape;
    if (axis >= base.size()) throw ShapeError("concat_axis: axis out of range");
    Shape out_shape = base;
    std::size_t total = base[axis];
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Shape& s = parts[i].shape;
      if (s.size() != base.size()) throw ShapeError("concat_axis: rank mismatch");
      for (std::size_t d = 0; d < s.size(); ++d) {
        if (d != axis && s[d] != base[d])
          throw ShapeError("concat_axis: shapes " + shape_str(base) + " and " + shape_str(s) +
                           " differ off-axis");
      }
      total += s[axis];
    }
    out_shape[axis] = total;
    const std::size_t outer = prefix_product(out_shape, axis);
    const std::size_t inner = suffix_product(out_shape, axis + 1);
    std::vector<double> out(numel(out_shape));
    std::vector<std::size_t> extents(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) extents[i] = parts[i].shape[axis];
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto& pv = parts[p].values();
      const std::size_t block = extents[p] * inner;
      for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(pv.data() + o * block, block, out.data() + (o * total + offset) * inner);
      }
      offset += extents[p];
    }
    PullFn pull;
    bool rg = false;
    for (long pid : pids) rg = rg || needs(pid);
    if (rg) {
      pull = [pids, extents, outer, inner, total](Tape& t, long, const std::vector<double>& g) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < pids.size(); ++p) {
          const std::size_t block = extents[p] * inner;
          if (t.needs(pids[p])) {
            auto& gp = t.gacc(pids[p]);
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src = g.data() + (o * total + off) * inner;
              double* dst = gp.data() + o * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          off += extents[p];
        }
      };
    }
    return emit(std::move(out_shape), std::move(out), std::move(pids), std::move(pull));
  }

  Tensor slice_axis(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const long pa = lift(a);
    if (axis >= a.rank()) throw ShapeError("slice_axis: axis out of range");
    if (begin >= end || end > a.shape[axis])
      throw ContractError("slice_axis: invalid range [" + std::to_string(begin) + ", " +
                          std::to_string(end) + ") for extent " + std::to_string(a.shape[axis]));
    Shape out_shape = a.shape;
    out_shape[axis] = end - begin;
    const std::size_t outer = prefix_product(a.shape, axis);
    const std::size_t inner = suffix_product(a.shape, axis + 1);
    const std::size_t ext = a.shape[axis], width = end - begin;
    std::vector<double> out(numel(out_shape));
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(av.data() + (o * ext + begin) * inner, width * inner,
                  out.data() + o * width * inner);
    }
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, outer, inner, ext, begin, width](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.data() + o * width * inner;
          double* dst = ga.data() + (o * ext + begin) * inner;
          for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
        }
      };
    }
    return emit(std::move(out_shape), std::move(out), {pa}, std::move(pull));
  }

  Tensor reduce_mean_axis(const Tensor& a, std::size_t axis) {
    const long pa = lift(a);
    if (axis >= a.rank()) throw ShapeError("reduce_mean_axis: axis out of range");
    const std::size_t outer = prefix_product(a.shape, axis);
    const std::size_t inner = suffix_product(a.shape, axis + 1);
    const std::size_t ext = a.shape[axis];
    Shape out_shape = drop_axis(a.shape, axis);
    std::vector<double> out(outer * inner, 0.0);
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < ext; ++e)
        for (std::size_t i = 0; i < inner; ++i)
          out[o * inner + i] += av[(o * ext + e) * inner + i];
    const double inv = 1.0 / static_cast<double>(ext);
    for (double& x : out) x *= inv;
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, outer, inner, ext, inv](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t e = 0; e < ext; ++e)
            for (std::size_t i = 0; i < inner; ++i)
              ga[(o * ext + e) * inner + i] += inv * g[o * inner + i];
      };
    }
    return emit(std::move(out_shape), std::move(out), {pa}, std::move(pull));
  }

  /// Per-element max over an axis; ties route the gradient to the lowest index.
  Tensor reduce_max_axis(const Tensor& a, std::size_t axis) {
    const long pa = lift(a);
    if (axis >= a.rank()) throw ShapeError("reduce_max_axis: axis out of range");
    const std::size_t outer = prefix_product(a.shape, axis);
    const std::size_t inner = suffix_product(a.shape, axis + 1);
    const std::size_t ext = a.shape[axis];
    Shape out_shape = drop_axis(a.shape, axis);
    std::vector<double> out(outer * inner, -std::numeric_limits<double>::infinity());
    auto argmax = std::make_shared<std::vector<std::size_t>>(outer * inner, 0);
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t e = 0; e < ext; ++e)
        for (std::size_t i = 0; i < inner; ++i) {
          const double v = av[(o * ext + e) * inner + i];
          if (v > out[o * inner + i]) {
            out[o * inner + i] = v;
            (*argmax)[o * inner + i] = e;
          }
        }
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, outer, inner, ext, argmax](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t e = (*argmax)[o * inner + i];
            ga[(o * ext + e) * inner + i] += g[o * inner + i];
          }
      };
    }
    return emit(std::move(out_shape), std::move(out), {pa}, std::move(pull));
  }

  /// Repeat a tensor n times along a new leading axis.
  Tensor tile_leading(const Tensor& a, std::size_t n) {
    const long pa = lift(a);
    if (n == 0) throw ContractError("tile_leading: zero copies");
    Shape out_shape;
    out_shape.reserve(a.rank() + 1);
    out_shape.push_back(n);
    out_shape.insert(out_shape.end(), a.shape.begin(), a.shape.end());
    const std::size_t block = a.size();
    std::vector<double> out(n * block);
    for (std::size_t c = 0; c < n; ++c)
      std::copy_n(a.values().data(), block, out.data() + c * block);
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, n, block](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t c = 0; c < n; ++c)
          for (std::size_t i = 0; i < block; ++i) ga[i] += g[c * block + i];
      };
    }
    return emit(std::move(out_shape), std::move(out), {pa}, std::move(pull));
  }

  /// Stack rank-1 tensors of equal length into a matrix (row per input).
  Tensor stack_rows(const std::vector<Tensor>& rows) {
    if (rows.empty()) throw ContractError("stack_rows: no rows");
    std::vector<long> pids(rows.size());
    const std::size_t d = rows[0].size();
    std::vector<double> out;
    out.reserve(rows.size() * d);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].rank() != 1 || rows[i].size() != d)
        throw ShapeError("stack_rows: expected rank-1 rows of equal length");
      pids[i] = lift(rows[i]);
      out.insert(out.end(), rows[i].values().begin(), rows[i].values().end());
    }
    PullFn pull;
    bool rg = false;
    for (long pid : pids) rg = rg || needs(pid);
    if (rg) {
      pull = [pids, d](Tape& t, long, const std::vector<double>& g) {
        for (std::size_t i = 0; i < pids.size(); ++i) {
          if (!t.needs(pids[i])) continue;
          auto& gp = t.gacc(pids[i]);
          for (std::size_t j = 0; j < d; ++j) gp[j] += g[i * d + j];
        }
      };
    }
    return emit({rows.size(), d}, std::move(out), std::move(pids), std::move(pull));
  }

  /// Rows scaled to unit Euclidean norm; a row of exact zeros is an error.
  Tensor l2_normalize_rows(const Tensor& a) {
    const long pa = lift(a);
    if (a.rank() != 2) throw ShapeError("l2_normalize_rows: expected rank 2");
    const std::size_t m = a.shape[0], n = a.shape[1];
    std::vector<double> out(m * n);
    auto norms = std::make_shared<std::vector<double>>(m);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i) {
      double ss = 0.0;
      for (std::size_t j = 0; j < n; ++j) ss += av[i * n + j] * av[i * n + j];
      const double norm = std::sqrt(ss);
      if (norm == 0.0)
        throw DegenerateInputError("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
      (*norms)[i] = norm;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] / norm;
    }
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, m, n, norms](Tape& t, long self, const std::vector<double>& g) {
        const auto& y = t.val(self);
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
          const double inv = 1.0 / (*norms)[i];
          for (std::size_t j = 0; j < n; ++j)
            ga[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) * inv;
        }
      };
    }
    return emit({m, n}, std::move(out), {pa}, std::move(pull));
  }

  /// Normalize the last axis to zero mean / unit variance, then apply the
  /// affine map y = gain * xhat + bias. gain and bias are rank-1 of length d.
  Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const long pa = lift(a), pg = lift(gain), pb = lift(bias);
    if (a.rank() == 0) throw ShapeError("layer_norm: scalar input");
    const std::size_t d = a.shape.back();
    if (d < 1 || eps <= 0.0) throw ContractError("layer_norm: need d >= 1 and eps > 0");
    if (gain.shape != Shape{d} || bias.shape != Shape{d})
      throw ShapeError("layer_norm: gain/bias must be rank-1 of length " + std::to_string(d));
    const std::size_t rows = a.size() / d;
    std::vector<double> out(a.size());
    auto stats = std::make_shared<std::vector<double>>(2 * rows);  // (mu, inv_sigma) per row
    const auto& av = a.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* x = av.data() + r * d;
      double mu = 0.0;
      for (std::size_t j = 0; j < d; ++j) mu += x[j];
      mu /= static_cast<double>(d);
      double var = 0.0;
      for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
      var /= static_cast<double>(d);
      const double inv_sigma = 1.0 / std::sqrt(var + eps);
      (*stats)[2 * r] = mu;
      (*stats)[2 * r + 1] = inv_sigma;
      for (std::size_t j = 0; j < d; ++j)
        out[r * d + j] = gv[j] * (x[j] - mu) * inv_sigma + bv[j];
    }
    PullFn pull;
    if (needs(pa) || needs(pg) || needs(pb)) {
      pull = [pa, pg, pb, rows, d, stats](Tape& t, long, const std::vector<double>& g) {
        const auto& x = t.val(pa);
        const auto& gv = t.val(pg);
        for (std::size_t r = 0; r < rows; ++r) {
          const double mu = (*stats)[2 * r];
          const double inv_sigma = (*stats)[2 * r + 1];
          const double* xr = x.data() + r * d;
          const double* gr = g.data() + r * d;
          if (t.needs(pg) || t.needs(pb)) {
            auto& gg = t.needs(pg) ? t.gacc(pg) : t.scratch(d);
            auto& gb = t.needs(pb) ? t.gacc(pb) : t.scratch(d);
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += gr[j] * (xr[j] - mu) * inv_sigma;
              gb[j] += gr[j];
            }
          }
          if (t.needs(pa)) {
            auto& ga = t.gacc(pa);
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mu) * inv_sigma;
              const double dxhat = gr[j] * gv[j];
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
            }
            const double invd = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double xhat = (xr[j] - mu) * inv_sigma;
              const double dxhat = gr[j] * gv[j];
              ga[r * d + j] +=
                  inv_sigma * (dxhat - invd * sum_dxhat - xhat * invd * sum_dxhat_xhat);
            }
          }
        }
      };
    }
    return emit(a.shape, std::move(out), {pa, pg, pb}, std::move(pull));
  }

  /// Row-wise softmax with per-row max subtraction.
  Tensor softmax_rows(const Tensor& a) {
    const long pa = lift(a);
    if (a.rank() != 2) throw ShapeError("softmax_rows: expected rank 2");
    const std::size_t m = a.shape[0], n = a.shape[1];
    std::vector<double> out(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i) {
      const double* x = av.data() + i * n;
      double mx = x[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        out[i * n + j] = std::exp(x[j] - mx);
        sum += out[i * n + j];
      }
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, m, n](Tape& t, long self, const std::vector<double>& g) {
        const auto& y = t.val(self);
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < m; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
          for (std::size_t j = 0; j < n; ++j)
            ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
        }
      };
    }
    return emit({m, n}, std::move(out), {pa}, std::move(pull));
  }

  /// Mean over the batch of -log softmax(logits)[label]. Scalar output.
  Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<std::size_t>& labels) {
    const long pa = lift(logits);
    if (logits.rank() != 2) throw ShapeError("cross_entropy_with_logits: expected rank 2");
    const std::size_t b = logits.shape[0], k = logits.shape[1];
    if (labels.size() != b)
      throw ContractError("cross_entropy_with_logits: " + std::to_string(labels.size()) +
                          " labels for batch " + std::to_string(b));
    for (std::size_t label : labels)
      if (label >= k)
        throw IndexError("cross_entropy_with_logits: label " + std::to_string(label) +
                         " out of range for " + std::to_string(k) + " classes");
    auto probs = std::make_shared<std::vector<double>>(b * k);
    auto labels_copy = std::make_shared<std::vector<std::size_t>>(labels);
    const auto& lv = logits.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double* x = lv.data() + i * k;
      double mx = x[0];
      for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, x[j]);
      double sum = 0.0;
      for (std::size_t j = 0; j < k; ++j) sum += std::exp(x[j] - mx);
      const double lse = mx + std::log(sum);
      for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] = std::exp(x[j] - lse);
      loss += lse - x[labels[i]];
    }
    loss /= static_cast<double>(b);
    PullFn pull;
    if (needs(pa)) {
      pull = [pa, b, k, probs, labels_copy](Tape& t, long, const std::vector<double>& g) {
        const double c = g[0] / static_cast<double>(b);
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < k; ++j) ga[i * k + j] += c * (*probs)[i * k + j];
          ga[i * k + (*labels_copy)[i]] -= c;
        }
      };
    }
    return emit(Shape{}, std::vector<double>{loss}, {pa}, std::move(pull));
  }

  /// Same values under a new shape of equal element count.
  Tensor reshape(const Tensor& a, Shape shape) {
    const long pa = lift(a);
    if (numel(shape) != a.size())
      throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(shape));
    PullFn pull;
    if (needs(pa)) {
      pull = [pa](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      };
    }
    return emit(std::move(shape), std::vector<double>(a.values()), {pa}, std::move(pull));
  }

  /// Sum of all elements. Scalar output.
  Tensor sum(const Tensor& a) {
    const long pa = lift(a);
    double total = 0.0;
    for (double x : a.values()) total += x;
    PullFn pull;
    if (needs(pa)) {
      pull = [pa](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (double& x : ga) x += g[0];
      };
    }
    return emit(Shape{}, std::vector<double>{total}, {pa}, std::move(pull));
  }

  /// Gather rows of an embedding table; gradients scatter-add back.
  Tensor embed_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
    const long pa = lift(table);
    if (table.rank() != 2) throw ShapeError("embed_rows: table must be rank 2");
    const std::size_t v = table.shape[0], d = table.shape[1];
    for (std::size_t id : ids)
      if (id >= v)
        throw IndexError("embed_rows: id " + std::to_string(id) + " out of range for table of " +
                         std::to_string(v));
    std::vector<double> out(ids.size() * d);
    const auto& tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
    PullFn pull;
    if (needs(pa)) {
      auto ids_copy = std::make_shared<std::vector<std::size_t>>(ids);
      pull = [pa, d, ids_copy](Tape& t, long, const std::vector<double>& g) {
        auto& ga = t.gacc(pa);
        for (std::size_t i = 0; i < ids_copy->size(); ++i) {
          double* dst = ga.data() + (*ids_copy)[i] * d;
          const double* src = g.data() + i * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
      };
    }
    return emit({ids.size(), d}, std::move(out), {pa}, std::move(pull));
  }

  // ---- backward ------------------------------------------------------------

  /// Reverse sweep from a scalar loss. Populates gradient buffers for every
  /// trainable node the loss reaches; everything else reads as zeros.
  GradientMap backward(const Tensor& loss) {
    if (loss.tape_id != id_ || loss.node < 0)
      throw ContractError("backward: loss is not a node of this tape");
    if (loss.size() != 1) throw ContractError("backward: loss must be a scalar");
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node)] = {1.0};
    for (long id = loss.node; id >= 0; --id) {
      auto& node = nodes_[static_cast<std::size_t>(id)];
      if (!node.pull || grads_[static_cast<std::size_t>(id)].empty()) continue;
      node.pull(*this, id, grads_[static_cast<std::size_t>(id)]);
    }
    return GradientMap(this);
  }

  /// Gradient buffer of a tensor after backward(); zeros if unreached.
  const std::vector<double>& grad(const Tensor& t) {
    if (t.tape_id != id_ || t.node < 0)
      throw ContractError("grad: tensor is not a node of this tape");
    auto& buf = grads_.at(static_cast<std::size_t>(t.node));
    if (buf.empty()) buf.assign(t.size(), 0.0);
    return buf;
  }

 private:
  friend class GradientMap;
  using PullFn = std::function<void(Tape&, long, const std::vector<double>&)>;

  struct Node {
    Shape shape;
    std::shared_ptr<const std::vector<double>> value;
    bool requires_grad = false;
    PullFn pull;
  };

  enum class BinOp { Add, Sub, Mul };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static std::size_t prefix_product(const Shape& s, std::size_t axis) {
    std::size_t p = 1;
    for (std::size_t i = 0; i < axis; ++i) p *= s[i];
    return p;
  }
  static std::size_t suffix_product(const Shape& s, std::size_t from) {
    std::size_t p = 1;
    for (std::size_t i = from; i < s.size(); ++i) p *= s[i];
    return p;
  }
  static Shape drop_axis(const Shape& s, std::size_t axis) {
    Shape out;
    out.reserve(s.size() - 1);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis) out.push_back(s[i]);
    return out;
  }

  long lift(const Tensor& t) {
    if (!t.defined()) throw ContractError("op input is an undefined tensor");
    if (t.tape_id == id_) return t.node;
    if (t.tape_id != 0) throw ContractError("op input belongs to a different tape");
    Node node;
    node.shape = t.shape;
    node.value = t.data;
    nodes_.push_back(std::move(node));
    return static_cast<long>(nodes_.size() - 1);
  }

  bool needs(long id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  const std::vector<double>& val(long id) const {
    return *nodes_[static_cast<std::size_t>(id)].value;
  }

  std::vector<double>& gacc(long id) {
    auto& buf = grads_[static_cast<std::size_t>(id)];
    if (buf.empty()) buf.assign(numel(nodes_[static_cast<std::size_t>(id)].shape), 0.0);
    return buf;
  }

  /// Throwaway buffer for gradients nobody asked for.
  std::vector<double>& scratch(std::size_t n) {
    scratch_.assign(n, 0.0);
    return scratch_;
  }

  Tensor emit(Shape shape, std::shared_ptr<const std::vector<double>> data, bool requires_grad,
              std::vector<long> /*parents*/, PullFn pull) {
    Node node;
    node.shape = shape;
    node.value = data;
    node.requires_grad = requires_grad;
    node.pull = std::move(pull);
    nodes_.push_back(std::move(node));
    Tensor out;
    out.shape = std::move(shape);
    out.data = std::move(data);
    out.node = static_cast<long>(nodes_.size() - 1);
    out.tape_id = id_;
    return out;
  }

  Tensor emit(Shape shape, std::vector<double> values, std::vector<long> parents, PullFn pull) {
    bool rg = false;
    for (long pid : parents) rg = rg || needs(pid);
    if (!rg) pull = nullptr;
    return emit(std::move(shape), std::make_shared<const std::vector<double>>(std::move(values)),
                rg, std::move(parents), std::move(pull));
  }

  Tensor binary(const Tensor& a, const Tensor& b, BinOp op) {
    const long pa = lift(a), pb = lift(b);
    const bool same = a.shape == b.shape;
    const bool suffix = !same && is_strict_suffix(b.shape, a.shape);
    if (!same && !suffix)
      throw ShapeError(binop_name(op) + ": shapes " + shape_str(a.shape) + " and " +
                       shape_str(b.shape) +
                       " are neither identical nor leading-axis broadcastable");
    const std::size_t r = b.size();
    const std::size_t outer = a.size() / r;
    std::vector<double> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t o = 0; o < outer; ++o) {
      const double* ap = av.data() + o * r;
      double* op_ = out.data() + o * r;
      switch (op) {
        case BinOp::Add:
          for (std::size_t i = 0; i < r; ++i) op_[i] = ap[i] + bv[i];
          break;
        case BinOp::Sub:
          for (std::size_t i = 0; i < r; ++i) op_[i] = ap[i] - bv[i];
          break;
        case BinOp::Mul:
          for (std::size_t i = 0; i < r; ++i) op_[i] = ap[i] * bv[i];
          break;
      }
    }
    PullFn pull;
    if (needs(pa) || needs(pb)) {
      pull = [pa, pb, outer, r, op](Tape& t, long, const std::vector<double>& g) {
        switch (op) {
          case BinOp::Add: {
            if (t.needs(pa)) {
              auto& ga = t.gacc(pa);
              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.needs(pb)) {
              auto& gb = t.gacc(pb);
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < r; ++i) gb[i] += g[o * r + i];
            }
            break;
          }
          case BinOp::Sub: {
            if (t.needs(pa)) {
              auto& ga = t.gacc(pa);
              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.needs(pb)) {
              auto& gb = t.gacc(pb);
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < r; ++i) gb[i] -= g[o * r + i];
            }
            break;
          }
          case BinOp::Mul: {
            const auto& av2 = t.val(pa);
            const auto& bv2 = t.val(pb);
            if (t.needs(pa)) {
              auto& ga = t.gacc(pa);
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < r; ++i) ga[o * r + i] += g[o * r + i] * bv2[i];
            }
            if (t.needs(pb)) {
              auto& gb = t.gacc(pb);
              for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < r; ++i) gb[i] += g[o * r + i] * av2[o * r + i];
            }
            break;
          }
        }
      };
    }
    return emit(a.shape, std::move(out), {pa, pb}, std::move(pull));
  }

  static bool is_strict_suffix(const Shape& small, const Shape& big) {
    if (small.size() >= big.size()) return false;
    const std::size_t offset = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i)
      if (small[i] != big[offset + i]) return false;
    return true;
  }

  static std::string binop_name(BinOp op) {
    switch (op) {
      case BinOp::Add: return "add";
      case BinOp::Sub: return "sub";
      case BinOp::Mul: return "mul";
    }
    return "?";
  }

  static constexpr double kInvSqrt2 = 0.70710678118654752440;
  static constexpr double kInvSqrt2Pi = 0.39894228040143267794;

  std::uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::vector<double> scratch_;
};

inline const std::vector<double>& GradientMap::at(const Tensor& t) const { return tape_->grad(t); }

}  // namespace dcp
