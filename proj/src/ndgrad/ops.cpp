#include "rlqfs/ndgrad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "rlqfs/errors.hpp"
#include "rlqfs/kernels/kernels.hpp"

namespace rlqfs::nd {
namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

// Gradient buffer of a parent, or nullptr when it does not take gradients.
double* gbuf(const ImplPtr& p) { return p->tracked() ? p->ensure_grad().data() : nullptr; }

void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.rank() != r) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_finite(std::span<const double> xs, const char* op) {
  for (double v : xs) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

std::size_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.shape().back(); }

thread_local std::uint64_t g_score_count = 0;

template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [xi, df](TensorImpl& o) {
    double* gx = gbuf(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * df(xi->data[i], o.data[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(m, k, n, a.data().data(), b.data().data(), out.data());
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](TensorImpl& o) {
    if (double* ga = gbuf(ai)) kernels::gemm_nt(m, n, k, o.grad.data(), bi->data.data(), ga);
    if (double* gb = gbuf(bi)) kernels::gemm_tn(k, m, n, ai->data.data(), o.grad.data(), gb);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nt(m, k, n, a.data().data(), b.data().data(), out.data());
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result({m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](TensorImpl& o) {
    if (double* ga = gbuf(ai)) kernels::gemm_nn(m, n, k, o.grad.data(), bi->data.data(), ga);
    if (double* gb = gbuf(bi)) kernels::gemm_tn(n, m, k, o.grad.data(), ai->data.data(), gb);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  kernels::active().axpy(1.0, b.data().data(), out.data(), out.size());
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& o) {
    const auto& t = kernels::active();
    if (double* ga = gbuf(ai)) t.axpy(1.0, o.grad.data(), ga, o.grad.size());
    if (double* gb = gbuf(bi)) t.axpy(1.0, o.grad.data(), gb, o.grad.size());
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  kernels::active().axpy(-1.0, b.data().data(), out.data(), out.size());
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& o) {
    const auto& t = kernels::active();
    if (double* ga = gbuf(ai)) t.axpy(1.0, o.grad.data(), ga, o.grad.size());
    if (double* gb = gbuf(bi)) t.axpy(-1.0, o.grad.data(), gb, o.grad.size());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  kernels::active().mul(a.data().data(), b.data().data(), out.data(), out.size());
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(out), {a, b}, [ai, bi](TensorImpl& o) {
    const std::size_t n = o.grad.size();
    if (double* ga = gbuf(ai)) {
      for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i] * bi->data[i];
    }
    if (double* gb = gbuf(bi)) {
      for (std::size_t i = 0; i < n; ++i) gb[i] += o.grad[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size(), 0.0);
  kernels::active().axpy(c, a.data().data(), out.data(), out.size());
  ImplPtr ai = a.impl();
  return make_result(a.shape(), std::move(out), {a}, [ai, c](TensorImpl& o) {
    if (double* ga = gbuf(ai)) kernels::active().axpy(c, o.grad.data(), ga, o.grad.size());
  });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  require_rank(b, 1, "add_bias");
  if (x.rank() < 1 || x.rank() > 2 || last_dim(x) != b.dim(0)) {
    throw DimensionError("add_bias: cannot add " + shape_str(b.shape()) + " to " +
                         shape_str(x.shape()));
  }
  const std::size_t d = b.dim(0);
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto& t = kernels::active();
  for (std::size_t r = 0; r < rows; ++r) t.axpy(1.0, b.data().data(), out.data() + r * d, d);
  ImplPtr xi = x.impl(), bi = b.impl();
  return make_result(x.shape(), std::move(out), {x, b}, [xi, bi, rows, d](TensorImpl& o) {
    const auto& kt = kernels::active();
    if (double* gx = gbuf(xi)) kt.axpy(1.0, o.grad.data(), gx, o.grad.size());
    if (double* gb = gbuf(bi)) {
      for (std::size_t r = 0; r < rows; ++r) kt.axpy(1.0, o.grad.data() + r * d, gb, d);
    }
  });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v))); },
      [](double v, double) {
        const double th = std::tanh(c * (v + k * v * v * v));
        return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * c * (1.0 + 3.0 * k * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (x.rank() == 0 || axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  require_finite(x.data(), "softmax");
  std::size_t outer = 1, len = x.dim(axis), inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xs[base + j * inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double e = std::exp(xs[base + j * inner] - mx);
        out[base + j * inner] = e;
        s += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= s;
    }
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [xi, outer, len, inner](TensorImpl& o) {
    double* gx = gbuf(xi);
    if (!gx) return;
    for (std::size_t a = 0; a < outer; ++a) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = a * len * inner + in;
        double dotp = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          dotp += o.grad[base + j * inner] * o.data[base + j * inner];
        }
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          gx[idx] += o.data[idx] * (o.grad[idx] - dotp);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("log_softmax: scalar input");
  require_finite(x.data(), "log_softmax");
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * len;
    const double mx = *std::max_element(row, row + len);
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = row[j] - lse;
  }
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [xi, rows, len](TensorImpl& o) {
    double* gx = gbuf(xi);
    if (!gx) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < len; ++j) gs += o.grad[r * len + j];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t idx = r * len + j;
        gx[idx] += o.grad[idx] - std::exp(o.data[idx]) * gs;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(gamma, 1, "layer_norm");
  require_same_shape(gamma, beta, "layer_norm");
  if (x.rank() < 1 || x.rank() > 2 || last_dim(x) != gamma.dim(0)) {
    throw DimensionError("layer_norm: normalized dim mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(gamma.shape()));
  }
  const std::size_t d = gamma.dim(0);
  const std::size_t rows = x.size() / d;
  const auto xs = x.data();
  const auto g = gamma.data();
  const auto b = beta.data();
  std::vector<double> out(xs.size());
  std::vector<double> xhat(xs.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xs.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * g[j] + b[j];
    }
  }
  ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [xi, gi, bi, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorImpl& o) {
        double* gx = gbuf(xi);
        double* gg = gbuf(gi);
        double* gb = gbuf(bi);
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = o.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[j] * h[j];
          }
          if (gb) {
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[j];
          }
          if (gx) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              dxhat[j] = dy[j] * gi->data[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * h[j];
            }
            m1 /= static_cast<double>(d);
            m2 /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              gx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - h[j] * m2);
            }
          }
        }
      });
}

Tensor embedding(const Tensor& table, std::span<const TokenId> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  std::vector<TokenId> idv(ids.begin(), ids.end());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= v) {
      throw IndexError("embedding: id " + std::to_string(ids[t]) + " outside vocabulary of " +
                       std::to_string(v));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
  }
  ImplPtr ti = table.impl();
  return make_result({ids.size(), d}, std::move(out), {table},
                     [ti, d, idv = std::move(idv)](TensorImpl& o) {
                       double* gt = gbuf(ti);
                       if (!gt) return;
                       const auto& kt = kernels::active();
                       for (std::size_t t = 0; t < idv.size(); ++t) {
                         kt.axpy(1.0, o.grad.data() + t * d,
                                 gt + static_cast<std::size_t>(idv[t]) * d, d);
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool train) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw ContractError("dropout: p must be < 1");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = rng.bernoulli(p) ? 0.0 : keep_scale;
  std::vector<double> out(x.size());
  kernels::active().mul(x.data().data(), mask.data(), out.data(), out.size());
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [xi, mask = std::move(mask)](TensorImpl& o) {
    double* gx = gbuf(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += o.grad[i] * mask[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const std::size_t r = parts.front().rank();
  for (const auto& p : parts) {
    if (p.rank() != r) throw DimensionError("concat: mixed ranks");
  }
  if (r <= 1) {
    std::vector<double> out;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
      offsets.push_back(out.size());
      out.insert(out.end(), p.data().begin(), p.data().end());
    }
    const std::size_t n = out.size();
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_result({n}, std::move(out), parts, [impls, offsets](TensorImpl& o) {
      for (std::size_t i = 0; i < impls.size(); ++i) {
        if (double* g = gbuf(impls[i])) {
          for (std::size_t j = 0; j < impls[i]->data.size(); ++j) g[j] += o.grad[offsets[i] + j];
        }
      }
    });
  }
  require_rank(parts.front(), 2, "concat");
  if (axis > 1) throw DimensionError("concat: axis must be 0 or 1");
  const std::size_t fixed = parts.front().dim(1 - axis);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(1 - axis) != fixed) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " does not fit alongside " +
                           shape_str(parts.front().shape()));
    }
    total += p.dim(axis);
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  if (axis == 0) {
    std::vector<double> out;
    out.reserve(total * fixed);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_result({total, fixed}, std::move(out), parts, [impls](TensorImpl& o) {
      std::size_t off = 0;
      for (const auto& im : impls) {
        const std::size_t n = im->data.size();
        if (double* g = gbuf(im)) kernels::active().axpy(1.0, o.grad.data() + off, g, n);
        off += n;
      }
    });
  }
  const std::size_t rows = fixed;
  std::vector<double> out(rows * total);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(p.data().data() + i * c, c, out.data() + i * total + col);
    }
    col += c;
  }
  return make_result({rows, total}, std::move(out), parts, [impls, rows, total](TensorImpl& o) {
    std::size_t c0 = 0;
    for (const auto& im : impls) {
      const std::size_t c = im->shape[1];
      if (double* g = gbuf(im)) {
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * total + c0 + j];
        }
      }
      c0 += c;
    }
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.rank() < 1 || x.rank() > 2 || begin > end || end > x.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t w = x.rank() == 2 ? x.dim(1) : 1;
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * w),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end * w));
  ImplPtr xi = x.impl();
  const std::size_t off = begin * w;
  return make_result(std::move(shape), std::move(out), {x}, [xi, off](TensorImpl& o) {
    if (double* g = gbuf(xi)) kernels::active().axpy(1.0, o.grad.data(), g + off, o.grad.size());
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  ImplPtr xi = x.impl();
  return make_result(std::move(shape), std::move(out), {x}, [xi](TensorImpl& o) {
    if (double* g = gbuf(xi)) kernels::active().axpy(1.0, o.grad.data(), g, o.grad.size());
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  ImplPtr xi = x.impl();
  return make_result({}, {s}, {x}, [xi](TensorImpl& o) {
    double* g = gbuf(xi);
    if (!g) return;
    for (std::size_t i = 0; i < xi->data.size(); ++i) g[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "dot");
  if (b.rank() != 1 || b.dim(0) != a.dim(0)) {
    throw DimensionError("dot: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const double s = kernels::dot(a.data(), b.data());
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result({}, {s}, {a, b}, [ai, bi](TensorImpl& o) {
    const auto& kt = kernels::active();
    if (double* ga = gbuf(ai)) kt.axpy(o.grad[0], bi->data.data(), ga, bi->data.size());
    if (double* gb = gbuf(bi)) kt.axpy(o.grad[0], ai->data.data(), gb, ai->data.size());
  });
}

Tensor pick(const Tensor& x, std::span<const TokenId> idx) {
  require_rank(x, 2, "pick");
  const std::size_t t = x.dim(0), v = x.dim(1);
  if (idx.size() != t) {
    throw DimensionError("pick: " + std::to_string(idx.size()) + " indices for " + shape_str(x.shape()));
  }
  std::vector<double> out(t);
  std::vector<TokenId> iv(idx.begin(), idx.end());
  for (std::size_t i = 0; i < t; ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) {
      throw IndexError("pick: index " + std::to_string(idx[i]) + " out of range " + std::to_string(v));
    }
    out[i] = x.data()[i * v + static_cast<std::size_t>(idx[i])];
  }
  ImplPtr xi = x.impl();
  return make_result({t}, std::move(out), {x}, [xi, v, iv = std::move(iv)](TensorImpl& o) {
    double* g = gbuf(xi);
    if (!g) return;
    for (std::size_t i = 0; i < iv.size(); ++i) g[i * v + static_cast<std::size_t>(iv[i])] += o.grad[i];
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_index) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t t = logits.dim(0), v = logits.dim(1);
  if (targets.size() != t) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  require_finite(logits.data(), "cross_entropy");
  std::vector<TokenId> tv(targets.begin(), targets.end());
  std::size_t count = 0;
  for (auto id : tv) {
    if (id == ignore_index) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw IndexError("cross_entropy: target " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(v));
    }
    ++count;
  }
  const auto xs = logits.data();
  std::vector<double> probs(t * v, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (tv[i] == ignore_index) continue;
    const double* row = xs.data() + i * v;
    const double mx = *std::max_element(row, row + v);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(row[j] - mx);
      s += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= s;
    total -= row[static_cast<std::size_t>(tv[i])] - mx - std::log(s);
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  ImplPtr li = logits.impl();
  return make_result({}, {total / denom}, {logits},
                     [li, t, v, denom, ignore_index, tv = std::move(tv),
                      probs = std::move(probs)](TensorImpl& o) {
                       double* g = gbuf(li);
                       if (!g) return;
                       const double s = o.grad[0] / denom;
                       for (std::size_t i = 0; i < t; ++i) {
                         if (tv[i] == ignore_index) continue;
                         for (std::size_t j = 0; j < v; ++j) g[i * v + j] += s * probs[i * v + j];
                         g[i * v + static_cast<std::size_t>(tv[i])] -= s;
                       }
                     });
}

Tensor bce_with_logits(const Tensor& s, double y) {
  if (s.size() != 1) throw DimensionError("bce_with_logits: expects a scalar logit");
  const double x = s.data()[0];
  if (!std::isfinite(x)) throw NumericError("bce_with_logits: non-finite logit");
  const double loss = std::max(x, 0.0) - y * x + std::log1p(std::exp(-std::abs(x)));
  const double p = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  ImplPtr si = s.impl();
  return make_result({}, {loss}, {s}, [si, p, y](TensorImpl& o) {
    if (double* g = gbuf(si)) g[0] += o.grad[0] * (p - y);
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                 const AttentionMask& mask) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_same_shape(k, v, "attention");
  const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
  }
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: heads do not divide width");
  if (!mask.key_valid.empty() && mask.key_valid.size() != tk) {
    throw DimensionError("attention: key mask length " + std::to_string(mask.key_valid.size()) +
                         " vs " + std::to_string(tk) + " keys");
  }
  const std::size_t dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto& kt = kernels::active();
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();

  auto admissible = [&](std::size_t i, std::size_t j) {
    if (mask.causal && j > i) return false;
    return mask.key_valid.empty() || mask.key_valid[j] != 0;
  };

  std::vector<double> probs(n_heads * tq * tk, 0.0);
  std::vector<double> out(tq * d, 0.0);
  std::uint64_t evaluated = 0;
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      double* p = probs.data() + (h * tq + i) * tk;
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!admissible(i, j)) continue;
        p[j] = kt.dot(qd + i * d + c0, kd + j * d + c0, dh) * inv_sqrt;
        mx = any ? std::max(mx, p[j]) : p[j];
        any = true;
        ++evaluated;
      }
      if (!any) continue;
      double s = 0.0;
      for (std::size_t j = 0; j < tk; ++j) {
        if (!admissible(i, j)) {
          p[j] = 0.0;
          continue;
        }
        p[j] = std::exp(p[j] - mx);
        s += p[j];
      }
      for (std::size_t j = 0; j < tk; ++j) {
        p[j] /= s;
        if (p[j] != 0.0) kt.axpy(p[j], vd + j * d + c0, out.data() + i * d + c0, dh);
      }
    }
  }
  g_score_count += evaluated;

  ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl();
  return make_result(
      {tq, d}, std::move(out), {q, k, v},
      [qi, ki, vi, n_heads, tq, tk, d, dh, inv_sqrt, probs = std::move(probs)](TensorImpl& o) {
        double* gq = gbuf(qi);
        double* gk = gbuf(ki);
        double* gv = gbuf(vi);
        const auto& kt2 = kernels::active();
        std::vector<double> dp(tk);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < tq; ++i) {
            const double* p = probs.data() + (h * tq + i) * tk;
            const double* go = o.grad.data() + i * d + c0;
            double pdp = 0.0;
            for (std::size_t j = 0; j < tk; ++j) {
              if (p[j] == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              dp[j] = kt2.dot(go, vi->data.data() + j * d + c0, dh);
              pdp += p[j] * dp[j];
              if (gv) kt2.axpy(p[j], go, gv + j * d + c0, dh);
            }
            for (std::size_t j = 0; j < tk; ++j) {
              if (p[j] == 0.0) continue;
              const double ds = p[j] * (dp[j] - pdp) * inv_sqrt;
              if (gq) kt2.axpy(ds, ki->data.data() + j * d + c0, gq + i * d + c0, dh);
              if (gk) kt2.axpy(ds, qi->data.data() + i * d + c0, gk + j * d + c0, dh);
            }
          }
        }
      });
}

std::uint64_t attention_score_count() { return g_score_count; }
void reset_attention_score_count() { g_score_count = 0; }

}  // namespace rlqfs::nd
