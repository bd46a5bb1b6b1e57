#include "lift/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Core>
#include <spdlog/spdlog.h>

namespace lift {

namespace {

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// Register-tiled block of R rows by W columns. Each output element is summed
// in increasing p order starting from its current value, exactly as the plain
// i-k-j loop would, so results do not depend on tiling or on the row count.
template <typename T, std::size_t R, std::size_t W>
inline void gemm_tile(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t k, std::size_t n,
                      std::size_t lda) {
  T acc[R][W];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < W; ++j) acc[r][j] = c[r * n + j];
  for (std::size_t p = 0; p < k; ++p) {
    const T* __restrict brow = b + p * n;
    for (std::size_t r = 0; r < R; ++r) {
      const T av = a[r * lda + p];
      for (std::size_t j = 0; j < W; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < W; ++j) c[r * n + j] = acc[r][j];
}

template <typename T>
void gemm_rows(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t rows, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* __restrict crow = c + i * n;
    const T* __restrict arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x n] += a[m x k] * b[k x n], all row-major.
template <typename T>
void gemm_accumulate(const T* __restrict a, const T* __restrict b, T* __restrict c, std::size_t m,
                     std::size_t k, std::size_t n) {
  constexpr std::size_t R = 4;
  constexpr std::size_t W = 64 / sizeof(T) * 2;
  const std::size_t full_cols = n / W * W;
  std::size_t i = 0;
  for (; i + R <= m; i += R) {
    for (std::size_t j = 0; j < full_cols; j += W) gemm_tile<T, R, W>(a + i * k, b + j, c + i * n + j, k, n, k);
  }
  if (full_cols < n) {
    // Column remainder for the tiled rows, then every remaining row.
    for (std::size_t r = 0; r < i; ++r) {
      T* __restrict crow = c + r * n;
      const T* __restrict arow = a + r * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = full_cols; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  gemm_rows(a + i * k, b, c + i * n, m - i, k, n);
}

// In-place tanh; the float path uses Eigen's vectorized approximation.
inline void vector_tanh(float* x, std::size_t n) {
  Eigen::Map<Eigen::ArrayXf> a(x, static_cast<Eigen::Index>(n));
  a = a.tanh();
}
inline void vector_tanh(double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = std::tanh(x[i]);
}

template <typename T>
BasicTensor<T> elementwise(const BasicTensor<T>& a, const BasicTensor<T>& b, auto fn) {
  BasicTensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fn(x[i], y[i]);
  return out;
}

}  // namespace

template <typename T>
BasicTensor<T> matmul_values(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (b.rank() != 2) {
    throw DimensionError("matmul expects a 2-D right operand, got " + shape_string(b.shape()));
  }
  if (a.cols() != b.dim(0)) {
    throw DimensionError("matmul inner extents disagree: " + shape_string(a.shape()) + " . " +
                         shape_string(b.shape()));
  }
  BasicTensor<T> out(Shape{a.rows(), b.dim(1)});
  gemm_accumulate(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.dim(1));
  return out;
}

template <typename T>
BasicTensor<T> transpose_values(const BasicTensor<T>& a) {
  const std::size_t r = a.rows();
  const std::size_t c = a.cols();
  BasicTensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = a.at(i, j);
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_rows_values(const BasicTensor<T>& x) {
  BasicTensor<T> out(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    T mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  return out;
}

template <typename T>
T gelu_scalar(T x) {
  constexpr T kA = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kB = static_cast<T>(0.044715);
  return static_cast<T>(0.5) * x * (T{1} + std::tanh(kA * (x + kB * x * x * x)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  constexpr T kA = static_cast<T>(0.7978845608028654);
  constexpr T kB = static_cast<T>(0.044715);
  const T th = std::tanh(kA * (x + kB * x * x * x));
  return static_cast<T>(0.5) * (T{1} + th) +
         static_cast<T>(0.5) * x * (T{1} - th * th) * kA * (T{1} + T{3} * kB * x * x);
}

template <typename T>
Var matmul(Tape<T>& tape, Var a, Var b) {
  auto out = matmul_values(tape.value(a), tape.value(b));
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    const auto& av = t.value(a);
    const auto& bv = t.value(b);
    if (auto* ga = t.grad_buffer(a)) {
      const auto bt = transpose_values(bv);
      gemm_accumulate(g.data().data(), bt.data().data(), ga->data().data(), g.rows(), g.cols(), bt.cols());
    }
    if (auto* gb = t.grad_buffer(b)) {
      const auto at = transpose_values(av);
      gemm_accumulate(at.data().data(), g.data().data(), gb->data().data(), at.dim(0), at.dim(1), g.dim(1));
    }
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape.value(a), tape.value(b), "add");
  auto out = elementwise(tape.value(a), tape.value(b), [](T x, T y) { return x + y; });
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var sub(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape.value(a), tape.value(b), "sub");
  auto out = elementwise(tape.value(a), tape.value(b), [](T x, T y) { return x - y; });
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(a, g);
    if (auto* gb = t.grad_buffer(b)) {
      auto d = gb->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

template <typename T>
Var mul(Tape<T>& tape, Var a, Var b) {
  require_same_shape(tape.value(a), tape.value(b), "mul");
  auto out = elementwise(tape.value(a), tape.value(b), [](T x, T y) { return x * y; });
  return tape.record(std::move(out), {a, b}, [a, b](Tape<T>& t, const BasicTensor<T>& g) {
    if (auto* ga = t.grad_buffer(a)) {
      const auto& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = t.grad_buffer(b)) {
      const auto& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var x, T factor) {
  BasicTensor<T> out = tape.value(x);
  for (auto& v : out.data()) v *= factor;
  return tape.record(std::move(out), {x}, [x, factor](Tape<T>& t, const BasicTensor<T>& g) {
    if (auto* gx = t.grad_buffer(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factor;
    }
  });
}

template <typename T>
Var add_bias(Tape<T>& tape, Var x, Var bias) {
  const auto& xv = tape.value(x);
  const auto& bv = tape.value(bias);
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias of " + std::to_string(bv.size()) + " values for last extent " +
                         std::to_string(xv.cols()));
  }
  BasicTensor<T> out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t j = 0; j < n; ++j) o[j] += bv[j];
  }
  return tape.record(std::move(out), {x, bias}, [x, bias, n](Tape<T>& t, const BasicTensor<T>& g) {
    t.accumulate(x, g);
    if (auto* gb = t.grad_buffer(bias)) {
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto gr = g.row(r);
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += gr[j];
      }
    }
  });
}

template <typename T>
Var layer_norm(Tape<T>& tape, Var x, Var gain, Var bias, T eps) {
  const auto& xv = tape.value(x);
  const std::size_t d = xv.cols();
  if (d == 0) throw DimensionError("layer_norm: last extent is 0");
  if (tape.value(gain).size() != d || tape.value(bias).size() != d) {
    throw DimensionError("layer_norm: gain/bias length must equal last extent " + std::to_string(d));
  }
  const auto& gv = tape.value(gain);
  const auto& bv = tape.value(bias);
  const std::size_t rows = xv.rows();
  BasicTensor<T> normalized(xv.shape());
  std::vector<T> rstd(rows);
  BasicTensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = xv.row(r);
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<T>(d);
    rstd[r] = T{1} / std::sqrt(var + eps);
    auto nh = normalized.row(r);
    auto o = out.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      nh[j] = (in[j] - mean) * rstd[r];
      o[j] = nh[j] * gv[j] + bv[j];
    }
  }
  return tape.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, d, normalized = std::move(normalized), rstd = std::move(rstd)](Tape<T>& t,
                                                                                    const BasicTensor<T>& g) {
        const auto& gv = t.value(gain);
        auto* gx = t.grad_buffer(x);
        auto* gg = t.grad_buffer(gain);
        auto* gb = t.grad_buffer(bias);
        std::vector<T> dn(d);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          auto gr = g.row(r);
          auto nh = normalized.row(r);
          if (gg) {
            for (std::size_t j = 0; j < d; ++j) (*gg)[j] += gr[j] * nh[j];
          }
          if (gb) {
            for (std::size_t j = 0; j < d; ++j) (*gb)[j] += gr[j];
          }
          if (gx) {
            T mean_dn = 0;
            T mean_dn_n = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dn[j] = gr[j] * gv[j];
              mean_dn += dn[j];
              mean_dn_n += dn[j] * nh[j];
            }
            mean_dn /= static_cast<T>(d);
            mean_dn_n /= static_cast<T>(d);
            auto gxr = gx->row(r);
            for (std::size_t j = 0; j < d; ++j) gxr[j] += rstd[r] * (dn[j] - mean_dn - nh[j] * mean_dn_n);
          }
        }
      });
}

template <typename T>
Var gelu(Tape<T>& tape, Var x) {
  constexpr T kA = static_cast<T>(0.7978845608028654);
  constexpr T kB = static_cast<T>(0.044715);
  const auto& xv = tape.value(x);
  const std::size_t n = xv.size();
  std::vector<T> th(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T u = xv[i];
    th[i] = kA * (u + kB * u * u * u);
  }
  vector_tanh(th.data(), n);
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(0.5) * xv[i] * (T{1} + th[i]);
  return tape.record(std::move(out), {x}, [x, th = std::move(th)](Tape<T>& t, const BasicTensor<T>& g) {
    if (auto* gx = t.grad_buffer(x)) {
      const auto& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T u = xv[i];
        const T d = static_cast<T>(0.5) * (T{1} + th[i]) +
                    static_cast<T>(0.5) * u * (T{1} - th[i] * th[i]) * kA * (T{1} + T{3} * kB * u * u);
        (*gx)[i] += g[i] * d;
      }
    }
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  BasicTensor<T> out = tape.value(x);
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
    if (auto* gx = t.grad_buffer(x)) {
      const auto& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > T{0}) (*gx)[i] += g[i];
      }
    }
  });
}

template <typename T>
Var softmax_rows(Tape<T>& tape, Var x) {
  auto out = softmax_rows_values(tape.value(x));
  BasicTensor<T> probs = out;
  return tape.record(std::move(out), {x}, [x, probs = std::move(probs)](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    const std::size_t n = probs.cols();
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      auto pr = probs.row(r);
      auto gr = g.row(r);
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * pr[j];
      auto gxr = gx->row(r);
      for (std::size_t j = 0; j < n; ++j) gxr[j] += pr[j] * (gr[j] - dot);
    }
  });
}

template <typename T>
Var abs(Tape<T>& tape, Var x) {
  BasicTensor<T> out = tape.value(x);
  for (auto& v : out.data()) v = std::abs(v);
  return tape.record(std::move(out), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
    if (auto* gx = t.grad_buffer(x)) {
      const auto& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > T{0}) (*gx)[i] += g[i];
        else if (xv[i] < T{0}) (*gx)[i] -= g[i];
      }
    }
  });
}

template <typename T>
Var concat_rows(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.cols() != bv.cols()) {
    throw DimensionError("concat_rows: column mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  std::vector<T> data(av.data().begin(), av.data().end());
  data.insert(data.end(), bv.data().begin(), bv.data().end());
  const std::size_t split = av.size();
  BasicTensor<T> out(Shape{av.rows() + bv.rows(), av.cols()}, std::move(data));
  return tape.record(std::move(out), {a, b}, [a, b, split](Tape<T>& t, const BasicTensor<T>& g) {
    if (auto* ga = t.grad_buffer(a)) {
      for (std::size_t i = 0; i < split; ++i) (*ga)[i] += g[i];
    }
    if (auto* gb = t.grad_buffer(b)) {
      for (std::size_t i = split; i < g.size(); ++i) (*gb)[i - split] += g[i];
    }
  });
}

template <typename T>
Var concat_cols(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  if (av.rows() != bv.rows()) {
    throw DimensionError("concat_cols: row mismatch " + shape_string(av.shape()) + " vs " +
                         shape_string(bv.shape()));
  }
  const std::size_t p = av.cols();
  const std::size_t q = bv.cols();
  BasicTensor<T> out(Shape{av.rows(), p + q});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto o = out.row(r);
    std::copy(av.row(r).begin(), av.row(r).end(), o.begin());
    std::copy(bv.row(r).begin(), bv.row(r).end(), o.begin() + static_cast<std::ptrdiff_t>(p));
  }
  return tape.record(std::move(out), {a, b}, [a, b, p, q](Tape<T>& t, const BasicTensor<T>& g) {
    auto* ga = t.grad_buffer(a);
    auto* gb = t.grad_buffer(b);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      if (ga) {
        for (std::size_t j = 0; j < p; ++j) ga->at(r, j) += gr[j];
      }
      if (gb) {
        for (std::size_t j = 0; j < q; ++j) gb->at(r, j) += gr[p + j];
      }
    }
  });
}

template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::size_t> rows) {
  const auto& xv = tape.value(x);
  const std::size_t n = xv.cols();
  BasicTensor<T> out(Shape{rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                           shape_string(xv.shape()));
    }
    std::copy(xv.row(rows[i]).begin(), xv.row(rows[i]).end(), out.row(i).begin());
  }
  return tape.record(std::move(out), {x}, [x, n, rows = std::move(rows)](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gx = t.grad_buffer(x);
    if (!gx) return;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto dst = gx->row(rows[i]);
      auto src = g.row(i);
      for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var sum(Tape<T>& tape, Var x) {
  T total = 0;
  for (const T v : tape.value(x).data()) total += v;
  return tape.record(BasicTensor<T>::scalar(total), {x}, [x](Tape<T>& t, const BasicTensor<T>& g) {
    if (auto* gx = t.grad_buffer(x)) {
      for (auto& v : gx->data()) v += g[0];
    }
  });
}

template <typename T>
Var squared_error(Tape<T>& tape, Var prediction, Var target) {
  const auto& p = tape.value(prediction);
  const auto& y = tape.value(target);
  require_same_shape(p, y, "squared_error");
  T total = 0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] - y[i]) * (p[i] - y[i]);
  return tape.record(BasicTensor<T>::scalar(total), {prediction, target},
                     [prediction, target](Tape<T>& t, const BasicTensor<T>& g) {
                       const auto& pv = t.value(prediction);
                       const auto& yv = t.value(target);
                       auto* gp = t.grad_buffer(prediction);
                       auto* gy = t.grad_buffer(target);
                       for (std::size_t i = 0; i < pv.size(); ++i) {
                         const T d = T{2} * (pv[i] - yv[i]) * g[0];
                         if (gp) (*gp)[i] += d;
                         if (gy) (*gy)[i] -= d;
                       }
                     });
}

template <typename T>
Var row_cosine(Tape<T>& tape, Var a, Var b) {
  const auto& av = tape.value(a);
  const auto& bv = tape.value(b);
  require_same_shape(av, bv, "row_cosine");
  const std::size_t rows = av.rows();
  const std::size_t n = av.cols();
  BasicTensor<T> out(Shape{rows});
  std::vector<T> na(rows), nb(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T dot = 0, aa = 0, bb = 0;
    auto x = av.row(r);
    auto y = bv.row(r);
    for (std::size_t j = 0; j < n; ++j) {
      dot += x[j] * y[j];
      aa += x[j] * x[j];
      bb += y[j] * y[j];
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    if (na[r] == T{0} || nb[r] == T{0}) {
      spdlog::warn("row_cosine: zero-norm vector in row {}, similarity set to 0", r);
      out[r] = 0;
    } else {
      out[r] = dot / (na[r] * nb[r]);
    }
  }
  return tape.record(std::move(out), {a, b},
                     [a, b, n, na = std::move(na), nb = std::move(nb)](Tape<T>& t, const BasicTensor<T>& g) {
                       const auto& av = t.value(a);
                       const auto& bv = t.value(b);
                       auto* ga = t.grad_buffer(a);
                       auto* gb = t.grad_buffer(b);
                       for (std::size_t r = 0; r < na.size(); ++r) {
                         if (na[r] == T{0} || nb[r] == T{0}) continue;
                         auto x = av.row(r);
                         auto y = bv.row(r);
                         T dot = 0;
                         for (std::size_t j = 0; j < n; ++j) dot += x[j] * y[j];
                         const T inv = T{1} / (na[r] * nb[r]);
                         const T cos = dot * inv;
                         for (std::size_t j = 0; j < n; ++j) {
                           if (ga) ga->at(r, j) += g[r] * (y[j] * inv - cos * x[j] / (na[r] * na[r]));
                           if (gb) gb->at(r, j) += g[r] * (x[j] * inv - cos * y[j] / (nb[r] * nb[r]));
                         }
                       }
                     });
}

// Per-head views copied into contiguous [seq x hd] blocks so the small
// products run through the same kernel as everything else.
template <typename T>
void gather_head(const BasicTensor<T>& x, std::size_t row0, std::size_t seq, std::size_t c0, std::size_t hd,
                 T* out) {
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < seq; ++i) {
    const T* src = x.data().data() + (row0 + i) * d + c0;
    std::copy(src, src + hd, out + i * hd);
  }
}

template <typename T>
void scatter_head_add(BasicTensor<T>& x, std::size_t row0, std::size_t seq, std::size_t c0, std::size_t hd,
                      const T* in) {
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < seq; ++i) {
    T* dst = x.data().data() + (row0 + i) * d + c0;
    for (std::size_t c = 0; c < hd; ++c) dst[c] += in[i * hd + c];
  }
}

template <typename T>
void transpose_into(const T* in, std::size_t rows, std::size_t cols, T* out) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = in[i * cols + j];
}

template <typename T>
Var scaled_dot_attention(Tape<T>& tape, Var q, Var k, Var v, std::size_t batch, std::size_t heads) {
  const auto& qv = tape.value(q);
  const auto& kv = tape.value(k);
  const auto& vv = tape.value(v);
  require_same_shape(qv, kv, "attention");
  require_same_shape(qv, vv, "attention");
  const std::size_t d = qv.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (batch == 0 || qv.rows() % batch != 0) {
    throw DimensionError("attention: " + std::to_string(qv.rows()) + " rows do not split into " +
                         std::to_string(batch) + " equal blocks");
  }
  const std::size_t seq = qv.rows() / batch;
  const std::size_t hd = d / heads;
  const T sc = T{1} / std::sqrt(static_cast<T>(hd));

  BasicTensor<T> out(qv.shape());
  // probs[(b * heads + h) * seq * seq + i * seq + j]
  std::vector<T> probs(batch * heads * seq * seq);
  std::vector<T> qh(seq * hd), kh(seq * hd), kt(hd * seq), vh(seq * hd), oh(seq * hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs.data() + (b * heads + h) * seq * seq;
      const std::size_t c0 = h * hd;
      gather_head(qv, b * seq, seq, c0, hd, qh.data());
      gather_head(kv, b * seq, seq, c0, hd, kh.data());
      gather_head(vv, b * seq, seq, c0, hd, vh.data());
      transpose_into(kh.data(), seq, hd, kt.data());
      gemm_accumulate(qh.data(), kt.data(), p, seq, hd, seq);
      for (std::size_t i = 0; i < seq; ++i) {
        T* pi = p + i * seq;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          pi[j] *= sc;
          mx = std::max(mx, pi[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < seq; ++j) {
          pi[j] = std::exp(pi[j] - mx);
          total += pi[j];
        }
        for (std::size_t j = 0; j < seq; ++j) pi[j] /= total;
      }
      std::fill(oh.begin(), oh.end(), T{0});
      gemm_accumulate(p, vh.data(), oh.data(), seq, seq, hd);
      scatter_head_add(out, b * seq, seq, c0, hd, oh.data());
    }
  }
  return tape.record(
      std::move(out), {q, k, v},
      [q, k, v, batch, heads, seq, hd, sc, probs = std::move(probs)](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& qv = t.value(q);
        const auto& kv = t.value(k);
        const auto& vv = t.value(v);
        auto* gq = t.grad_buffer(q);
        auto* gk = t.grad_buffer(k);
        auto* gv = t.grad_buffer(v);
        std::vector<T> gh(seq * hd), qh(seq * hd), kh(seq * hd), vt(hd * seq), pt(seq * seq), dp(seq * seq),
            dst(seq * seq), acc(seq * hd);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs.data() + (b * heads + h) * seq * seq;
            const std::size_t c0 = h * hd;
            gather_head(g, b * seq, seq, c0, hd, gh.data());
            if (gv) {
              transpose_into(p, seq, seq, pt.data());
              std::fill(acc.begin(), acc.end(), T{0});
              gemm_accumulate(pt.data(), gh.data(), acc.data(), seq, seq, hd);
              scatter_head_add(*gv, b * seq, seq, c0, hd, acc.data());
            }
            if (!gq && !gk) continue;
            // dP = G V^T ; dS = P * (dP - rowsum(P * dP)) * scale
            gather_head(vv, b * seq, seq, c0, hd, kh.data());
            transpose_into(kh.data(), seq, hd, vt.data());
            std::fill(dp.begin(), dp.end(), T{0});
            gemm_accumulate(gh.data(), vt.data(), dp.data(), seq, hd, seq);
            for (std::size_t i = 0; i < seq; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < seq; ++j) dot += dp[i * seq + j] * p[i * seq + j];
              for (std::size_t j = 0; j < seq; ++j) dp[i * seq + j] = p[i * seq + j] * (dp[i * seq + j] - dot) * sc;
            }
            if (gq) {
              gather_head(kv, b * seq, seq, c0, hd, kh.data());
              std::fill(acc.begin(), acc.end(), T{0});
              gemm_accumulate(dp.data(), kh.data(), acc.data(), seq, seq, hd);
              scatter_head_add(*gq, b * seq, seq, c0, hd, acc.data());
            }
            if (gk) {
              gather_head(qv, b * seq, seq, c0, hd, qh.data());
              transpose_into(dp.data(), seq, seq, dst.data());
              std::fill(acc.begin(), acc.end(), T{0});
              gemm_accumulate(dst.data(), qh.data(), acc.data(), seq, seq, hd);
              scatter_head_add(*gk, b * seq, seq, c0, hd, acc.data());
            }
          }
        }
      });
}

template <typename T>
Var multi_head_attention(Tape<T>& tape, Var q_in, Var k_in, Var v_in, const AttentionWeights& w,
                         std::size_t heads, std::size_t batch) {
  const Var q = linear(tape, q_in, w.wq, w.bq);
  const Var k = linear(tape, k_in, w.wk, w.bk);
  const Var v = linear(tape, v_in, w.wv, w.bv);
  const Var attended = scaled_dot_attention(tape, q, k, v, batch, heads);
  return linear(tape, attended, w.wo, w.bo);
}

template <typename T>
Var line_points(Tape<T>& tape, Var zs, Var zd, std::size_t steps) {
  const auto& sv = tape.value(zs);
  const auto& dv = tape.value(zd);
  require_same_shape(sv, dv, "line_points");
  if (steps == 0) throw DimensionError("line_points: steps must be >= 1");
  const std::size_t b = sv.rows();
  const std::size_t d = sv.cols();
  BasicTensor<T> out(Shape{b * steps, d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t t = 1; t <= steps; ++t) {
      const T coef = static_cast<T>(t) / static_cast<T>(steps);
      auto o = out.row(i * steps + t - 1);
      auto s = sv.row(i);
      auto dd = dv.row(i);
      for (std::size_t j = 0; j < d; ++j) o[j] = s[j] + coef * dd[j];
    }
  }
  return tape.record(std::move(out), {zs, zd}, [zs, zd, steps, b, d](Tape<T>& t, const BasicTensor<T>& g) {
    auto* gs = t.grad_buffer(zs);
    auto* gd = t.grad_buffer(zd);
    for (std::size_t i = 0; i < b; ++i) {
      for (std::size_t s = 1; s <= steps; ++s) {
        const T coef = static_cast<T>(s) / static_cast<T>(steps);
        auto gr = g.row(i * steps + s - 1);
        for (std::size_t j = 0; j < d; ++j) {
          if (gs) gs->at(i, j) += gr[j];
          if (gd) gd->at(i, j) += coef * gr[j];
        }
      }
    }
  });
}

template <typename T>
Var bce_with_logits(Tape<T>& tape, Var logits, const std::vector<int>& labels) {
  const auto& z = tape.value(logits);
  if (z.size() != labels.size()) {
    throw DimensionError("bce_with_logits: " + std::to_string(z.size()) + " logits for " +
                         std::to_string(labels.size()) + " labels");
  }
  const T n = static_cast<T>(labels.size());
  T total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T y = labels[i] ? T{1} : T{0};
    total += std::max(z[i], T{0}) - z[i] * y + std::log1p(std::exp(-std::abs(z[i])));
  }
  return tape.record(BasicTensor<T>::scalar(total / n), {logits},
                     [logits, labels, n](Tape<T>& t, const BasicTensor<T>& g) {
                       auto* gz = t.grad_buffer(logits);
                       if (!gz) return;
                       const auto& zv = t.value(logits);
                       for (std::size_t i = 0; i < zv.size(); ++i) {
                         const T y = labels[i] ? T{1} : T{0};
                         const T s = T{1} / (T{1} + std::exp(-zv[i]));
                         (*gz)[i] += g[0] * (s - y) / n;
                       }
                     });
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, const std::vector<int>& labels) {
  const auto& z = tape.value(logits);
  if (z.rows() != labels.size()) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(z.rows()) + " rows for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t c = z.cols();
  auto probs = softmax_rows_values(z);
  const T n = static_cast<T>(labels.size());
  T total = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " outside [0, " +
                            std::to_string(c) + ")");
    }
    total -= std::log(std::max(probs.at(r, static_cast<std::size_t>(labels[r])), std::numeric_limits<T>::min()));
  }
  return tape.record(BasicTensor<T>::scalar(total / n), {logits},
                     [logits, labels, n, probs = std::move(probs)](Tape<T>& t, const BasicTensor<T>& g) {
                       auto* gz = t.grad_buffer(logits);
                       if (!gz) return;
                       for (std::size_t r = 0; r < labels.size(); ++r) {
                         auto gr = gz->row(r);
                         auto pr = probs.row(r);
                         for (std::size_t j = 0; j < gr.size(); ++j) {
                           const T y = static_cast<int>(j) == labels[r] ? T{1} : T{0};
                           gr[j] += g[0] * (pr[j] - y) / n;
                         }
                       }
                     });
}

template <typename T>
Var attention_pool(Tape<T>& tape, Var keys, Var values, Var query, const std::vector<std::size_t>& offsets) {
  const auto& kv = tape.value(keys);
  const auto& vv = tape.value(values);
  const auto& qv = tape.value(query);
  if (kv.rows() != vv.rows()) throw DimensionError("attention_pool: keys/values row mismatch");
  if (qv.size() != kv.cols()) throw DimensionError("attention_pool: query length must equal key width");
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != kv.rows()) {
    throw DimensionError("attention_pool: offsets must run from 0 to the row count");
  }
  const std::size_t segments = offsets.size() - 1;
  const std::size_t kd = kv.cols();
  const std::size_t vd = vv.cols();
  const T sc = T{1} / std::sqrt(static_cast<T>(kd));
  std::vector<T> weights(kv.rows());
  BasicTensor<T> out(Shape{segments, vd});
  for (std::size_t s = 0; s < segments; ++s) {
    const std::size_t lo = offsets[s];
    const std::size_t hi = offsets[s + 1];
    if (hi <= lo) throw ValidationError("attention_pool: empty token sequence at index " + std::to_string(s));
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t r = lo; r < hi; ++r) {
      T dot = 0;
      auto kr = kv.row(r);
      for (std::size_t c = 0; c < kd; ++c) dot += kr[c] * qv[c];
      weights[r] = dot * sc;
      mx = std::max(mx, weights[r]);
    }
    T total = 0;
    for (std::size_t r = lo; r < hi; ++r) {
      weights[r] = std::exp(weights[r] - mx);
      total += weights[r];
    }
    auto o = out.row(s);
    for (std::size_t r = lo; r < hi; ++r) {
      weights[r] /= total;
      auto vr = vv.row(r);
      for (std::size_t c = 0; c < vd; ++c) o[c] += weights[r] * vr[c];
    }
  }
  return tape.record(
      std::move(out), {keys, values, query},
      [keys, values, query, offsets, weights = std::move(weights), kd, vd, sc](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& kv = t.value(keys);
        const auto& vv = t.value(values);
        const auto& qv = t.value(query);
        auto* gk = t.grad_buffer(keys);
        auto* gvals = t.grad_buffer(values);
        auto* gq = t.grad_buffer(query);
        for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
          auto gs = g.row(s);
          const std::size_t lo = offsets[s];
          const std::size_t hi = offsets[s + 1];
          T dot = 0;
          std::vector<T> da(hi - lo);
          for (std::size_t r = lo; r < hi; ++r) {
            auto vr = vv.row(r);
            T acc = 0;
            for (std::size_t c = 0; c < vd; ++c) acc += gs[c] * vr[c];
            da[r - lo] = acc;
            dot += acc * weights[r];
            if (gvals) {
              auto gvr = gvals->row(r);
              for (std::size_t c = 0; c < vd; ++c) gvr[c] += weights[r] * gs[c];
            }
          }
          for (std::size_t r = lo; r < hi; ++r) {
            const T dscore = weights[r] * (da[r - lo] - dot) * sc;
            auto kr = kv.row(r);
            if (gk) {
              auto gkr = gk->row(r);
              for (std::size_t c = 0; c < kd; ++c) gkr[c] += dscore * qv[c];
            }
            if (gq) {
              for (std::size_t c = 0; c < kd; ++c) (*gq)[c] += dscore * kr[c];
            }
          }
        }
      });
}

#define LIFT_INSTANTIATE_OPS(T)                                                                        \
  template BasicTensor<T> matmul_values(const BasicTensor<T>&, const BasicTensor<T>&);                 \
  template BasicTensor<T> transpose_values(const BasicTensor<T>&);                                     \
  template BasicTensor<T> softmax_rows_values(const BasicTensor<T>&);                                  \
  template T gelu_scalar(T);                                                                           \
  template T gelu_grad_scalar(T);                                                                      \
  template Var matmul(Tape<T>&, Var, Var);                                                             \
  template Var add(Tape<T>&, Var, Var);                                                                \
  template Var sub(Tape<T>&, Var, Var);                                                                \
  template Var mul(Tape<T>&, Var, Var);                                                                \
  template Var scale(Tape<T>&, Var, T);                                                                \
  template Var add_bias(Tape<T>&, Var, Var);                                                           \
  template Var layer_norm(Tape<T>&, Var, Var, Var, T);                                                 \
  template Var gelu(Tape<T>&, Var);                                                                    \
  template Var relu(Tape<T>&, Var);                                                                    \
  template Var softmax_rows(Tape<T>&, Var);                                                            \
  template Var abs(Tape<T>&, Var);                                                                     \
  template Var concat_rows(Tape<T>&, Var, Var);                                                        \
  template Var concat_cols(Tape<T>&, Var, Var);                                                        \
  template Var gather_rows(Tape<T>&, Var, std::vector<std::size_t>);                                   \
  template Var sum(Tape<T>&, Var);                                                                     \
  template Var squared_error(Tape<T>&, Var, Var);                                                      \
  template Var row_cosine(Tape<T>&, Var, Var);                                                         \
  template Var scaled_dot_attention(Tape<T>&, Var, Var, Var, std::size_t, std::size_t);                \
  template Var multi_head_attention(Tape<T>&, Var, Var, Var, const AttentionWeights&, std::size_t,     \
                                    std::size_t);                                                      \
  template Var line_points(Tape<T>&, Var, Var, std::size_t);                                           \
  template Var bce_with_logits(Tape<T>&, Var, const std::vector<int>&);                                \
  template Var softmax_cross_entropy(Tape<T>&, Var, const std::vector<int>&);                          \
  template Var attention_pool(Tape<T>&, Var, Var, Var, const std::vector<std::size_t>&);

LIFT_INSTANTIATE_OPS(float)
LIFT_INSTANTIATE_OPS(double)

}  // namespace lift
