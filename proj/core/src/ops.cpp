#include "detkd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace detkd {

namespace {

Tape* result_tape(const Tensor& a, const Tensor& b) {
  if (a.tracked() && b.tracked()) {
    if (a.tape != b.tape) throw std::invalid_argument("operands tracked on different tapes");
    return a.tape;
  }
  if (a.tracked()) return a.tape;
  if (b.tracked()) return b.tape;
  return nullptr;
}

void check_binary_shapes(const Tensor& a, const Tensor& b) {
  if (a.size() == 1 || b.size() == 1) return;
  if (a.shape != b.shape) throw std::invalid_argument("shape mismatch in binary op");
}

// Shared skeleton for elementwise binary ops with scalar broadcast.
// DfA/DfB compute local derivatives from (a_i, b_i, out_i).
template <typename Fwd, typename DfA, typename DfB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, DfA dfa, DfB dfb) {
  check_binary_shapes(a, b);
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  const std::vector<int>& shape = a_scalar && !b_scalar ? b.shape : a.shape;
  const std::size_t n = static_cast<std::size_t>(shape_size(shape));

  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(a.data[a_scalar ? 0 : i], b.data[b_scalar ? 0 : i]);
  }

  Tape* tape = result_tape(a, b);
  if (!tape) return Tensor(shape, std::move(out));

  std::vector<int> inputs;
  if (a.tracked()) inputs.push_back(a.node);
  if (b.tracked()) inputs.push_back(b.node);
  const int a_node = a.node;
  const int b_node = b.node;
  std::vector<double> a_data = a.data;
  std::vector<double> b_data = b.data;
  std::vector<double> out_copy = out;

  return tape->record(
      shape, std::move(out), std::move(inputs),
      [a_node, b_node, a_scalar, b_scalar, a_data = std::move(a_data),
       b_data = std::move(b_data), out_copy = std::move(out_copy), dfa,
       dfb](Tape& t, const std::vector<double>& gout) {
        if (a_node >= 0) {
          auto& ga = t.accum(a_node);
          for (std::size_t i = 0; i < gout.size(); ++i) {
            const double av = a_data[a_scalar ? 0 : i];
            const double bv = b_data[b_scalar ? 0 : i];
            ga[a_scalar ? 0 : i] += gout[i] * dfa(av, bv, out_copy[i]);
          }
        }
        if (b_node >= 0) {
          auto& gb = t.accum(b_node);
          for (std::size_t i = 0; i < gout.size(); ++i) {
            const double av = a_data[a_scalar ? 0 : i];
            const double bv = b_data[b_scalar ? 0 : i];
            gb[b_scalar ? 0 : i] += gout[i] * dfb(av, bv, out_copy[i]);
          }
        }
      });
}

template <typename Fwd, typename Df>
Tensor unary_op(const Tensor& a, Fwd fwd, Df df) {
  const std::size_t n = a.data.size();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(a.data[i]);

  if (!a.tracked()) return Tensor(a.shape, std::move(out));

  const int a_node = a.node;
  std::vector<double> a_data = a.data;
  std::vector<double> out_copy = out;
  return a.tape->record(
      a.shape, std::move(out), {a_node},
      [a_node, a_data = std::move(a_data), out_copy = std::move(out_copy),
       df](Tape& t, const std::vector<double>& gout) {
        auto& ga = t.accum(a_node);
        for (std::size_t i = 0; i < gout.size(); ++i) {
          ga[i] += gout[i] * df(a_data[i], out_copy[i]);
        }
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary_op(
      a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double out) { return out; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data) {
    if (v <= 0.0) throw std::invalid_argument("log of nonpositive value");
  }
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double out) { return 0.5 / std::max(out, kNormEpsilon); });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(
      a, [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  std::vector<double> out;
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    out.insert(out.end(), p.data.begin(), p.data.end());
    if (p.tracked()) {
      if (tape && tape != p.tape) throw std::invalid_argument("operands tracked on different tapes");
      tape = p.tape;
    }
  }
  const std::vector<int> shape{static_cast<int>(out.size())};
  if (!tape) return Tensor(shape, std::move(out));

  std::vector<int> inputs;
  std::vector<std::pair<int, std::pair<std::size_t, std::size_t>>> segs;  // node, (offset, len)
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    if (p.tracked()) {
      inputs.push_back(p.node);
      segs.emplace_back(p.node, std::make_pair(off, p.data.size()));
    }
    off += p.data.size();
  }
  return tape->record(
      shape, std::move(out), std::move(inputs),
      [segs = std::move(segs)](Tape& t, const std::vector<double>& gout) {
        for (const auto& [node, span] : segs) {
          auto& g = t.accum(node);
          for (std::size_t i = 0; i < span.second; ++i) g[i] += gout[span.first + i];
        }
      });
}

Tensor slice(const Tensor& a, std::int64_t start, std::int64_t len) {
  if (start < 0 || len < 0 || start + len > a.size()) {
    throw std::invalid_argument("slice out of range");
  }
  std::vector<double> out(a.data.begin() + start, a.data.begin() + start + len);
  const std::vector<int> shape{static_cast<int>(len)};
  if (!a.tracked()) return Tensor(shape, std::move(out));

  const int a_node = a.node;
  const std::size_t a_size = a.data.size();
  return a.tape->record(
      shape, std::move(out), {a_node},
      [a_node, a_size, start](Tape& t, const std::vector<double>& gout) {
        auto& ga = t.accum(a_node);
        (void)a_size;
        for (std::size_t i = 0; i < gout.size(); ++i) {
          ga[static_cast<std::size_t>(start) + i] += gout[i];
        }
      });
}

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_size(shape) != a.size()) throw std::invalid_argument("reshape changes element count");
  if (!a.tracked()) return Tensor(std::move(shape), a.data);

  const int a_node = a.node;
  return a.tape->record(
      std::move(shape), a.data, {a_node},
      [a_node](Tape& t, const std::vector<double>& gout) {
        auto& ga = t.accum(a_node);
        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2) throw std::invalid_argument("matmul requires rank-2 tensors");
  const int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2) throw std::invalid_argument("matmul inner dimensions disagree");

  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = a.data[static_cast<std::size_t>(i) * k + p];
      if (av == 0.0) continue;
      const std::size_t bo = static_cast<std::size_t>(p) * n;
      const std::size_t oo = static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) out[oo + j] += av * b.data[bo + j];
    }
  }

  Tape* tape = result_tape(a, b);
  if (!tape) return Tensor({m, n}, std::move(out));

  std::vector<int> inputs;
  if (a.tracked()) inputs.push_back(a.node);
  if (b.tracked()) inputs.push_back(b.node);
  const int a_node = a.node, b_node = b.node;
  std::vector<double> a_data = a.data, b_data = b.data;
  return tape->record(
      {m, n}, std::move(out), std::move(inputs),
      [a_node, b_node, m, k, n, a_data = std::move(a_data),
       b_data = std::move(b_data)](Tape& t, const std::vector<double>& gout) {
        if (a_node >= 0) {  // dA = G . B^T
          auto& ga = t.accum(a_node);
          for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
              double s = 0.0;
              for (int j = 0; j < n; ++j) {
                s += gout[static_cast<std::size_t>(i) * n + j] *
                     b_data[static_cast<std::size_t>(p) * n + j];
              }
              ga[static_cast<std::size_t>(i) * k + p] += s;
            }
          }
        }
        if (b_node >= 0) {  // dB = A^T . G
          auto& gb = t.accum(b_node);
          for (int p = 0; p < k; ++p) {
            for (int j = 0; j < n; ++j) {
              double s = 0.0;
              for (int i = 0; i < m; ++i) {
                s += a_data[static_cast<std::size_t>(i) * k + p] *
                     gout[static_cast<std::size_t>(i) * n + j];
              }
              gb[static_cast<std::size_t>(p) * n + j] += s;
            }
          }
        }
      });
}

Tensor add_rowvec(const Tensor& mat, const Tensor& vec) {
  if (mat.dim() != 2 || vec.dim() != 1 || mat.shape[1] != vec.shape[0]) {
    throw std::invalid_argument("add_rowvec requires [r x c] and [c]");
  }
  const int r = mat.shape[0], c = mat.shape[1];
  std::vector<double> out(mat.data);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] += vec.data[j];
  }

  Tape* tape = result_tape(mat, vec);
  if (!tape) return Tensor({r, c}, std::move(out));

  std::vector<int> inputs;
  if (mat.tracked()) inputs.push_back(mat.node);
  if (vec.tracked()) inputs.push_back(vec.node);
  const int m_node = mat.node, v_node = vec.node;
  return tape->record(
      {r, c}, std::move(out), std::move(inputs),
      [m_node, v_node, r, c](Tape& t, const std::vector<double>& gout) {
        if (m_node >= 0) {
          auto& gm = t.accum(m_node);
          for (std::size_t i = 0; i < gout.size(); ++i) gm[i] += gout[i];
        }
        if (v_node >= 0) {
          auto& gv = t.accum(v_node);
          for (int i = 0; i < r; ++i) {
            for (int j = 0; j < c; ++j) gv[j] += gout[static_cast<std::size_t>(i) * c + j];
          }
        }
      });
}

Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.dim()) throw std::invalid_argument("softmax axis out of range");
  const int extent = a.shape[static_cast<std::size_t>(axis)];
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < a.dim(); ++d) inner *= a.shape[static_cast<std::size_t>(d)];

  std::vector<double> out(a.data.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) {
      double mx = -1e300;
      for (int s = 0; s < extent; ++s) {
        mx = std::max(mx, a.data[static_cast<std::size_t>((o * extent + s) * inner + i)]);
      }
      double z = 0.0;
      for (int s = 0; s < extent; ++s) {
        const auto idx = static_cast<std::size_t>((o * extent + s) * inner + i);
        out[idx] = std::exp(a.data[idx] - mx);
        z += out[idx];
      }
      for (int s = 0; s < extent; ++s) {
        out[static_cast<std::size_t>((o * extent + s) * inner + i)] /= z;
      }
    }
  }

  if (!a.tracked()) return Tensor(a.shape, std::move(out));

  const int a_node = a.node;
  std::vector<double> out_copy = out;
  return a.tape->record(
      a.shape, std::move(out), {a_node},
      [a_node, extent, outer, inner,
       out_copy = std::move(out_copy)](Tape& t, const std::vector<double>& gout) {
        auto& ga = t.accum(a_node);
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t i = 0; i < inner; ++i) {
            double gy = 0.0;
            for (int s = 0; s < extent; ++s) {
              const auto idx = static_cast<std::size_t>((o * extent + s) * inner + i);
              gy += gout[idx] * out_copy[idx];
            }
            for (int s = 0; s < extent; ++s) {
              const auto idx = static_cast<std::size_t>((o * extent + s) * inner + i);
              ga[idx] += out_copy[idx] * (gout[idx] - gy);
            }
          }
        }
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data) s += v;
  if (!a.tracked()) return Tensor::scalar(s);

  const int a_node = a.node;
  const std::size_t n = a.data.size();
  return a.tape->record(
      {1}, {s}, {a_node}, [a_node, n](Tape& t, const std::vector<double>& gout) {
        auto& ga = t.accum(a_node);
        for (std::size_t i = 0; i < n; ++i) ga[i] += gout[0];
      });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.data) s += v;
  s *= inv;
  if (!a.tracked()) return Tensor::scalar(s);

  const int a_node = a.node;
  const std::size_t n = a.data.size();
  return a.tape->record(
      {1}, {s}, {a_node}, [a_node, n, inv](Tape& t, const std::vector<double>& gout) {
        auto& ga = t.accum(a_node);
        for (std::size_t i = 0; i < n; ++i) ga[i] += gout[0] * inv;
      });
}

Tensor reduce_max(const Tensor& a) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < a.data.size(); ++i) {
    if (a.data[i] > a.data[arg]) arg = i;
  }
  const double mx = a.data[arg];
  if (!a.tracked()) return Tensor::scalar(mx);

  const int a_node = a.node;
  return a.tape->record(
      {1}, {mx}, {a_node}, [a_node, arg](Tape& t, const std::vector<double>& gout) {
        t.accum(a_node)[arg] += gout[0];
      });
}

Tensor dot(const Tensor& a, const Tensor& b) { return sum(mul(a, b)); }

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

Tensor l1(const Tensor& a, const Tensor& b) { return mean(abs(sub(a, b))); }

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw std::invalid_argument("shape mismatch in cosine_similarity");
  Tensor na = sqrt(sum(mul(a, a)));
  Tensor nb = sqrt(sum(mul(b, b)));
  return divide(dot(a, b), clamp_min(mul(na, nb), kNormEpsilon));
}

Tensor avg_pool2x2(const Tensor& a) {
  if (a.dim() != 3) throw std::invalid_argument("avg_pool2x2 requires [h x w x c]");
  const int h = a.shape[0], w = a.shape[1], c = a.shape[2];
  if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("avg_pool2x2 requires even extents");
  const int oh = h / 2, ow = w / 2;

  auto at = [w, c](int y, int x, int ch) {
    return static_cast<std::size_t>((y * w + x) * c + ch);
  };
  std::vector<double> out(static_cast<std::size_t>(oh) * ow * c);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        out[static_cast<std::size_t>((y * ow + x) * c + ch)] =
            0.25 * (a.data[at(2 * y, 2 * x, ch)] + a.data[at(2 * y, 2 * x + 1, ch)] +
                    a.data[at(2 * y + 1, 2 * x, ch)] + a.data[at(2 * y + 1, 2 * x + 1, ch)]);
      }
    }
  }

  if (!a.tracked()) return Tensor({oh, ow, c}, std::move(out));

  const int a_node = a.node;
  return a.tape->record(
      {oh, ow, c}, std::move(out), {a_node},
      [a_node, oh, ow, w, c](Tape& t, const std::vector<double>& gout) {
        auto& ga = t.accum(a_node);
        auto at = [w, c](int y, int x, int ch) {
          return static_cast<std::size_t>((y * w + x) * c + ch);
        };
        for (int y = 0; y < oh; ++y) {
          for (int x = 0; x < ow; ++x) {
            for (int ch = 0; ch < c; ++ch) {
              const double g = 0.25 * gout[static_cast<std::size_t>((y * ow + x) * c + ch)];
              ga[at(2 * y, 2 * x, ch)] += g;
              ga[at(2 * y, 2 * x + 1, ch)] += g;
              ga[at(2 * y + 1, 2 * x, ch)] += g;
              ga[at(2 * y + 1, 2 * x + 1, ch)] += g;
            }
          }
        }
      });
}

}  // namespace detkd
