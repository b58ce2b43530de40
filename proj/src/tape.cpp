#include "dnpo/tape.hpp"

#include <algorithm>
#include <cmath>

namespace dnpo {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_finite(const char* op, const Mat& m) {
  for (double x : m.data) {
    if (!std::isfinite(x)) {
      throw NonFiniteError(op, "output " + shape_str(m));
    }
  }
}

void require_same_shape(const char* op, const Mat& a, const Mat& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
  }
}

}  // namespace

double neg_log_sigmoid(double x) {
  if (x >= 0.0) return std::log1p(std::exp(-x));
  return -x + std::log1p(std::exp(x));
}

const Mat& Var::value() const {
  if (!valid()) throw std::logic_error("Var::value: empty handle");
  return tape_->value(*this);
}

double Var::scalar() const {
  const Mat& m = value();
  if (m.rows != 1 || m.cols != 1) {
    throw std::logic_error("Var::scalar: node is " + shape_str(m) + ", not 1x1");
  }
  return m.data[0];
}

Var Tape::push(Mat value, bool requires_grad, const char* op,
               std::function<void(Tape&, int)> bw) {
  check_finite(op, value);
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.op = op;
  n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape_ != this) throw std::logic_error("Var belongs to a different tape");
  return nodes_[v.id_];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape_ != this) throw std::logic_error("Var belongs to a different tape");
  return nodes_[v.id_];
}

Mat& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (!n.grad.same_shape(n.value)) n.grad = Mat(n.value.rows, n.value.cols);
  return n.grad;
}

const Mat& Tape::value(Var v) const { return node(v).value; }

const Mat& Tape::grad(Var v) const {
  const Node& n = node(v);
  if (!n.grad.same_shape(n.value)) {
    // Node never received gradient; materialize zeros of the right shape.
    const_cast<Tape*>(this)->grad_buf(v.id_);
  }
  return node(v).grad;
}

Var Tape::constant(Mat v) { return push(std::move(v), false, "constant", nullptr); }

Var Tape::leaf(Mat v) { return push(std::move(v), true, "leaf", nullptr); }

Var Tape::add(Var a, Var b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  require_same_shape("add", va, vb);
  Mat out = va;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
  bool rg = node(a).requires_grad || node(b).requires_grad;
  int ia = a.id_, ib = b.id_;
  return push(std::move(out), rg, "add", [ia, ib](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    if (t.nodes_[ia].requires_grad) {
      Mat& ga = t.grad_buf(ia);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (t.nodes_[ib].requires_grad) {
      Mat& gb = t.grad_buf(ib);
      for (size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i];
    }
  });
}

Var Tape::sub(Var a, Var b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  require_same_shape("sub", va, vb);
  Mat out = va;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] -= vb.data[i];
  bool rg = node(a).requires_grad || node(b).requires_grad;
  int ia = a.id_, ib = b.id_;
  return push(std::move(out), rg, "sub", [ia, ib](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    if (t.nodes_[ia].requires_grad) {
      Mat& ga = t.grad_buf(ia);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (t.nodes_[ib].requires_grad) {
      Mat& gb = t.grad_buf(ib);
      for (size_t i = 0; i < g.size(); ++i) gb.data[i] -= g.data[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  require_same_shape("mul", va, vb);
  Mat out = va;
  for (size_t i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
  bool rg = node(a).requires_grad || node(b).requires_grad;
  int ia = a.id_, ib = b.id_;
  return push(std::move(out), rg, "mul", [ia, ib](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    const Mat& va = t.nodes_[ia].value;
    const Mat& vb = t.nodes_[ib].value;
    if (t.nodes_[ia].requires_grad) {
      Mat& ga = t.grad_buf(ia);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * vb.data[i];
    }
    if (t.nodes_[ib].requires_grad) {
      Mat& gb = t.grad_buf(ib);
      for (size_t i = 0; i < g.size(); ++i) gb.data[i] += g.data[i] * va.data[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  Mat out = value(a);
  for (auto& x : out.data) x *= c;
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "scale", [ia, c](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Mat& g = t.nodes_[self].grad;
    Mat& ga = t.grad_buf(ia);
    for (size_t i = 0; i < g.size(); ++i) ga.data[i] += c * g.data[i];
  });
}

Var Tape::matmul(Var a, Var b) {
  const Mat& va = value(a);
  const Mat& vb = value(b);
  if (va.cols != vb.rows) {
    throw std::invalid_argument("matmul: inner dimensions " + shape_str(va) + " * " +
                                shape_str(vb));
  }
  Mat out(va.rows, vb.cols);
  for (int i = 0; i < va.rows; ++i) {
    const double* arow = &va.data[static_cast<size_t>(i) * va.cols];
    double* orow = &out.data[static_cast<size_t>(i) * out.cols];
    for (int k = 0; k < va.cols; ++k) {
      double aik = arow[k];
      const double* brow = &vb.data[static_cast<size_t>(k) * vb.cols];
      for (int j = 0; j < vb.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  bool rg = node(a).requires_grad || node(b).requires_grad;
  int ia = a.id_, ib = b.id_;
  return push(std::move(out), rg, "matmul", [ia, ib](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    const Mat& va = t.nodes_[ia].value;
    const Mat& vb = t.nodes_[ib].value;
    if (t.nodes_[ia].requires_grad) {
      // dA = G B^T
      Mat& ga = t.grad_buf(ia);
      for (int i = 0; i < va.rows; ++i) {
        const double* grow = &g.data[static_cast<size_t>(i) * g.cols];
        double* garow = &ga.data[static_cast<size_t>(i) * ga.cols];
        for (int k = 0; k < va.cols; ++k) {
          double s = 0.0;
          const double* brow = &vb.data[static_cast<size_t>(k) * vb.cols];
          for (int j = 0; j < vb.cols; ++j) s += grow[j] * brow[j];
          garow[k] += s;
        }
      }
    }
    if (t.nodes_[ib].requires_grad) {
      // dB = A^T G
      Mat& gb = t.grad_buf(ib);
      for (int i = 0; i < va.rows; ++i) {
        const double* grow = &g.data[static_cast<size_t>(i) * g.cols];
        const double* arow = &va.data[static_cast<size_t>(i) * va.cols];
        for (int k = 0; k < va.cols; ++k) {
          double aik = arow[k];
          double* gbrow = &gb.data[static_cast<size_t>(k) * gb.cols];
          for (int j = 0; j < g.cols; ++j) gbrow[j] += aik * grow[j];
        }
      }
    }
  });
}

Var Tape::add_row_broadcast(Var a, Var row) {
  const Mat& va = value(a);
  const Mat& vr = value(row);
  if (vr.rows != 1 || vr.cols != va.cols) {
    throw std::invalid_argument("add_row_broadcast: row is " + shape_str(vr) + ", want 1x" +
                                std::to_string(va.cols));
  }
  Mat out = va;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) += vr(0, j);
  bool rg = node(a).requires_grad || node(row).requires_grad;
  int ia = a.id_, ir = row.id_;
  return push(std::move(out), rg, "add_row_broadcast", [ia, ir](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    if (t.nodes_[ia].requires_grad) {
      Mat& ga = t.grad_buf(ia);
      for (size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i];
    }
    if (t.nodes_[ir].requires_grad) {
      Mat& gr = t.grad_buf(ir);
      for (int i = 0; i < g.rows; ++i)
        for (int j = 0; j < g.cols; ++j) gr(0, j) += g(i, j);
    }
  });
}

Var Tape::transpose(Var a) {
  const Mat& va = value(a);
  Mat out(va.cols, va.rows);
  for (int i = 0; i < va.rows; ++i)
    for (int j = 0; j < va.cols; ++j) out(j, i) = va(i, j);
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "transpose", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Mat& g = t.nodes_[self].grad;
    Mat& ga = t.grad_buf(ia);
    for (int i = 0; i < g.rows; ++i)
      for (int j = 0; j < g.cols; ++j) ga(j, i) += g(i, j);
  });
}

Var Tape::slice_rows(Var a, int begin, int count) {
  Mat out = value(a).slice_rows(begin, count);
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "slice_rows",
              [ia, begin](Tape& t, int self) {
                if (!t.nodes_[ia].requires_grad) return;
                const Mat& g = t.nodes_[self].grad;
                Mat& ga = t.grad_buf(ia);
                for (int i = 0; i < g.rows; ++i)
                  for (int j = 0; j < g.cols; ++j) ga(begin + i, j) += g(i, j);
              });
}

Var Tape::slice_cols(Var a, int begin, int count) {
  const Mat& va = value(a);
  if (begin < 0 || count < 0 || begin + count > va.cols)
    throw std::invalid_argument("slice_cols: range out of bounds");
  Mat out(va.rows, count);
  for (int i = 0; i < va.rows; ++i)
    for (int j = 0; j < count; ++j) out(i, j) = va(i, begin + j);
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "slice_cols",
              [ia, begin](Tape& t, int self) {
                if (!t.nodes_[ia].requires_grad) return;
                const Mat& g = t.nodes_[self].grad;
                Mat& ga = t.grad_buf(ia);
                for (int i = 0; i < g.rows; ++i)
                  for (int j = 0; j < g.cols; ++j) ga(i, begin + j) += g(i, j);
              });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
  int rows = value(parts[0]).rows;
  int cols = 0;
  bool rg = false;
  for (Var p : parts) {
    const Mat& v = value(p);
    if (v.rows != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    cols += v.cols;
    rg = rg || node(p).requires_grad;
  }
  Mat out(rows, cols);
  std::vector<int> ids;
  std::vector<int> widths;
  int off = 0;
  for (Var p : parts) {
    const Mat& v = value(p);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < v.cols; ++j) out(i, off + j) = v(i, j);
    ids.push_back(p.id_);
    widths.push_back(v.cols);
    off += v.cols;
  }
  return push(std::move(out), rg, "concat_cols", [ids, widths](Tape& t, int self) {
    const Mat& g = t.nodes_[self].grad;
    int off = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      if (t.nodes_[ids[k]].requires_grad) {
        Mat& gp = t.grad_buf(ids[k]);
        for (int i = 0; i < g.rows; ++i)
          for (int j = 0; j < widths[k]; ++j) gp(i, j) += g(i, off + j);
      }
      off += widths[k];
    }
  });
}

Var Tape::exp(Var a) {
  Mat out = value(a);
  for (auto& x : out.data) x = std::exp(x);
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "exp", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Node& n = t.nodes_[self];
    Mat& ga = t.grad_buf(ia);
    for (size_t i = 0; i < n.value.size(); ++i) ga.data[i] += n.grad.data[i] * n.value.data[i];
  });
}

Var Tape::gelu(Var a) {
  Mat out = value(a);
  for (auto& x : out.data) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "gelu", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Mat& g = t.nodes_[self].grad;
    const Mat& va = t.nodes_[ia].value;
    Mat& ga = t.grad_buf(ia);
    for (size_t i = 0; i < va.size(); ++i) {
      double x = va.data[i];
      double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga.data[i] += g.data[i] * (cdf + x * pdf);
    }
  });
}

Var Tape::rms_norm_rows(Var a) {
  const Mat& va = value(a);
  Mat out(va.rows, va.cols);
  for (int i = 0; i < va.rows; ++i) {
    double ms = 0.0;
    for (int j = 0; j < va.cols; ++j) ms += va(i, j) * va(i, j);
    ms /= va.cols;
    double s = 1.0 / std::sqrt(ms + kRmsEps);
    for (int j = 0; j < va.cols; ++j) out(i, j) = va(i, j) * s;
  }
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "rms_norm_rows", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Mat& g = t.nodes_[self].grad;
    const Mat& va = t.nodes_[ia].value;
    Mat& ga = t.grad_buf(ia);
    for (int i = 0; i < va.rows; ++i) {
      double ms = 0.0, xg = 0.0;
      for (int j = 0; j < va.cols; ++j) {
        ms += va(i, j) * va(i, j);
        xg += va(i, j) * g(i, j);
      }
      ms /= va.cols;
      double s = 1.0 / std::sqrt(ms + kRmsEps);
      double s3_xg_n = s * s * s * xg / va.cols;
      for (int j = 0; j < va.cols; ++j) ga(i, j) += s * g(i, j) - s3_xg_n * va(i, j);
    }
  });
}

Var Tape::clamp(Var a, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lower bound must be below upper bound");
  Mat out = value(a);
  for (auto& x : out.data) x = std::min(hi, std::max(lo, x));
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "clamp", [ia, lo, hi](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Mat& g = t.nodes_[self].grad;
    const Mat& va = t.nodes_[ia].value;
    Mat& ga = t.grad_buf(ia);
    // Gradient passes through strictly inside the interval only.
    for (size_t i = 0; i < va.size(); ++i)
      if (va.data[i] > lo && va.data[i] < hi) ga.data[i] += g.data[i];
  });
}

Var Tape::causal_softmax_rows(Var scores) {
  const Mat& vs = value(scores);
  if (vs.rows != vs.cols) throw std::invalid_argument("causal_softmax_rows: input must be square");
  Mat out(vs.rows, vs.cols);
  for (int i = 0; i < vs.rows; ++i) {
    double m = vs(i, 0);
    for (int j = 1; j <= i; ++j) m = std::max(m, vs(i, j));
    double total = 0.0;
    for (int j = 0; j <= i; ++j) {
      out(i, j) = std::exp(vs(i, j) - m);
      total += out(i, j);
    }
    for (int j = 0; j <= i; ++j) out(i, j) /= total;
  }
  int is = scores.id_;
  return push(std::move(out), node(scores).requires_grad, "causal_softmax_rows",
              [is](Tape& t, int self) {
                if (!t.nodes_[is].requires_grad) return;
                const Mat& p = t.nodes_[self].value;
                const Mat& g = t.nodes_[self].grad;
                Mat& gs = t.grad_buf(is);
                for (int i = 0; i < p.rows; ++i) {
                  double dot = 0.0;
                  for (int j = 0; j <= i; ++j) dot += g(i, j) * p(i, j);
                  for (int j = 0; j <= i; ++j) gs(i, j) += p(i, j) * (g(i, j) - dot);
                }
              });
}

Var Tape::log_softmax_rows(Var a) {
  const Mat& va = value(a);
  if (va.cols < 1) throw std::invalid_argument("log_softmax_rows: empty rows");
  Mat out(va.rows, va.cols);
  for (int i = 0; i < va.rows; ++i) {
    double m = va(i, 0);
    for (int j = 1; j < va.cols; ++j) m = std::max(m, va(i, j));
    double total = 0.0;
    for (int j = 0; j < va.cols; ++j) total += std::exp(va(i, j) - m);
    double lse = m + std::log(total);
    for (int j = 0; j < va.cols; ++j) out(i, j) = va(i, j) - lse;
  }
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "log_softmax_rows", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Mat& y = t.nodes_[self].value;
    const Mat& g = t.nodes_[self].grad;
    Mat& ga = t.grad_buf(ia);
    for (int i = 0; i < y.rows; ++i) {
      double gsum = 0.0;
      for (int j = 0; j < y.cols; ++j) gsum += g(i, j);
      for (int j = 0; j < y.cols; ++j) ga(i, j) += g(i, j) - std::exp(y(i, j)) * gsum;
    }
  });
}

Var Tape::gather_rows(Var a, std::vector<int> cols) {
  const Mat& va = value(a);
  if (static_cast<int>(cols.size()) != va.rows)
    throw std::invalid_argument("gather_rows: need one column index per row");
  Mat out(va.rows, 1);
  for (int i = 0; i < va.rows; ++i) {
    if (cols[i] < 0 || cols[i] >= va.cols)
      throw std::invalid_argument("gather_rows: column index out of range");
    out(i, 0) = va(i, cols[i]);
  }
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "gather_rows",
              [ia, cols = std::move(cols)](Tape& t, int self) {
                if (!t.nodes_[ia].requires_grad) return;
                const Mat& g = t.nodes_[self].grad;
                Mat& ga = t.grad_buf(ia);
                for (int i = 0; i < g.rows; ++i) ga(i, cols[i]) += g(i, 0);
              });
}

Var Tape::embedding_rows(Var table, std::vector<int> ids) {
  const Mat& vt = value(table);
  Mat out(static_cast<int>(ids.size()), vt.cols);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vt.rows)
      throw std::invalid_argument("embedding_rows: row index out of range");
    for (int j = 0; j < vt.cols; ++j) out(static_cast<int>(i), j) = vt(ids[i], j);
  }
  int it = table.id_;
  return push(std::move(out), node(table).requires_grad, "embedding_rows",
              [it, ids = std::move(ids)](Tape& t, int self) {
                if (!t.nodes_[it].requires_grad) return;
                const Mat& g = t.nodes_[self].grad;
                Mat& gt = t.grad_buf(it);
                for (size_t i = 0; i < ids.size(); ++i)
                  for (int j = 0; j < g.cols; ++j) gt(ids[i], j) += g(static_cast<int>(i), j);
              });
}

Var Tape::sum(Var a) {
  const Mat& va = value(a);
  double s = 0.0;
  for (double x : va.data) s += x;
  Mat out(1, 1);
  out.data[0] = s;
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "sum", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    double g = t.nodes_[self].grad.data[0];
    Mat& ga = t.grad_buf(ia);
    for (auto& x : ga.data) x += g;
  });
}

Var Tape::mean(Var a) {
  const Mat& va = value(a);
  if (va.size() == 0) throw std::invalid_argument("mean: empty input");
  double s = 0.0;
  for (double x : va.data) s += x;
  Mat out(1, 1);
  out.data[0] = s / static_cast<double>(va.size());
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "mean", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    Mat& ga = t.grad_buf(ia);
    double g = t.nodes_[self].grad.data[0] / static_cast<double>(ga.size());
    for (auto& x : ga.data) x += g;
  });
}

Var Tape::neg_log_sigmoid(Var a) {
  Mat out = value(a);
  for (auto& x : out.data) x = dnpo::neg_log_sigmoid(x);
  int ia = a.id_;
  return push(std::move(out), node(a).requires_grad, "neg_log_sigmoid", [ia](Tape& t, int self) {
    if (!t.nodes_[ia].requires_grad) return;
    const Mat& g = t.nodes_[self].grad;
    const Mat& va = t.nodes_[ia].value;
    Mat& ga = t.grad_buf(ia);
    for (size_t i = 0; i < va.size(); ++i) {
      // d/dx log(1+exp(-x)) = -1/(1+exp(x)), branch keeps exp() from overflowing
      double x = va.data[i];
      double d = x >= 0.0 ? -std::exp(-x) / (1.0 + std::exp(-x)) : -1.0 / (1.0 + std::exp(x));
      ga.data[i] += g.data[i] * d;
    }
  });
}

Var Tape::stop_gradient(Var a) { return push(value(a), false, "stop_gradient", nullptr); }

void Tape::backward(Var loss) {
  if (ran_backward_) throw std::logic_error("Tape::backward: already ran on this tape");
  ran_backward_ = true;
  if (loss.tape_ != this) throw std::logic_error("Tape::backward: loss from a different tape");
  const Mat& lv = value(loss);
  if (lv.rows != 1 || lv.cols != 1)
    throw std::invalid_argument("Tape::backward: loss must be 1x1, got " + shape_str(lv));
  if (!node(loss).requires_grad) return;
  grad_buf(loss.id_).data[0] = 1.0;
  for (int i = loss.id_; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.size() == 0) continue;  // nothing flowed into this node
    n.backward(*this, i);
    for (double x : n.grad.data) {
      if (!std::isfinite(x)) throw NonFiniteError(n.op, "gradient " + shape_str(n.grad));
    }
  }
}

}  // namespace dnpo
