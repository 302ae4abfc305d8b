#include "gsaf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace gsaf {

namespace {
thread_local Tape* g_active_tape = nullptr;
}  // namespace

// Internal access used by the op implementations.
struct OpAccess {
  using Node = Tensor::Node;

  static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }

  static Tensor make(int rows, int cols, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->rows = rows;
    t.node_->cols = cols;
    t.node_->values.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    t.node_->requires_grad = requires_grad;
    if (requires_grad) {
      t.node_->grad.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    }
    return t;
  }

  static void record(std::function<void()> fn) {
    g_active_tape->steps_.push_back(std::move(fn));
  }
};

using Node = Tensor::Node;
using NodePtr = std::shared_ptr<Tensor::Node>;

// ====================== Tensor ======================

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  if (rows < 0 || cols < 0) throw ShapeError("Tensor::zeros: negative dimension");
  return OpAccess::make(rows, cols, requires_grad);
}

Tensor Tensor::from_values(int rows, int cols, std::vector<double> values,
                           bool requires_grad) {
  if (rows < 0 || cols < 0) throw ShapeError("Tensor::from_values: negative dimension");
  if (values.size() != static_cast<std::size_t>(rows) * cols) {
    throw ShapeError("Tensor::from_values: value count does not match shape");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericalError("Tensor::from_values: non-finite value");
  }
  Tensor t = OpAccess::make(rows, cols, requires_grad);
  t.node_->values = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values(1, 1, {value}, requires_grad);
}

void Tensor::zero_grad() {
  if (node_ && node_->requires_grad) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
}

bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ====================== Tape ======================

Tape* Tape::active() { return g_active_tape; }

void Tape::backward(const Tensor& root) {
  if (!root.defined() || root.rows() != 1 || root.cols() != 1) {
    throw ContractError("Tape::backward: root must be a scalar tensor");
  }
  if (used_) {
    throw ContractError("Tape::backward: tape already consumed; call reset() first");
  }
  if (!std::isfinite(root.values()[0])) {
    throw NumericalError("Tape::backward: non-finite root value");
  }
  used_ = true;
  const NodePtr& rn = OpAccess::node(root);
  if (rn->requires_grad) rn->grad[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void Tape::reset() {
  steps_.clear();
  used_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

// ====================== Op helpers ======================

namespace {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) +
                     "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                     "x" + std::to_string(b.cols()) + ")");
  }
}

void require_col_vector(const Tensor& v, const char* op) {
  if (!v.defined() || v.cols() != 1) {
    throw ShapeError(std::string(op) + ": expected a column vector");
  }
}

}  // namespace

// ====================== Primitives ======================

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const bool rec = recording({&a, &b});
  Tensor out = OpAccess::make(m, n, rec);
  {
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values_mut().data();
    for (int i = 0; i < m; ++i) {
      for (int l = 0; l < k; ++l) {
        const double ail = av[i * k + l];
        if (ail == 0.0) continue;
        for (int j = 0; j < n; ++j) ov[i * n + j] += ail * bv[l * n + j];
      }
    }
  }
  if (rec) {
    NodePtr an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out);
    OpAccess::record([an, bn, on, m, k, n] {
      const double* g = on->grad.data();
      if (an->requires_grad) {
        double* ga = an->grad.data();
        const double* bv = bn->values.data();
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += g[i * n + j] * bv[l * n + j];
            ga[i * k + l] += acc;
          }
      }
      if (bn->requires_grad) {
        double* gb = bn->grad.data();
        const double* av = an->values.data();
        for (int l = 0; l < k; ++l)
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) acc += av[i * k + l] * g[i * n + j];
            gb[l * n + j] += acc;
          }
      }
    });
  }
  return out;
}

Tensor masked_matmul(const Tensor& w, const Tensor& x, const Tensor& mask) {
  require_same_shape(w, mask, "masked_matmul(mask)");
  if (w.cols() != x.rows()) throw ShapeError("masked_matmul: inner dimensions differ");
  const int m = w.rows(), k = w.cols(), n = x.cols();
  const bool rec = recording({&w, &x});
  Tensor out = OpAccess::make(m, n, rec);
  {
    const double* wv = w.values().data();
    const double* mk = mask.values().data();
    const double* xv = x.values().data();
    double* ov = out.values_mut().data();
    for (int i = 0; i < m; ++i) {
      for (int l = 0; l < k; ++l) {
        if (mk[i * k + l] == 0.0) continue;
        const double wil = wv[i * k + l];
        if (wil == 0.0) continue;
        for (int j = 0; j < n; ++j) ov[i * n + j] += wil * xv[l * n + j];
      }
    }
  }
  if (rec) {
    NodePtr wn = OpAccess::node(w), xn = OpAccess::node(x), mn = OpAccess::node(mask),
            on = OpAccess::node(out);
    OpAccess::record([wn, xn, mn, on, m, k, n] {
      const double* g = on->grad.data();
      const double* mk = mn->values.data();
      if (wn->requires_grad) {
        double* gw = wn->grad.data();
        const double* xv = xn->values.data();
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            if (mk[i * k + l] == 0.0) continue;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += g[i * n + j] * xv[l * n + j];
            gw[i * k + l] += acc;
          }
      }
      if (xn->requires_grad) {
        double* gx = xn->grad.data();
        const double* wv = wn->values.data();
        for (int l = 0; l < k; ++l)
          for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int i = 0; i < m; ++i) {
              if (mk[i * k + l] == 0.0) continue;
              acc += wv[i * k + l] * g[i * n + j];
            }
            gx[l * n + j] += acc;
          }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rec = recording({&a, &b});
  Tensor out = OpAccess::make(a.rows(), a.cols(), rec);
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] + b.values()[i];
  if (rec) {
    NodePtr an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out);
    OpAccess::record([an, bn, on, n] {
      const double* g = on->grad.data();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i];
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool rec = recording({&a, &b});
  Tensor out = OpAccess::make(a.rows(), a.cols(), rec);
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] - b.values()[i];
  if (rec) {
    NodePtr an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out);
    OpAccess::record([an, bn, on, n] {
      const double* g = on->grad.data();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] -= g[i];
    });
  }
  return out;
}

Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ContractError("add_n: empty term list");
  bool rec = false;
  if (g_active_tape != nullptr) {
    for (const Tensor& t : terms) rec = rec || t.requires_grad();
  }
  for (const Tensor& t : terms) require_same_shape(terms.front(), t, "add_n");
  Tensor out = OpAccess::make(terms.front().rows(), terms.front().cols(), rec);
  const std::size_t n = out.values().size();
  for (const Tensor& t : terms)
    for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] += t.values()[i];
  if (rec) {
    std::vector<NodePtr> parents;
    parents.reserve(terms.size());
    for (const Tensor& t : terms) parents.push_back(OpAccess::node(t));
    NodePtr on = OpAccess::node(out);
    OpAccess::record([parents, on, n] {
      const double* g = on->grad.data();
      for (const NodePtr& p : parents) {
        if (!p->requires_grad) continue;
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += g[i];
      }
    });
  }
  return out;
}

Tensor scalar_mul(const Tensor& t, double c) {
  const bool rec = recording({&t});
  Tensor out = OpAccess::make(t.rows(), t.cols(), rec);
  const std::size_t n = t.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = c * t.values()[i];
  if (rec) {
    NodePtr tn = OpAccess::node(t), on = OpAccess::node(out);
    OpAccess::record([tn, on, c, n] {
      if (!tn->requires_grad) return;
      for (std::size_t i = 0; i < n; ++i) tn->grad[i] += c * on->grad[i];
    });
  }
  return out;
}

Tensor scale(const Tensor& s, const Tensor& t) {
  if (!s.is_scalar()) throw ShapeError("scale: coefficient must be 1x1");
  const bool rec = recording({&s, &t});
  Tensor out = OpAccess::make(t.rows(), t.cols(), rec);
  const double c = s.values()[0];
  const std::size_t n = t.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = c * t.values()[i];
  if (rec) {
    NodePtr sn = OpAccess::node(s), tn = OpAccess::node(t), on = OpAccess::node(out);
    OpAccess::record([sn, tn, on, n] {
      const double* g = on->grad.data();
      if (sn->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * tn->values[i];
        sn->grad[0] += acc;
      }
      if (tn->requires_grad) {
        const double c = sn->values[0];
        for (std::size_t i = 0; i < n; ++i) tn->grad[i] += c * g[i];
      }
    });
  }
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  const bool rec = recording({&a, &b});
  Tensor out = OpAccess::make(a.rows(), a.cols(), rec);
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = a.values()[i] * b.values()[i];
  if (rec) {
    NodePtr an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out);
    OpAccess::record([an, bn, on, n] {
      const double* g = on->grad.data();
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * bn->values[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i] * an->values[i];
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Dfn>
Tensor unary_elementwise(const Tensor& t, Fwd fwd, Dfn dfn) {
  const bool rec = recording({&t});
  Tensor out = OpAccess::make(t.rows(), t.cols(), rec);
  const std::size_t n = t.values().size();
  for (std::size_t i = 0; i < n; ++i) out.values_mut()[i] = fwd(t.values()[i]);
  if (rec) {
    NodePtr tn = OpAccess::node(t), on = OpAccess::node(out);
    OpAccess::record([tn, on, n, dfn] {
      if (!tn->requires_grad) return;
      for (std::size_t i = 0; i < n; ++i) {
        tn->grad[i] += on->grad[i] * dfn(tn->values[i], on->values[i]);
      }
    });
  }
  return out;
}

}  // namespace

Tensor relu(const Tensor& t) {
  return unary_elementwise(
      t, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& t) {
  return unary_elementwise(
      t, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh_op(const Tensor& t) {
  return unary_elementwise(
      t, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor softplus(const Tensor& t) {
  return unary_elementwise(
      t,
      [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor abs_op(const Tensor& t) {
  // Subgradient at 0 is 0.
  return unary_elementwise(
      t, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor mean(const Tensor& t) {
  if (t.size() == 0) throw ShapeError("mean: empty tensor");
  const bool rec = recording({&t});
  Tensor out = OpAccess::make(1, 1, rec);
  const std::size_t n = t.values().size();
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  out.values_mut()[0] = acc / static_cast<double>(n);
  if (rec) {
    NodePtr tn = OpAccess::node(t), on = OpAccess::node(out);
    OpAccess::record([tn, on, n] {
      if (!tn->requires_grad) return;
      const double g = on->grad[0] / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) tn->grad[i] += g;
    });
  }
  return out;
}

Tensor sum(const Tensor& t) {
  if (t.size() == 0) throw ShapeError("sum: empty tensor");
  const bool rec = recording({&t});
  Tensor out = OpAccess::make(1, 1, rec);
  double acc = 0.0;
  for (double v : t.values()) acc += v;
  out.values_mut()[0] = acc;
  if (rec) {
    NodePtr tn = OpAccess::node(t), on = OpAccess::node(out);
    const std::size_t n = t.values().size();
    OpAccess::record([tn, on, n] {
      if (!tn->requires_grad) return;
      const double g = on->grad[0];
      for (std::size_t i = 0; i < n; ++i) tn->grad[i] += g;
    });
  }
  return out;
}

Tensor inner_product(const Tensor& a, const Tensor& b) {
  require_col_vector(a, "inner_product");
  require_col_vector(b, "inner_product");
  require_same_shape(a, b, "inner_product");
  const bool rec = recording({&a, &b});
  Tensor out = OpAccess::make(1, 1, rec);
  const std::size_t n = a.values().size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a.values()[i] * b.values()[i];
  out.values_mut()[0] = acc;
  if (rec) {
    NodePtr an = OpAccess::node(a), bn = OpAccess::node(b), on = OpAccess::node(out);
    OpAccess::record([an, bn, on, n] {
      const double g = on->grad[0];
      if (an->requires_grad)
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += g * bn->values[i];
      if (bn->requires_grad)
        for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g * an->values[i];
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: empty part list");
  const int cols = parts.front().cols();
  int rows = 0;
  bool rec = false;
  for (const Tensor& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += p.rows();
    if (g_active_tape != nullptr && p.requires_grad()) rec = true;
  }
  Tensor out = OpAccess::make(rows, cols, rec);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.values_mut().begin() + offset);
    offset += p.values().size();
  }
  if (rec) {
    std::vector<NodePtr> parents;
    parents.reserve(parts.size());
    for (const Tensor& p : parts) parents.push_back(OpAccess::node(p));
    NodePtr on = OpAccess::node(out);
    OpAccess::record([parents, on] {
      std::size_t off = 0;
      for (const NodePtr& p : parents) {
        const std::size_t n = p->values.size();
        if (p->requires_grad) {
          for (std::size_t i = 0; i < n; ++i) p->grad[i] += on->grad[off + i];
        }
        off += n;
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& t, int row_begin, int row_count) {
  if (row_begin < 0 || row_count < 0 || row_begin + row_count > t.rows()) {
    throw ShapeError("slice_rows: range out of bounds");
  }
  const int cols = t.cols();
  const bool rec = recording({&t});
  Tensor out = OpAccess::make(row_count, cols, rec);
  const std::size_t begin = static_cast<std::size_t>(row_begin) * cols;
  const std::size_t count = static_cast<std::size_t>(row_count) * cols;
  std::copy(t.values().begin() + begin, t.values().begin() + begin + count,
            out.values_mut().begin());
  if (rec) {
    NodePtr tn = OpAccess::node(t), on = OpAccess::node(out);
    OpAccess::record([tn, on, begin, count] {
      if (!tn->requires_grad) return;
      for (std::size_t i = 0; i < count; ++i) tn->grad[begin + i] += on->grad[i];
    });
  }
  return out;
}

Tensor softmax(const Tensor& v) {
  require_col_vector(v, "softmax");
  if (v.rows() == 0) throw ShapeError("softmax: empty vector");
  if (!all_finite(v)) throw NumericalError("softmax: non-finite input");
  const int n = v.rows();
  const bool rec = recording({&v});
  Tensor out = OpAccess::make(n, 1, rec);
  double mx = v.values()[0];
  for (double x : v.values()) mx = std::max(mx, x);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const double e = std::exp(v.values()[i] - mx);
    out.values_mut()[i] = e;
    total += e;
  }
  for (int i = 0; i < n; ++i) out.values_mut()[i] /= total;
  if (rec) {
    NodePtr vn = OpAccess::node(v), on = OpAccess::node(out);
    OpAccess::record([vn, on, n] {
      if (!vn->requires_grad) return;
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += on->grad[i] * on->values[i];
      for (int i = 0; i < n; ++i) {
        vn->grad[i] += on->values[i] * (on->grad[i] - dot);
      }
    });
  }
  return out;
}

Tensor l2_normalize(const Tensor& v) {
  require_col_vector(v, "l2_normalize");
  const int n = v.rows();
  const bool rec = recording({&v});
  Tensor out = OpAccess::make(n, 1, rec);
  double norm_sq = 0.0;
  for (double x : v.values()) norm_sq += x * x;
  const double norm = std::sqrt(norm_sq);
  const double denom = std::max(norm, kNormalizeEpsilon);
  for (int i = 0; i < n; ++i) out.values_mut()[i] = v.values()[i] / denom;
  if (rec) {
    NodePtr vn = OpAccess::node(v), on = OpAccess::node(out);
    OpAccess::record([vn, on, n, norm] {
      if (!vn->requires_grad) return;
      if (norm < kNormalizeEpsilon) return;  // zero subgradient in the degenerate case
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += vn->values[i] * on->grad[i];
      const double inv = 1.0 / norm;
      const double inv3 = inv * inv * inv;
      for (int i = 0; i < n; ++i) {
        vn->grad[i] += on->grad[i] * inv - vn->values[i] * dot * inv3;
      }
    });
  }
  return out;
}

Tensor weighted_sum(const Tensor& coeffs, const std::vector<Tensor>& values) {
  require_col_vector(coeffs, "weighted_sum");
  if (static_cast<std::size_t>(coeffs.rows()) != values.size()) {
    throw ShapeError("weighted_sum: coefficient count does not match value count");
  }
  if (values.empty()) throw ContractError("weighted_sum: empty value list");
  const int d = values.front().rows();
  bool rec = g_active_tape != nullptr && coeffs.requires_grad();
  for (const Tensor& v : values) {
    require_col_vector(v, "weighted_sum");
    if (v.rows() != d) throw ShapeError("weighted_sum: value dimension mismatch");
    if (g_active_tape != nullptr && v.requires_grad()) rec = true;
  }
  Tensor out = OpAccess::make(d, 1, rec);
  for (std::size_t j = 0; j < values.size(); ++j) {
    const double c = coeffs.values()[j];
    for (int i = 0; i < d; ++i) out.values_mut()[i] += c * values[j].values()[i];
  }
  if (rec) {
    NodePtr cn = OpAccess::node(coeffs), on = OpAccess::node(out);
    std::vector<NodePtr> vns;
    vns.reserve(values.size());
    for (const Tensor& v : values) vns.push_back(OpAccess::node(v));
    OpAccess::record([cn, vns, on, d] {
      const double* g = on->grad.data();
      for (std::size_t j = 0; j < vns.size(); ++j) {
        if (cn->requires_grad) {
          double acc = 0.0;
          for (int i = 0; i < d; ++i) acc += g[i] * vns[j]->values[i];
          cn->grad[j] += acc;
        }
        if (vns[j]->requires_grad) {
          const double c = cn->values[j];
          for (int i = 0; i < d; ++i) vns[j]->grad[i] += c * g[i];
        }
      }
    });
  }
  return out;
}

}  // namespace gsaf
