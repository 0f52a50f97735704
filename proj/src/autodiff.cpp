#include "ipvrm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <utility>

#include "ipvrm/error.hpp"

namespace ipvrm::ad {

// --- Matrix ------------------------------------------------------------------

Matrix::Matrix(int rows, int cols, double fill)
    : rows_(rows), cols_(cols), data_(static_cast<std::size_t>(rows) * cols, fill) {
  if (rows < 0 || cols < 0) throw ContractError("Matrix: negative dimension");
}

Matrix::Matrix(int rows, int cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (rows < 0 || cols < 0 || data_.size() != static_cast<std::size_t>(rows) * cols) {
    throw ContractError("Matrix: data size does not match shape");
  }
}

Matrix Matrix::column(std::vector<double> data) {
  const int n = static_cast<int>(data.size());
  return Matrix(n, 1, std::move(data));
}

Matrix Matrix::row(std::vector<double> data) {
  const int n = static_cast<int>(data.size());
  return Matrix(1, n, std::move(data));
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// --- ParamVector -------------------------------------------------------------

void ParamVector::add_segment(std::string name, int rows, int cols) {
  if (segment_index(name) >= 0) throw ContractError("ParamVector: duplicate segment " + name);
  Segment seg{std::move(name), rows, cols, values_.size()};
  values_.resize(values_.size() + seg.size(), 0.0);
  layout_.push_back(std::move(seg));
}

int ParamVector::segment_index(std::string_view name) const {
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    if (layout_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const Segment& ParamVector::segment(std::string_view name) const {
  const int i = segment_index(name);
  if (i < 0) throw ContractError("ParamVector: no segment named " + std::string(name));
  return layout_[i];
}

std::span<double> ParamVector::segment_values(std::string_view name) {
  const Segment& s = segment(name);
  return std::span<double>(values_).subspan(s.offset, s.size());
}

std::span<const double> ParamVector::segment_values(std::string_view name) const {
  const Segment& s = segment(name);
  return std::span<const double>(values_).subspan(s.offset, s.size());
}

Matrix ParamVector::segment_matrix(std::string_view name) const {
  const Segment& s = segment(name);
  auto v = segment_values(name);
  return Matrix(s.rows, s.cols, std::vector<double>(v.begin(), v.end()));
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layout_.size() != other.layout_.size()) return false;
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    const Segment& a = layout_[i];
    const Segment& b = other.layout_[i];
    if (a.name != b.name || a.rows != b.rows || a.cols != b.cols) return false;
  }
  return true;
}

bool ParamVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void ParamVector::axpy(double alpha, const ParamVector& other) {
  if (!same_layout(other)) throw ContractError("ParamVector::axpy: layout mismatch");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += alpha * other.values_[i];
}

void ParamVector::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

ParamVector ParamVector::zeros_like() const {
  ParamVector out = *this;
  out.fill(0.0);
  return out;
}

bool operator==(const ParamVector& a, const ParamVector& b) {
  return a.same_layout(b) && a.values_ == b.values_;
}

// --- Var / Tape ----------------------------------------------------------------

const Matrix& Var::value() const {
  if (!tape_) throw ContractError("Var: uninitialized handle");
  return tape_->value(*this);
}

double Var::item() const {
  const Matrix& m = value();
  if (m.rows() != 1 || m.cols() != 1) throw ContractError("Var::item: node is not 1x1");
  return m[0];
}

Tape::Tape(const ParamVector& params)
    : params_(&params), param_nodes_(params.layout().size(), -1) {}

const ParamVector& Tape::params() const {
  if (!params_) throw ContractError("Tape: no parameters bound");
  return *params_;
}

const Matrix& Tape::value(Var v) const {
  if (v.tape_ != this) throw ContractError("Tape: variable belongs to another tape");
  return nodes_[v.id_].value;
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (!n.grad.same_shape(n.value)) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

Var Tape::constant(Matrix value) { return record_detached(std::move(value)); }

Var Tape::record_detached(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(std::string_view segment) {
  const ParamVector& p = params();
  const int idx = p.segment_index(segment);
  if (idx < 0) throw ContractError("Tape::param: no segment named " + std::string(segment));
  if (param_nodes_[idx] >= 0) return Var(this, param_nodes_[idx]);
  Node n;
  n.value = p.segment_matrix(segment);
  n.needs_grad = true;
  n.segment = idx;
  nodes_.push_back(std::move(n));
  param_nodes_[idx] = static_cast<int>(nodes_.size()) - 1;
  return Var(this, param_nodes_[idx]);
}

Var Tape::record(Matrix value, std::vector<int> parents, Backward backward) {
#ifndef NDEBUG
  if (!value.all_finite()) throw NumericalError("non-finite value in graph node");
#endif
  Node n;
  n.value = std::move(value);
  n.needs_grad = std::any_of(parents.begin(), parents.end(),
                             [this](int p) { return nodes_[p].needs_grad; });
  if (n.needs_grad) n.backward = std::move(backward);
  n.parents = std::move(parents);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

ParamVector Tape::backward(Var root) {
  if (root.tape_ != this) throw ContractError("Tape::backward: root belongs to another tape");
  const Matrix& rv = value(root);
  if (rv.rows() != 1 || rv.cols() != 1) throw ContractError("backward: root must be a scalar");
  ParamVector out = params_ ? params_->zeros_like() : ParamVector();
  if (!nodes_[root.id_].needs_grad) return out;
  for (Node& n : nodes_) n.grad = Matrix();
  grad(root.id_)[0] = 1.0;
  for (int id = root.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs_grad || !n.grad.same_shape(n.value)) continue;
    if (n.segment >= 0) {
      const Segment& seg = params_->layout()[n.segment];
      auto dst = out.values().subspan(seg.offset, seg.size());
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad[i];
      continue;
    }
    if (n.backward) n.backward(*this, id);
  }
  return out;
}

// --- operations ----------------------------------------------------------------

namespace {

enum class Bcast { kSame, kScalar, kRow, kCol };

Bcast broadcast_kind(const Matrix& a, const Matrix& b, const char* op) {
  if (a.same_shape(b)) return Bcast::kSame;
  if (b.rows() == 1 && b.cols() == 1) return Bcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  std::ostringstream os;
  os << op << ": incompatible shapes " << a.rows() << "x" << a.cols() << " and " << b.rows()
     << "x" << b.cols();
  throw ContractError(os.str());
}

inline std::size_t bindex(Bcast k, int r, int c, int cols, int bcols) {
  switch (k) {
    case Bcast::kSame: return static_cast<std::size_t>(r) * cols + c;
    case Bcast::kScalar: return 0;
    case Bcast::kRow: return static_cast<std::size_t>(c);
    case Bcast::kCol: return static_cast<std::size_t>(r) * bcols;
  }
  return 0;
}

Tape& same_tape(Var a, Var b) {
  if (!a.valid() || a.tape() != b.tape()) throw ContractError("operands on different tapes");
  return *a.tape();
}

template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const int aid = a.id();
  return t.record(std::move(out), {aid}, [aid, df](Tape& tp, int self) {
    const Matrix& x = tp.value(aid);
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(aid);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

// Elementwise binary op with broadcasting of `b`. dfa/dfb give partials.
template <typename F, typename DA, typename DB>
Var binary(Var a, Var b, const char* name, F f, DA dfa, DB dfb) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  const Bcast k = broadcast_kind(av, bv, name);
  Matrix out(av.rows(), av.cols());
  for (int r = 0; r < av.rows(); ++r) {
    for (int c = 0; c < av.cols(); ++c) {
      out(r, c) = f(av(r, c), bv[bindex(k, r, c, av.cols(), bv.cols())]);
    }
  }
  const int aid = a.id();
  const int bid = b.id();
  return t.record(std::move(out), {aid, bid}, [aid, bid, k, dfa, dfb](Tape& tp, int self) {
    const Matrix& x = tp.value(aid);
    const Matrix& y = tp.value(bid);
    const Matrix& g = tp.grad(self);
    const bool ga_on = tp.needs_grad(aid);
    const bool gb_on = tp.needs_grad(bid);
    for (int r = 0; r < x.rows(); ++r) {
      for (int c = 0; c < x.cols(); ++c) {
        const std::size_t bi = bindex(k, r, c, x.cols(), y.cols());
        const double gv = g(r, c);
        if (ga_on) tp.grad(aid)(r, c) += gv * dfa(x(r, c), y[bi]);
        if (gb_on) tp.grad(bid)[bi] += gv * dfb(x(r, c), y[bi]);
      }
    }
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw ContractError("matmul: inner dimensions differ");
  const int n = av.rows(), k = av.cols(), m = bv.cols();
  Matrix out(n, m);
  for (int i = 0; i < n; ++i) {
    double* orow = &out(i, 0);
    for (int p = 0; p < k; ++p) {
      const double aip = av(i, p);
      if (aip == 0.0) continue;
      const double* brow = bv.row_span(p).data();
      for (int j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  const int aid = a.id(), bid = b.id();
  return t.record(std::move(out), {aid, bid}, [aid, bid](Tape& tp, int self) {
    const Matrix& x = tp.value(aid);
    const Matrix& y = tp.value(bid);
    const Matrix& g = tp.grad(self);
    const int n = x.rows(), k = x.cols(), m = y.cols();
    if (tp.needs_grad(aid)) {
      Matrix& gx = tp.grad(aid);
      for (int i = 0; i < n; ++i) {
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          for (int j = 0; j < m; ++j) acc += g(i, j) * y(p, j);
          gx(i, p) += acc;
        }
      }
    }
    if (tp.needs_grad(bid)) {
      Matrix& gy = tp.grad(bid);
      for (int i = 0; i < n; ++i) {
        for (int p = 0; p < k; ++p) {
          const double xip = x(i, p);
          if (xip == 0.0) continue;
          for (int j = 0; j < m; ++j) gy(p, j) += xip * g(i, j);
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var shift(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sigmoid(Var a) {
  return unary(a, [](double x) { return sigmoid(x); },
               [](double, double y) { return y * (1.0 - y); });
}

Var log_sigmoid(Var a) {
  // d/dx log sigma(x) = 1 - sigma(x) = sigma(-x)
  return unary(a, [](double x) { return log_sigmoid(x); },
               [](double x, double) { return sigmoid(-x); });
}

Var log_softmax_rows(Var a) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (int r = 0; r < av.rows(); ++r) {
    const double lse = log_sum_exp(av.row_span(r));
    for (int c = 0; c < av.cols(); ++c) out(r, c) = av(r, c) - lse;
  }
  const int aid = a.id();
  return t.record(std::move(out), {aid}, [aid](Tape& tp, int self) {
    const Matrix& y = tp.value(self);
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(aid);
    for (int r = 0; r < y.rows(); ++r) {
      double gsum = 0.0;
      for (int c = 0; c < y.cols(); ++c) gsum += g(r, c);
      for (int c = 0; c < y.cols(); ++c) ga(r, c) += g(r, c) - std::exp(y(r, c)) * gsum;
    }
  });
}

Var sum(Var a) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i];
  const int aid = a.id();
  return t.record(Matrix::scalar(s), {aid}, [aid](Tape& tp, int self) {
    const double g = tp.grad(self)[0];
    Matrix& ga = tp.grad(aid);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ContractError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_rows(Var a) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  for (int r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (int c = 0; c < av.cols(); ++c) s += av(r, c);
    out(r, 0) = s;
  }
  const int aid = a.id();
  return t.record(std::move(out), {aid}, [aid](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(aid);
    for (int r = 0; r < ga.rows(); ++r) {
      for (int c = 0; c < ga.cols(); ++c) ga(r, c) += g(r, 0);
    }
  });
}

Var cumsum_rows(Var a) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (int r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (int c = 0; c < av.cols(); ++c) {
      s += av(r, c);
      out(r, c) = s;
    }
  }
  const int aid = a.id();
  return t.record(std::move(out), {aid}, [aid](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(aid);
    for (int r = 0; r < ga.rows(); ++r) {
      double s = 0.0;
      for (int c = ga.cols() - 1; c >= 0; --c) {
        s += g(r, c);
        ga(r, c) += s;
      }
    }
  });
}

Var gather_rows(Var table, std::vector<int> indices) {
  Tape& t = *table.tape();
  const Matrix& tv = table.value();
  Matrix out(static_cast<int>(indices.size()), tv.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const int src = indices[r];
    if (src < 0 || src >= tv.rows()) throw ContractError("gather_rows: index out of range");
    for (int c = 0; c < tv.cols(); ++c) out(static_cast<int>(r), c) = tv(src, c);
  }
  const int tid = table.id();
  return t.record(std::move(out), {tid},
                  [tid, idx = std::move(indices)](Tape& tp, int self) {
                    const Matrix& g = tp.grad(self);
                    Matrix& gt = tp.grad(tid);
                    for (std::size_t r = 0; r < idx.size(); ++r) {
                      for (int c = 0; c < gt.cols(); ++c) gt(idx[r], c) += g(static_cast<int>(r), c);
                    }
                  });
}

Var pick(Var a, std::vector<int> cols) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  if (static_cast<int>(cols.size()) != av.rows()) throw ContractError("pick: one index per row");
  Matrix out(av.rows(), 1);
  for (int r = 0; r < av.rows(); ++r) {
    const int c = cols[r];
    if (c < 0 || c >= av.cols()) throw ContractError("pick: column out of range");
    out(r, 0) = av(r, c);
  }
  const int aid = a.id();
  return t.record(std::move(out), {aid}, [aid, idx = std::move(cols)](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(aid);
    for (std::size_t r = 0; r < idx.size(); ++r) ga(static_cast<int>(r), idx[r]) += g(static_cast<int>(r), 0);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& t = *parts.front().tape();
  const int rows = parts.front().rows();
  int cols = 0;
  std::vector<int> ids;
  std::vector<int> offsets;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ContractError("concat_cols: operands on different tapes");
    if (p.rows() != rows) throw ContractError("concat_cols: row counts differ");
    offsets.push_back(cols);
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix out(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Matrix& pv = parts[k].value();
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < pv.cols(); ++c) out(r, offsets[k] + c) = pv(r, c);
    }
  }
  std::vector<int> parents = ids;
  return t.record(std::move(out), std::move(parents),
                  [ids, offsets](Tape& tp, int self) {
                    const Matrix& g = tp.grad(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!tp.needs_grad(ids[k])) continue;
                      Matrix& gp = tp.grad(ids[k]);
                      for (int r = 0; r < gp.rows(); ++r) {
                        for (int c = 0; c < gp.cols(); ++c) gp(r, c) += g(r, offsets[k] + c);
                      }
                    }
                  });
}

Var reshape(Var a, int rows, int cols) {
  Tape& t = *a.tape();
  const Matrix& av = a.value();
  if (static_cast<std::size_t>(rows) * cols != av.size()) {
    throw ContractError("reshape: element count changes");
  }
  Matrix out(rows, cols, std::vector<double>(av.data().begin(), av.data().end()));
  const int aid = a.id();
  return t.record(std::move(out), {aid}, [aid](Tape& tp, int self) {
    const Matrix& g = tp.grad(self);
    Matrix& ga = tp.grad(aid);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var minimum(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (!av.same_shape(bv)) throw ContractError("minimum: shapes differ");
  Matrix out(av.rows(), av.cols());
  std::vector<char> take_a(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    take_a[i] = av[i] <= bv[i];
    out[i] = take_a[i] ? av[i] : bv[i];
  }
  const int aid = a.id(), bid = b.id();
  return t.record(std::move(out), {aid, bid},
                  [aid, bid, sel = std::move(take_a)](Tape& tp, int self) {
                    const Matrix& g = tp.grad(self);
                    const bool ga_on = tp.needs_grad(aid);
                    const bool gb_on = tp.needs_grad(bid);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      if (sel[i]) {
                        if (ga_on) tp.grad(aid)[i] += g[i];
                      } else if (gb_on) {
                        tp.grad(bid)[i] += g[i];
                      }
                    }
                  });
}

Var clamp(Var a, double lo, double hi) {
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var stop_gradient(Var a) { return a.tape()->record_detached(a.value()); }

// --- evaluation ------------------------------------------------------------------

namespace {

Var build_root(Tape& tape, const LossBuilder& builder) {
  Var root = builder(tape);
  if (!root.valid() || root.tape() != &tape) throw ContractError("loss builder returned a foreign node");
  const Matrix& v = root.value();
  if (v.rows() != 1 || v.cols() != 1) {
    std::ostringstream os;
    os << "loss root must be scalar, got " << v.rows() << "x" << v.cols();
    throw ContractError(os.str());
  }
  if (!std::isfinite(v[0])) throw NumericalError("loss is not finite");
  return root;
}

}  // namespace

LossAndGrad eval_with_grad(const LossBuilder& builder, const ParamVector& params) {
  Tape tape(params);
  Var root = build_root(tape, builder);
  LossAndGrad out;
  out.loss = root.item();
  out.grad = tape.backward(root);
  return out;
}

double evaluate(const LossBuilder& builder, const ParamVector& params) {
  Tape tape(params);
  return build_root(tape, builder).item();
}

// --- scalar primitives -------------------------------------------------------------

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    std::ostringstream os;
    os << "logit: argument " << p << " outside (0, 1)";
    throw DomainError(os.str());
  }
  return std::log(p) - std::log1p(-p);
}

double log_sum_exp(std::span<const double> xs) {
  if (xs.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(xs.begin(), xs.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - mx);
  return mx + std::log(s);
}

std::vector<double> log_softmax(std::span<const double> scores) {
  for (double s : scores) {
    if (!std::isfinite(s)) throw ContractError("log_softmax: non-finite score");
  }
  const double lse = log_sum_exp(scores);
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] - lse;
  return out;
}

}  // namespace ipvrm::ad
