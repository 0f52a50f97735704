#ifndef IPVRM_AUTODIFF_HPP_
#define IPVRM_AUTODIFF_HPP_

// Reverse-mode differentiation over small dense graphs.
//
// Every graph value is a row-major matrix of rank at most two; scalars are
// 1x1. A Tape records nodes in creation order, which is a topological order,
// so the backward sweep simply walks the node list in reverse. Parameter
// leaves are bound to named segments of a ParamVector, and the gradient of a
// scalar root is returned with the same layout.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ipvrm::ad {

class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0);
  Matrix(int rows, int cols, std::vector<double> data);

  static Matrix scalar(double v) { return Matrix(1, 1, v); }
  static Matrix column(std::vector<double> data);
  static Matrix row(std::vector<double> data);

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::span<double> row_span(int r) {
    return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }
  std::span<const double> row_span(int r) const {
    return {data_.data() + static_cast<std::size_t>(r) * cols_, static_cast<std::size_t>(cols_)};
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

struct Segment {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// Flat parameter storage with a named, shaped segment layout.
class ParamVector {
 public:
  ParamVector() = default;

  void add_segment(std::string name, int rows, int cols);

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  const std::vector<Segment>& layout() const { return layout_; }
  int segment_index(std::string_view name) const;  // -1 if absent
  const Segment& segment(std::string_view name) const;
  std::span<double> segment_values(std::string_view name);
  std::span<const double> segment_values(std::string_view name) const;
  Matrix segment_matrix(std::string_view name) const;

  bool same_layout(const ParamVector& other) const;
  bool all_finite() const;
  // this += alpha * other
  void axpy(double alpha, const ParamVector& other);
  void fill(double v);
  ParamVector zeros_like() const;

  friend bool operator==(const ParamVector& a, const ParamVector& b);

 private:
  std::vector<Segment> layout_;
  std::vector<double> values_;
};

class Tape;

// Lightweight handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Matrix& value() const;
  int rows() const { return value().rows(); }
  int cols() const { return value().cols(); }
  // Value of a 1x1 node.
  double item() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() = default;
  // `params` must outlive the tape.
  explicit Tape(const ParamVector& params);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var scalar(double v) { return constant(Matrix::scalar(v)); }
  // Leaf bound to a parameter segment; repeated calls return the same node.
  Var param(std::string_view segment);
  bool has_params() const { return params_ != nullptr; }
  const ParamVector& params() const;

  const Matrix& value(Var v) const;
  const Matrix& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  // Gradient buffer of a node, allocated on first access.
  Matrix& grad(int id);
  std::size_t node_count() const { return nodes_.size(); }

  // Records a node. needs_grad is inherited from the parents.
  Var record(Matrix value, std::vector<int> parents, Backward backward);
  // Records a node that never propagates gradient.
  Var record_detached(Matrix value);

  // Reverse sweep from a 1x1 root; returns d(root)/d(params).
  ParamVector backward(Var root);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<int> parents;
    Backward backward;
    bool needs_grad = false;
    int segment = -1;
  };

  const ParamVector* params_ = nullptr;
  std::vector<Node> nodes_;
  std::vector<int> param_nodes_;
};

// --- graph operations ------------------------------------------------------
//
// Binary elementwise ops accept a right operand that is the same shape as the
// left, 1x1, 1 x cols (row broadcast) or rows x 1 (column broadcast).

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var shift(Var a, double s);
Var neg(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
// Row-wise log-softmax.
Var log_softmax_rows(Var a);
Var sum(Var a);
Var mean(Var a);
// rows x 1 vector of per-row sums.
Var sum_rows(Var a);
// Row-wise running sum along columns.
Var cumsum_rows(Var a);
// out(r, :) = table(indices[r], :)
Var gather_rows(Var table, std::vector<int> indices);
// out(r, 0) = a(r, cols[r])
Var pick(Var a, std::vector<int> cols);
Var concat_cols(const std::vector<Var>& parts);
Var reshape(Var a, int rows, int cols);
// Elementwise minimum; ties route the gradient to `a`.
Var minimum(Var a, Var b);
// Elementwise clamp; zero gradient where the bound is active.
Var clamp(Var a, double lo, double hi);
// Identity in the forward pass, zero gradient in the backward pass.
Var stop_gradient(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return neg(a); }

// --- evaluation --------------------------------------------------------------

using LossBuilder = std::function<Var(Tape&)>;

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

// Builds the graph on a tape bound to `params` and returns the scalar root
// value with its gradient. Throws ContractError for a non-scalar root and
// NumericalError for a non-finite root.
LossAndGrad eval_with_grad(const LossBuilder& builder, const ParamVector& params);
// Forward pass only.
double evaluate(const LossBuilder& builder, const ParamVector& params);

// --- stable scalar primitives ------------------------------------------------

double sigmoid(double x);
double log_sigmoid(double x);
// Throws DomainError outside the open interval (0, 1).
double logit(double p);
std::vector<double> log_softmax(std::span<const double> scores);
double log_sum_exp(std::span<const double> xs);

}  // namespace ipvrm::ad

#endif  // IPVRM_AUTODIFF_HPP_
