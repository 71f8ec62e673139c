#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hallucheck::ad {

using Mat = Eigen::MatrixXd;

/// A named trainable (or frozen) tensor. Gradients from Tape::backward
/// accumulate into `grad` when the parameter was entered with Tape::param.
struct Param {
  std::string name;
  Mat value;
  Mat grad;

  void zero_grad() { grad = Mat::Zero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

/// Reverse-mode tape over dense double matrices. Single use: build the graph
/// with the ops below, call backward() once on a 1x1 result.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad)>;

  Var constant(Mat v);
  /// Leaf whose gradient is added to p.grad on backward. p must outlive the tape.
  Var param(Param& p);
  Var make(Mat value, std::vector<int> parents, Backward back);

  void backward(Var root);
  /// Adds g to the gradient of node `id` if it needs one.
  void accumulate(int id, const Mat& g);
  bool needs_grad(int id) const { return nodes_[id].needs; }

  const Mat& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  /// Bytes held by node values (a proxy for activation memory).
  std::size_t bytes() const { return bytes_; }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs = false;
    Backward back;
    Param* param = nullptr;
  };
  std::vector<Node> nodes_;
  std::size_t bytes_ = 0;
  bool done_ = false;
};

using Index = std::shared_ptr<const std::vector<int>>;

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var div(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(Var a, Var row);
Var tanh(Var a);
Var silu(Var a);
Var sigmoid(Var a);
Var square(Var a);
Var concat_cols(const std::vector<Var>& parts);
Var sum(Var a);
Var mean(Var a);
/// Column means, 1 x cols.
Var row_mean(Var a);
/// out(r, c) = a.flat[idx[r * cols + c]] with row-major flat indexing; -1 gives 0.
Var gather(Var a, Index idx, int rows, int cols);
/// Each row divided by max(norm, eps).
Var normalize_rows(Var a, double eps = 1e-12);
/// Row-wise dot products, n x 1.
Var rowwise_dot(Var a, Var b);

}  // namespace hallucheck::ad
