#include "hallucheck/autodiff.hpp"

#include <cmath>

#include "hallucheck/error.hpp"

namespace hallucheck::ad {

const Mat& Var::value() const { return tape->value(id); }

Var Tape::constant(Mat v) { return make(std::move(v), {}, {}); }

Var Tape::param(Param& p) {
  Var v = make(p.value, {}, {});
  nodes_[v.id].needs = true;
  nodes_[v.id].param = &p;
  return v;
}

Var Tape::make(Mat value, std::vector<int> parents, Backward back) {
  if (done_) throw Error("tape already consumed by backward()");
  Node n;
  bytes_ += static_cast<std::size_t>(value.size()) * sizeof(double);
  n.value = std::move(value);
  for (int p : parents) n.needs = n.needs || nodes_[p].needs;
  if (n.needs) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Mat& g) {
  auto& n = nodes_[id];
  if (!n.needs) return;
  if (n.grad.size() == 0) n.grad = g;
  else n.grad += g;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw ValidationError("backward: variable from another tape");
  if (nodes_[root.id].value.size() != 1) throw ShapeMismatch("backward: root must be a scalar");
  done_ = true;
  accumulate(root.id, Mat::Ones(1, 1));
  for (int i = root.id; i >= 0; --i) {
    auto& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.param) {
      if (n.param->grad.size() == 0) n.param->zero_grad();
      n.param->grad += n.grad;
    }
    if (n.back) n.back(*this, n.grad);
    n.grad.resize(0, 0);
  }
}

namespace {

void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch(std::string(op) + ": shapes differ");
}

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.make(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->make(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->make(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ib)) t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  return a.tape->make(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var div(Var a, Var b) {
  same_shape(a, b, "div");
  const int ia = a.id, ib = b.id;
  return a.tape->make(a.value().cwiseQuotient(b.value()), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    const Mat& bv = t.value(ib);
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseQuotient(bv));
    if (t.needs_grad(ib))
      t.accumulate(ib, -g.cwiseProduct(t.value(ia)).cwiseQuotient(bv.cwiseProduct(bv)));
  });
}

Var scale(Var a, double s) {
  const int ia = a.id;
  return a.tape->make(a.value() * s, {ia}, [ia, s](Tape& t, const Mat& g) { t.accumulate(ia, g * s); });
}

Var add_scalar(Var a, double s) {
  const int ia = a.id;
  return a.tape->make(a.value().array() + s, {ia}, [ia](Tape& t, const Mat& g) { t.accumulate(ia, g); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeMismatch("add_row: row must be 1 x cols");
  const int ia = a.id, ir = row.id;
  Mat v = a.value().rowwise() + row.value().row(0);
  return a.tape->make(std::move(v), {ia, ir}, [ia, ir](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    if (t.needs_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var tanh(Var a) {
  const int ia = a.id;
  Mat y = a.value().array().tanh().matrix();
  return a.tape->make(y, {ia}, [ia, y](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var sigmoid(Var a) {
  const int ia = a.id;
  Mat y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return a.tape->make(y, {ia}, [ia, y](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

Var silu(Var a) {
  const int ia = a.id;
  const Mat s = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Mat y = a.value().cwiseProduct(s);
  return a.tape->make(std::move(y), {ia}, [ia, s](Tape& t, const Mat& g) {
    const auto x = t.value(ia).array();
    t.accumulate(ia, g.cwiseProduct((s.array() * (1.0 + x * (1.0 - s.array()))).matrix()));
  });
}

Var square(Var a) {
  const int ia = a.id;
  return a.tape->make(a.value().array().square().matrix(), {ia},
                      [ia](Tape& t, const Mat& g) { t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia))); });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: nothing to concatenate");
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeMismatch("concat_cols: row counts differ");
    cols += p.cols();
    ids.push_back(p.id);
  }
  Mat v(rows, cols);
  std::vector<Eigen::Index> offsets;
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    offsets.push_back(off);
    off += p.cols();
  }
  return parts[0].tape->make(std::move(v), ids, [ids, offsets](Tape& t, const Mat& g) {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (t.needs_grad(ids[i])) t.accumulate(ids[i], g.middleCols(offsets[i], t.value(ids[i]).cols()));
  });
}

Var sum(Var a) {
  const int ia = a.id;
  const auto r = a.rows(), c = a.cols();
  return a.tape->make(Mat::Constant(1, 1, a.value().sum()), {ia},
                      [ia, r, c](Tape& t, const Mat& g) { t.accumulate(ia, Mat::Constant(r, c, g(0, 0))); });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw ValidationError("mean of an empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var row_mean(Var a) {
  const int ia = a.id;
  const auto r = a.rows();
  return a.tape->make(a.value().colwise().mean(), {ia}, [ia, r](Tape& t, const Mat& g) {
    t.accumulate(ia, g.replicate(r, 1) / static_cast<double>(r));
  });
}

Var gather(Var a, Index idx, int rows, int cols) {
  if (!idx || idx->size() != static_cast<std::size_t>(rows) * cols)
    throw ShapeMismatch("gather: index size does not match the output shape");
  const Mat& av = a.value();
  const auto acols = av.cols();
  const auto total = av.size();
  Mat v(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      const int k = (*idx)[static_cast<std::size_t>(r) * cols + c];
      if (k >= total) throw ShapeMismatch("gather: index out of range");
      v(r, c) = k < 0 ? 0.0 : av(k / acols, k % acols);
    }
  const int ia = a.id;
  const auto arows = av.rows();
  return a.tape->make(std::move(v), {ia}, [ia, idx, rows, cols, arows, acols](Tape& t, const Mat& g) {
    Mat ga = Mat::Zero(arows, acols);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        const int k = (*idx)[static_cast<std::size_t>(r) * cols + c];
        if (k >= 0) ga(k / acols, k % acols) += g(r, c);
      }
    t.accumulate(ia, ga);
  });
}

Var normalize_rows(Var a, double eps) {
  const int ia = a.id;
  const Eigen::VectorXd n = a.value().rowwise().norm().cwiseMax(eps);
  Mat y = a.value().array().colwise() / n.array();
  return a.tape->make(y, {ia}, [ia, y, n, eps](Tape& t, const Mat& g) {
    Mat ga(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (n(r) <= eps) {
        ga.row(r) = g.row(r) / eps;  // clamped norm is constant
        continue;
      }
      const double proj = y.row(r).dot(g.row(r));
      ga.row(r) = (g.row(r) - proj * y.row(r)) / n(r);
    }
    t.accumulate(ia, ga);
  });
}

Var rowwise_dot(Var a, Var b) {
  same_shape(a, b, "rowwise_dot");
  const int ia = a.id, ib = b.id;
  Mat v = a.value().cwiseProduct(b.value()).rowwise().sum();
  return a.tape->make(std::move(v), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, t.value(ib).array().colwise() * g.col(0).array());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).array().colwise() * g.col(0).array());
  });
}

}  // namespace hallucheck::ad
