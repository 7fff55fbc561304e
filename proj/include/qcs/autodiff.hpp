#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

namespace qcs::ad {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Reverse-mode autodiff over Eigen matrices. A Node owns its forward value,
// its accumulated gradient, and a closure that pushes the gradient into its
// parents. Graphs are built implicitly by the free functions below; backward()
// walks the DAG in reverse topological (postorder) order. Nothing here is
// global, so independent graphs can be built and differentiated concurrently.
struct Node {
  Mat value;
  Mat grad;  // empty until touched by backward() or an optimizer
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // may be empty for leaves/constants

  void ensure_grad() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
  }
  double scalar() const { return value(0, 0); }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Mat v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

inline Var scalar_const(double v) { return constant(Mat::Constant(1, 1, v)); }

// A trainable leaf.
inline Var leaf(Mat v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->ensure_grad();
  return n;
}

// Value copy, cut off from the graph.
inline Var detach(const Var& x) { return constant(x->value); }

namespace detail {

inline Var make(Mat value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  bool needs = false;
  for (const auto& p : n->parents) needs = needs || p->requires_grad;
  n->requires_grad = needs;
  if (needs) n->backprop = std::move(backprop);
  return n;
}

inline void accum(const Var& p, const Mat& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  p->grad += g;
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  if (a->value.cols() != b->value.rows())
    throw std::invalid_argument("matmul: inner dimensions differ");
  return detail::make(a->value * b->value, {a, b}, [](Node& n) {
    const auto& a = n.parents[0];
    const auto& b = n.parents[1];
    if (a->requires_grad) detail::accum(a, n.grad * b->value.transpose());
    if (b->requires_grad) detail::accum(b, a->value.transpose() * n.grad);
  });
}

inline Var add(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw std::invalid_argument("add: shape mismatch");
  return detail::make(a->value + b->value, {a, b}, [](Node& n) {
    detail::accum(n.parents[0], n.grad);
    detail::accum(n.parents[1], n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw std::invalid_argument("sub: shape mismatch");
  return detail::make(a->value - b->value, {a, b}, [](Node& n) {
    detail::accum(n.parents[0], n.grad);
    detail::accum(n.parents[1], -n.grad);
  });
}

// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
  if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
    throw std::invalid_argument("mul: shape mismatch");
  return detail::make(a->value.cwiseProduct(b->value), {a, b}, [](Node& n) {
    detail::accum(n.parents[0], n.grad.cwiseProduct(n.parents[1]->value));
    detail::accum(n.parents[1], n.grad.cwiseProduct(n.parents[0]->value));
  });
}

inline Var scale(const Var& a, double c) {
  return detail::make(a->value * c, {a}, [c](Node& n) { detail::accum(n.parents[0], n.grad * c); });
}

inline Var shift(const Var& a, double c) {
  return detail::make((a->value.array() + c).matrix(), {a},
                      [](Node& n) { detail::accum(n.parents[0], n.grad); });
}

// Adds a column vector to every column of a matrix.
inline Var add_broadcast_col(const Var& m, const Var& v) {
  if (v->value.cols() != 1 || m->value.rows() != v->value.rows())
    throw std::invalid_argument("add_broadcast_col: shape mismatch");
  Mat out = m->value;
  out.colwise() += Vec(v->value.col(0));
  return detail::make(std::move(out), {m, v}, [](Node& n) {
    detail::accum(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) detail::accum(n.parents[1], n.grad.rowwise().sum());
  });
}

inline Var tanh_(const Var& a) {
  Mat y = a->value.array().tanh().matrix();
  return detail::make(y, {a}, [y](Node& n) {
    detail::accum(n.parents[0], n.grad.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var sigmoid(const Var& a) {
  Mat y = a->value.unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  });
  return detail::make(y, {a}, [y](Node& n) {
    detail::accum(n.parents[0], n.grad.cwiseProduct((y.array() * (1.0 - y.array())).matrix()));
  });
}

inline Var relu(const Var& a) {
  Mat y = a->value.cwiseMax(0.0);
  return detail::make(y, {a}, [](Node& n) {
    Mat mask = (n.parents[0]->value.array() > 0.0).cast<double>().matrix();
    detail::accum(n.parents[0], n.grad.cwiseProduct(mask));
  });
}

inline Var transpose(const Var& a) {
  return detail::make(a->value.transpose(), {a},
                      [](Node& n) { detail::accum(n.parents[0], n.grad.transpose()); });
}

// Row block [start, start+len).
inline Var rows(const Var& a, Eigen::Index start, Eigen::Index len) {
  if (start < 0 || len < 1 || start + len > a->value.rows())
    throw std::invalid_argument("rows: block out of range");
  return detail::make(a->value.middleRows(start, len), {a}, [start, len](Node& n) {
    const auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.middleRows(start, len) += n.grad;
  });
}

// Concatenates column vectors (or matrices) side by side.
inline Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: no parts");
  Eigen::Index rows = parts[0]->value.rows(), cols = 0;
  for (const auto& p : parts) {
    if (p->value.rows() != rows) throw std::invalid_argument("hcat: row mismatch");
    cols += p->value.cols();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p->value.cols()) = p->value;
    at += p->value.cols();
  }
  return detail::make(std::move(out), parts, [](Node& n) {
    Eigen::Index at = 0;
    for (auto& p : n.parents) {
      Eigen::Index w = p->value.cols();
      if (p->requires_grad) {
        p->ensure_grad();
        p->grad += n.grad.middleCols(at, w);
      }
      at += w;
    }
  });
}

// Stacks matrices vertically.
inline Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vcat: no parts");
  Eigen::Index cols = parts[0]->value.cols(), rows = 0;
  for (const auto& p : parts) {
    if (p->value.cols() != cols) throw std::invalid_argument("vcat: column mismatch");
    rows += p->value.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p->value.rows()) = p->value;
    at += p->value.rows();
  }
  return detail::make(std::move(out), parts, [](Node& n) {
    Eigen::Index at = 0;
    for (auto& p : n.parents) {
      Eigen::Index h = p->value.rows();
      if (p->requires_grad) {
        p->ensure_grad();
        p->grad += n.grad.middleRows(at, h);
      }
      at += h;
    }
  });
}

inline Var sum(const Var& a) {
  return detail::make(Mat::Constant(1, 1, a->value.sum()), {a}, [](Node& n) {
    const auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    p->grad.array() += n.grad(0, 0);
  });
}

// Sum of 1x1 nodes with fixed coefficients: sum_i w_i * x_i.
inline Var weighted_sum(const std::vector<Var>& xs, const std::vector<double>& ws) {
  if (xs.empty() || xs.size() != ws.size())
    throw std::invalid_argument("weighted_sum: size mismatch or empty");
  double total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i]->value.size() != 1) throw std::invalid_argument("weighted_sum: non-scalar term");
    total += ws[i] * xs[i]->scalar();
  }
  return detail::make(Mat::Constant(1, 1, total), xs, [ws](Node& n) {
    for (std::size_t i = 0; i < n.parents.size(); ++i)
      detail::accum(n.parents[i], n.grad * ws[i]);
  });
}

inline Var add_many(const std::vector<Var>& xs) {
  return weighted_sum(xs, std::vector<double>(xs.size(), 1.0));
}

// Columns of an embedding table selected by id; gradient scatter-adds.
inline Var gather_cols(const Var& table, const std::vector<int>& ids) {
  if (ids.empty()) throw std::invalid_argument("gather_cols: no ids");
  for (int id : ids)
    if (id < 0 || id >= table->value.cols()) throw std::out_of_range("gather_cols: id out of range");
  Mat out(table->value.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = table->value.col(ids[j]);
  return detail::make(std::move(out), {table}, [ids](Node& n) {
    const auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (std::size_t j = 0; j < ids.size(); ++j)
      p->grad.col(ids[j]) += n.grad.col(static_cast<Eigen::Index>(j));
  });
}

// Softmax along a column vector.
inline Var softmax_col(const Var& x) {
  if (x->value.cols() != 1) throw std::invalid_argument("softmax_col: expects a column vector");
  Vec v = x->value.col(0);
  double m = v.maxCoeff();
  Vec e = (v.array() - m).exp();
  Vec y = e / e.sum();
  return detail::make(Mat(y), {x}, [y](Node& n) {
    const auto& p = n.parents[0];
    if (!p->requires_grad) return;
    Vec g = n.grad.col(0);
    double dot = g.dot(y);
    detail::accum(p, Mat(y.cwiseProduct((g.array() - dot).matrix())));
  });
}

// log softmax(x)[k] for a column vector of logits; numerically stable.
inline Var log_softmax_pick(const Var& logits, int k) {
  if (logits->value.cols() != 1)
    throw std::invalid_argument("log_softmax_pick: expects a column vector");
  if (k < 0 || k >= logits->value.rows())
    throw std::out_of_range("log_softmax_pick: index out of range");
  Vec v = logits->value.col(0);
  double m = v.maxCoeff();
  double lse = m + std::log((v.array() - m).exp().sum());
  Vec p = (v.array() - lse).exp();
  double out = v(k) - lse;
  return detail::make(Mat::Constant(1, 1, out), {logits}, [p, k](Node& n) {
    const auto& parent = n.parents[0];
    if (!parent->requires_grad) return;
    double g = n.grad(0, 0);
    Vec gg = -g * p;
    gg(k) += g;
    detail::accum(parent, Mat(gg));
  });
}

// Plain cosine over Eigen vectors; scoring and training share this arithmetic.
inline double cosine_value(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine: dimension mismatch");
  double na = a.norm(), nb = b.norm();
  if (na < 1e-12 || nb < 1e-12) return 0.0;
  return a.dot(b) / (na * nb);
}

// Cosine similarity of two column vectors as a 1x1 node. Below the 1e-12
// norm floor the value and gradient are pinned to zero.
inline Var cosine(const Var& a, const Var& b) {
  if (a->value.cols() != 1 || b->value.cols() != 1 || a->value.rows() != b->value.rows())
    throw std::invalid_argument("cosine: expects equal-length column vectors");
  Vec av = a->value.col(0), bv = b->value.col(0);
  double na = av.norm(), nb = bv.norm();
  bool degenerate = (na < 1e-12 || nb < 1e-12);
  double c = degenerate ? 0.0 : av.dot(bv) / (na * nb);
  return detail::make(Mat::Constant(1, 1, c), {a, b}, [av, bv, na, nb, c, degenerate](Node& n) {
    if (degenerate) return;
    double g = n.grad(0, 0);
    const auto& pa = n.parents[0];
    const auto& pb = n.parents[1];
    if (pa->requires_grad) detail::accum(pa, Mat(g * (bv / (na * nb) - c * av / (na * na))));
    if (pb->requires_grad) detail::accum(pb, Mat(g * (av / (na * nb) - c * bv / (nb * nb))));
  });
}

// Reverse topological sweep from root. Gradients accumulate into leaves; the
// optimizer zeroes parameter grads between steps.
inline void backward(const Var& root) {
  if (root->value.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.size() != 0) n->backprop(*n);
  }
}

}  // namespace qcs::ad
