#include "ccr/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace ccr::ag {

namespace {

thread_local bool g_grad_enabled = true;

void accumulate(Node& node, const Matrix& g) {
  if (!node.requires_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

Var make(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> bw) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(bw);
    }
  }
  return Var(std::move(node));
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}

void require_scalar(const Var& v, const char* op) {
  if (v.rows() != 1 || v.cols() != 1) {
    throw std::invalid_argument(std::string(op) + ": expected a 1x1 operand");
  }
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix log_softmax_rows(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const double m = a.row(r).maxCoeff();
    const double lse = m + std::log((a.row(r).array() - m).exp().sum());
    out.row(r) = a.row(r).array() - lse;
  }
  return out;
}

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::scalar() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("Var::scalar on non-1x1 value");
  return node_->value(0, 0);
}

void Var::zero_grad() { node_->grad.resize(0, 0); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var constant(Matrix value) { return Var(std::move(value), false); }

Var scalar_constant(double v) { return Var(Matrix::Constant(1, 1, v), false); }

Var detach(const Var& v) { return Var(v.value(), false); }

void backward(const Var& root) {
  require_scalar(root, "backward");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.resize(0, 0);
  }
  root.node()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
}

Var operator+(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make(a.value() + b.value(), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], self.grad);
  });
}

Var operator-(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make(a.value() - b.value(), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    accumulate(*self.parents[1], -self.grad);
  });
}

Var operator-(const Var& a) {
  return make(-a.value(), {a}, [](Node& self) { accumulate(*self.parents[0], -self.grad); });
}

Var hadamard(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "hadamard");
  return make(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad.cwiseProduct(self.parents[1]->value));
    accumulate(*self.parents[1], self.grad.cwiseProduct(self.parents[0]->value));
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a}, [s](Node& self) { accumulate(*self.parents[0], self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  return make(a.value().array() + s, {a},
              [](Node& self) { accumulate(*self.parents[0], self.grad); });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions " + std::to_string(a.cols()) +
                                " and " + std::to_string(b.rows()) + " differ");
  }
  return make(a.value() * b.value(), {a, b}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& bv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad * bv.transpose());
    if (self.parents[1]->requires_grad) accumulate(*self.parents[1], av.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  return make(a.value().transpose(), {a},
              [](Node& self) { accumulate(*self.parents[0], self.grad.transpose()); });
}

Var add_row(const Var& a, const Var& b) {
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw std::invalid_argument("add_row: bias must be 1 x " + std::to_string(a.cols()));
  }
  Matrix out = a.value();
  out.rowwise() += b.value().row(0);
  return make(std::move(out), {a, b}, [](Node& self) {
    accumulate(*self.parents[0], self.grad);
    if (self.parents[1]->requires_grad) accumulate(*self.parents[1], self.grad.colwise().sum());
  });
}

Var scale_rows(const Var& a, const Var& w) {
  if (w.cols() != 1 || w.rows() != a.rows()) {
    throw std::invalid_argument("scale_rows: weight must be " + std::to_string(a.rows()) + " x 1");
  }
  Matrix out = w.value().col(0).asDiagonal() * a.value();
  return make(std::move(out), {a, w}, [](Node& self) {
    const Matrix& av = self.parents[0]->value;
    const Matrix& wv = self.parents[1]->value;
    if (self.parents[0]->requires_grad) {
      accumulate(*self.parents[0], wv.col(0).asDiagonal() * self.grad);
    }
    if (self.parents[1]->requires_grad) {
      accumulate(*self.parents[1], self.grad.cwiseProduct(av).rowwise().sum());
    }
  });
}

Var broadcast(const Var& s, Index rows, Index cols) {
  require_scalar(s, "broadcast");
  return make(Matrix::Constant(rows, cols, s.scalar()), {s}, [](Node& self) {
    accumulate(*self.parents[0], Matrix::Constant(1, 1, self.grad.sum()));
  });
}

Var scale_by(const Var& a, const Var& s) {
  require_scalar(s, "scale_by");
  return make(a.value() * s.scalar(), {a, s}, [](Node& self) {
    const double sv = self.parents[1]->value(0, 0);
    if (self.parents[0]->requires_grad) accumulate(*self.parents[0], self.grad * sv);
    if (self.parents[1]->requires_grad) {
      accumulate(*self.parents[1],
                 Matrix::Constant(1, 1, self.grad.cwiseProduct(self.parents[0]->value).sum()));
    }
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return stable_sigmoid(x); });
  return make(out, {a}, [out](Node& self) {
    accumulate(*self.parents[0],
               self.grad.cwiseProduct(out.cwiseProduct((1.0 - out.array()).matrix())));
  });
}

Var softplus(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  });
  return make(std::move(out), {a}, [](Node& self) {
    const Matrix s = self.parents[0]->value.unaryExpr([](double x) { return stable_sigmoid(x); });
    accumulate(*self.parents[0], self.grad.cwiseProduct(s));
  });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  Matrix out = a.value().unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); });
  return make(std::move(out), {a}, [](Node& self) {
    const Matrix d = self.parents[0]->value.unaryExpr([](double x) {
      const double t = std::tanh(k * (x + c * x * x * x));
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
    });
    accumulate(*self.parents[0], self.grad.cwiseProduct(d));
  });
}

Var relu(const Var& a) {
  return make(a.value().cwiseMax(0.0), {a}, [](Node& self) {
    const Matrix mask =
        self.parents[0]->value.unaryExpr([](double x) { return x > 0 ? 1.0 : 0.0; });
    accumulate(*self.parents[0], self.grad.cwiseProduct(mask));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  return make(a.value().cwiseMax(lo).cwiseMin(hi), {a}, [lo, hi](Node& self) {
    const Matrix mask = self.parents[0]->value.unaryExpr(
        [lo, hi](double x) { return (x > lo && x < hi) ? 1.0 : 0.0; });
    accumulate(*self.parents[0], self.grad.cwiseProduct(mask));
  });
}

Var softmax_rows(const Var& a) {
  Matrix out = log_softmax_rows(a.value()).array().exp();
  return make(out, {a}, [out](Node& self) {
    const Eigen::VectorXd dot = self.grad.cwiseProduct(out).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dot;
    accumulate(*self.parents[0], out.cwiseProduct(g));
  });
}

Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps) {
  const Matrix& x = a.value();
  const Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1 x " + std::to_string(n));
  }
  Matrix xhat(x.rows(), n);
  Eigen::VectorXd inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat * gain.value().row(0).asDiagonal();
  out.rowwise() += bias.value().row(0);
  return make(std::move(out), {a, gain, bias}, [xhat, inv_std](Node& self) {
    const Matrix& g = self.grad;
    if (self.parents[2]->requires_grad) accumulate(*self.parents[2], g.colwise().sum());
    if (self.parents[1]->requires_grad) {
      accumulate(*self.parents[1], g.cwiseProduct(xhat).colwise().sum());
    }
    if (self.parents[0]->requires_grad) {
      const Matrix gx_hat = g * self.parents[1]->value.row(0).asDiagonal();
      Matrix gx(g.rows(), g.cols());
      for (Index r = 0; r < g.rows(); ++r) {
        const double m1 = gx_hat.row(r).mean();
        const double m2 = gx_hat.row(r).cwiseProduct(xhat.row(r)).mean();
        gx.row(r) = inv_std(r) * (gx_hat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
      accumulate(*self.parents[0], gx);
    }
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  const Eigen::VectorXd norms = a.value().rowwise().norm().array().max(eps);
  Matrix out = norms.cwiseInverse().asDiagonal() * a.value();
  return make(out, {a}, [out, norms](Node& self) {
    const Eigen::VectorXd dot = self.grad.cwiseProduct(out).rowwise().sum();
    Matrix g = self.grad - dot.asDiagonal() * out;
    accumulate(*self.parents[0], norms.cwiseInverse().asDiagonal() * g);
  });
}

Var cross_entropy_rows(const Var& logits, std::span<const int> targets) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(targets.size()) != z.rows()) {
    throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(z.rows()) + " rows");
  }
  if (z.rows() == 0) throw std::invalid_argument("cross_entropy_rows: no rows");
  for (int t : targets) {
    if (t < 0 || t >= z.cols()) {
      throw std::out_of_range("cross_entropy_rows: target id " + std::to_string(t) +
                              " outside vocabulary of size " + std::to_string(z.cols()));
    }
  }
  const Matrix lsm = log_softmax_rows(z);
  double loss = 0.0;
  for (Index r = 0; r < z.rows(); ++r) loss -= lsm(r, targets[r]);
  loss /= static_cast<double>(z.rows());
  std::vector<int> tg(targets.begin(), targets.end());
  return make(Matrix::Constant(1, 1, loss), {logits}, [lsm, tg](Node& self) {
    Matrix g = lsm.array().exp();
    for (Index r = 0; r < g.rows(); ++r) g(r, tg[r]) -= 1.0;
    g *= self.grad(0, 0) / static_cast<double>(g.rows());
    accumulate(*self.parents[0], g);
  });
}

Var kl_rows(const Var& p_logits, const Var& q_logits) {
  require_same_shape(p_logits.value(), q_logits.value(), "kl_rows");
  const Matrix lp = log_softmax_rows(p_logits.value());
  const Matrix lq = log_softmax_rows(q_logits.value());
  const Matrix p = lp.array().exp();
  const Eigen::VectorXd per_row = p.cwiseProduct(lp - lq).rowwise().sum();
  const double rows = static_cast<double>(lp.rows());
  return make(Matrix::Constant(1, 1, per_row.sum() / rows), {p_logits, q_logits},
              [lp, lq, p, per_row, rows](Node& self) {
                const double g = self.grad(0, 0) / rows;
                if (self.parents[0]->requires_grad) {
                  Matrix d = lp - lq;
                  d.colwise() -= per_row;
                  accumulate(*self.parents[0], p.cwiseProduct(d) * g);
                }
                if (self.parents[1]->requires_grad) {
                  accumulate(*self.parents[1], (Matrix(lq.array().exp()) - p) * g);
                }
              });
}

Var gather_rows(const Var& a, std::span<const int> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) {
      throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    }
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make(std::move(out), {a}, [idx](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    accumulate(*self.parents[0], g);
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw std::out_of_range("slice_cols: range out of bounds");
  }
  return make(a.value().middleCols(start, count), {a}, [start, count](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    g.middleCols(start, count) = self.grad;
    accumulate(*self.parents[0], g);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  Matrix out(parts[0].rows(), total);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return make(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
    Index off = 0;
    for (auto& parent : self.parents) {
      const Index c = parent->value.cols();
      if (parent->requires_grad) accumulate(*parent, self.grad.middleCols(off, c));
      off += c;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, parts[0].cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return make(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
    Index off = 0;
    for (auto& parent : self.parents) {
      const Index r = parent->value.rows();
      if (parent->requires_grad) accumulate(*parent, self.grad.middleRows(off, r));
      off += r;
    }
  });
}

Var element(const Var& a, Index r, Index c) {
  if (r < 0 || r >= a.rows() || c < 0 || c >= a.cols()) {
    throw std::out_of_range("element: index out of bounds");
  }
  return make(Matrix::Constant(1, 1, a.value()(r, c)), {a}, [r, c](Node& self) {
    Matrix g = Matrix::Zero(self.parents[0]->value.rows(), self.parents[0]->value.cols());
    g(r, c) = self.grad(0, 0);
    accumulate(*self.parents[0], g);
  });
}

Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw std::invalid_argument("mean_rows: no rows");
  return make(a.value().colwise().mean(), {a}, [](Node& self) {
    const Index n = self.parents[0]->value.rows();
    Matrix g = self.grad.replicate(n, 1) / static_cast<double>(n);
    accumulate(*self.parents[0], g);
  });
}

Var sum(const Var& a) {
  return make(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& self) {
    const auto& v = self.parents[0]->value;
    accumulate(*self.parents[0], Matrix::Constant(v.rows(), v.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty operand");
  return make(Matrix::Constant(1, 1, a.value().sum() / n), {a}, [n](Node& self) {
    const auto& v = self.parents[0]->value;
    accumulate(*self.parents[0], Matrix::Constant(v.rows(), v.cols(), self.grad(0, 0) / n));
  });
}

Var squared_norm(const Var& a) {
  return make(Matrix::Constant(1, 1, a.value().squaredNorm()), {a}, [](Node& self) {
    accumulate(*self.parents[0], 2.0 * self.grad(0, 0) * self.parents[0]->value);
  });
}

Var sum_scalars(std::span<const Var> parts) {
  double total = 0.0;
  for (const auto& p : parts) {
    require_scalar(p, "sum_scalars");
    total += p.scalar();
  }
  return make(Matrix::Constant(1, 1, total), std::vector<Var>(parts.begin(), parts.end()),
              [](Node& self) {
                for (auto& parent : self.parents) accumulate(*parent, self.grad);
              });
}

Var gaussian_profile(const Var& center, const Var& width, Index frames) {
  require_scalar(center, "gaussian_profile");
  require_scalar(width, "gaussian_profile");
  if (frames < 2) throw std::invalid_argument("gaussian_profile: need at least 2 frames");
  const double c = center.scalar();
  const double s = width.scalar();
  if (!(s > 0.0)) throw std::invalid_argument("gaussian_profile: width must be positive");

  Eigen::VectorXd pos(frames);
  for (Index t = 0; t < frames; ++t) pos(t) = static_cast<double>(t) / static_cast<double>(frames - 1);
  const Eigen::VectorXd expo = -(pos.array() - c).square() / (2.0 * s * s);
  Index peak = 0;
  expo.maxCoeff(&peak);
  Matrix out = (expo.array() - expo(peak)).exp().matrix();

  return make(out, {center, width}, [out, pos, peak, c, s](Node& self) {
    const Eigen::VectorXd g = self.grad.col(0).cwiseProduct(out.col(0));
    if (self.parents[0]->requires_grad) {
      const Eigen::VectorXd d = (pos.array() - pos(peak)) / (s * s);
      accumulate(*self.parents[0], Matrix::Constant(1, 1, g.dot(d)));
    }
    if (self.parents[1]->requires_grad) {
      const double peak_sq = (pos(peak) - c) * (pos(peak) - c);
      const Eigen::VectorXd d = ((pos.array() - c).square() - peak_sq) / (s * s * s);
      accumulate(*self.parents[1], Matrix::Constant(1, 1, g.dot(d)));
    }
  });
}

Var dropout(const Var& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  Matrix mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask(i) = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
  return make(a.value().cwiseProduct(mask), {a}, [mask](Node& self) {
    accumulate(*self.parents[0], self.grad.cwiseProduct(mask));
  });
}

}  // namespace ccr::ag
