#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <vector>

#include "mdn/error.hpp"
#include "mdn/types.hpp"

namespace mdn::ad {

class Tape;

// Handle to a matrix value recorded on a Tape. Cheap to copy; valid for the
// lifetime of its tape.
class Var {
 public:
  Var() = default;

  const Mat& value() const;
  const Mat& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Records matrix operations in creation order and replays their adjoints in
// reverse. Inputs of a node always have smaller ids than the node, so the
// recorded graph is acyclic by construction.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& out_grad)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var parameter(Mat value) { return push(std::move(value), true, nullptr); }

  // Records a node computed from `inputs`. `backward` receives the node's
  // output gradient and must accumulate into the inputs via accumulate().
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    const std::size_t next = nodes_.size();
    for (const Var& in : inputs) {
      MDN_CHECK(in.tape_ == this, ErrorCode::kInternal, "operand belongs to another tape");
      MDN_CHECK(in.id_ < next, ErrorCode::kInternal, "tape ordering violated (cycle)");
      needs = needs || nodes_[in.id_].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Mat& value(const Var& v) const { return nodes_[v.id_].value; }
  const Mat& grad(const Var& v) const { return nodes_[v.id_].grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.id_].requires_grad; }

  // Adds g into the gradient slot of v. No-op for constants.
  void accumulate(const Var& v, const Mat& g) {
    Node& node = nodes_[v.id_];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  template <typename Fn>
  void accumulate_with(const Var& v, Fn&& fn) {
    Node& node = nodes_[v.id_];
    if (!node.requires_grad) return;
    if (node.grad.size() == 0) node.grad = Mat::Zero(node.value.rows(), node.value.cols());
    fn(node.grad);
  }

  /// Reverse sweep from a 1x1 loss. Parameters unreachable from the loss end
  /// with an all-zero gradient.
  void backward(const Var& loss) {
    MDN_CHECK(loss.tape_ == this, ErrorCode::kInternal, "loss belongs to another tape");
    MDN_CHECK(value(loss).rows() == 1 && value(loss).cols() == 1, ErrorCode::kInvalidArgument,
              "backward() needs a scalar loss");
    for (auto& node : nodes_) node.grad.resize(0, 0);
    if (!nodes_[loss.id_].requires_grad) {
      zero_fill_parameters();
      return;
    }
    nodes_[loss.id_].grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.size() == 0) continue;
      node.backward(*this, node.grad);
    }
    zero_fill_parameters();
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool is_parameter = false;
    Backward backward;
  };

  Var push(Mat value, bool requires_grad, Backward backward) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    node.is_parameter = requires_grad && !backward;
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  void zero_fill_parameters() {
    for (auto& node : nodes_) {
      if (node.is_parameter && node.grad.size() == 0) {
        node.grad = Mat::Zero(node.value.rows(), node.value.cols());
      }
    }
  }

  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(*this); }
inline const Mat& Var::grad() const { return tape_->grad(*this); }
inline bool Var::requires_grad() const { return tape_->requires_grad(*this); }

// ---------------------------------------------------------------------------
// Elementary operations

namespace detail {
inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  MDN_CHECK(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::kInvalidArgument,
            std::string(op) + ": shape mismatch");
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  return a.tape()->record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  return a.tape()->record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

inline Var scale(const Var& a, double s) {
  return a.tape()->record(s * a.value(), {a}, [a, s](Tape& t, const Mat& g) {
    t.accumulate(a, s * g);
  });
}

inline Var matmul(const Var& a, const Var& b) {
  MDN_CHECK(a.cols() == b.rows(), ErrorCode::kInvalidArgument, "matmul: inner dimension mismatch");
  return a.tape()->record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

// x (N x C) plus a 1 x C row broadcast to every row.
inline Var add_row(const Var& x, const Var& row) {
  MDN_CHECK(row.rows() == 1 && row.cols() == x.cols(), ErrorCode::kInvalidArgument,
            "add_row: bias shape mismatch");
  Mat out = x.value();
  out.rowwise() += row.value().row(0);
  return x.tape()->record(std::move(out), {x, row}, [x, row](Tape& t, const Mat& g) {
    t.accumulate(x, g);
    if (row.requires_grad()) t.accumulate(row, g.colwise().sum());
  });
}

inline Var relu(const Var& x) {
  Mat out = x.value().cwiseMax(0.0);
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Mat& g) {
    t.accumulate(x, (x.value().array() > 0.0).select(g, 0.0));
  });
}

inline Var sum(const Var& x) {
  Mat out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Mat& g) {
    t.accumulate(x, Mat::Constant(x.rows(), x.cols(), g(0, 0)));
  });
}

inline Var squared_norm(const Var& x) {
  Mat out(1, 1);
  out(0, 0) = x.value().squaredNorm();
  return x.tape()->record(std::move(out), {x}, [x](Tape& t, const Mat& g) {
    t.accumulate(x, 2.0 * g(0, 0) * x.value());
  });
}

inline Var concat_rows(const Var& a, const Var& b) {
  MDN_CHECK(a.cols() == b.cols(), ErrorCode::kInvalidArgument, "concat_rows: column mismatch");
  Mat out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a.value();
  out.bottomRows(b.rows()) = b.value();
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g.topRows(a.rows()));
    t.accumulate(b, g.bottomRows(b.rows()));
  });
}

// Sum of w_k * x_k over scalar (1x1) terms.
inline Var weighted_sum(const std::vector<Var>& terms, const std::vector<double>& weights) {
  MDN_CHECK(!terms.empty() && terms.size() == weights.size(), ErrorCode::kInvalidArgument,
            "weighted_sum: term/weight mismatch");
  Var acc = scale(terms[0], weights[0]);
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, scale(terms[i], weights[i]));
  return acc;
}

}  // namespace mdn::ad
