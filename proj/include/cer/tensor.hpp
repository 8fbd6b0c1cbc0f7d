#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cer {

using Index = Eigen::Index;

// Dense row-major storage templated on scalar: float for training, double for
// gradient checking.
template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<Index>;

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

template <class S>
struct TensorPayload {
  Shape shape;
  Mat<S> value;  // (numel / last dim) x (last dim)
  Mat<S> grad;
  bool requires_grad = false;
  bool grad_ready = false;
};

// Shared-payload handle onto a dense array plus its (lazily allocated)
// gradient buffer. An n-d shape is stored flattened with the last dimension
// as the matrix column dimension; ops interpret leading dimensions themselves.
template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorPayload<S>>();
    t.d_->shape = std::move(shape);
    const Index n = shape_numel(t.d_->shape);
    const Index inner = t.d_->shape.empty() ? 1 : t.d_->shape.back();
    if (inner <= 0 || n % inner != 0)
      throw std::invalid_argument("Tensor: bad shape " + shape_str(t.d_->shape));
    t.d_->value = Mat<S>::Zero(n / inner, inner);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S v) {
    Tensor t = zeros({1});
    t.value()(0, 0) = v;
    return t;
  }

  // Wraps a matrix as a 2-d tensor.
  static Tensor from_matrix(Mat<S> m, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorPayload<S>>();
    t.d_->shape = {m.rows(), m.cols()};
    t.d_->value = std::move(m);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  // Wraps a matrix whose layout already matches `shape`'s flattening.
  static Tensor from_matrix(Mat<S> m, Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorPayload<S>>();
    const Index n = shape_numel(shape);
    const Index inner = shape.empty() ? 1 : shape.back();
    if (m.cols() != inner || m.rows() * m.cols() != n)
      throw std::invalid_argument("Tensor: matrix does not match shape " + shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(m);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }

  const Shape& shape() const { return d_->shape; }

  // dim(-1) is the innermost dimension.
  Index dim(int i) const {
    const int nd = static_cast<int>(d_->shape.size());
    if (i < 0) i += nd;
    return d_->shape[static_cast<std::size_t>(i)];
  }

  int ndim() const { return static_cast<int>(d_->shape.size()); }
  Index numel() const { return d_->value.size(); }
  Index rows() const { return d_->value.rows(); }
  Index cols() const { return d_->value.cols(); }

  // Handle semantics: a const Tensor still refers to mutable shared storage,
  // so the accessors below are const like a shared_ptr's dereference.
  Mat<S>& value() const { return d_->value; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool b) const { d_->requires_grad = b; }

  // Gradient buffer, allocated as zeros on first touch.
  Mat<S>& grad() const {
    if (!d_->grad_ready) {
      d_->grad = Mat<S>::Zero(d_->value.rows(), d_->value.cols());
      d_->grad_ready = true;
    }
    return d_->grad;
  }

  bool grad_allocated() const { return d_->grad_ready; }

  void zero_grad() const {
    if (d_->grad_ready) d_->grad.setZero();
  }

  S item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor has " + shape_str(d_->shape));
    return d_->value(0, 0);
  }

  // Value copy detached from any graph.
  Tensor detached() const {
    Tensor t;
    t.d_ = std::make_shared<TensorPayload<S>>();
    t.d_->shape = d_->shape;
    t.d_->value = d_->value;
    return t;
  }

  bool same_payload(const Tensor& o) const { return d_ == o.d_; }

 private:
  std::shared_ptr<TensorPayload<S>> d_;
};

// Reverse-mode tape. Ops append one backward record as they execute, so the
// record order is a topological order of the graph; backward() replays the
// records exactly once in reverse and then consumes the tape. Gradients
// accumulate additively, which handles tensors feeding multiple consumers.
template <class S>
class Tape {
 public:
  void record(std::function<void()> fn) { records_.push_back(std::move(fn)); }

  std::size_t size() const { return records_.size(); }

  void clear() { records_.clear(); }

  void backward(Tensor<S> loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be a defined scalar tensor");
    loss.grad()(0, 0) += S(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    records_.clear();
  }

 private:
  std::vector<std::function<void()>> records_;
};

}  // namespace cer
