#include "mpgat/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mpgat {

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dimension in " + shape_str(shape));
  }
  node_ = std::make_shared<TensorNode>();
  node_->shape = std::move(shape);
  node_->value.assign(static_cast<size_t>(numel_of(node_->shape)), fill);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel_of(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("Tensor: " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  node_ = std::make_shared<TensorNode>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(std::move(shape), 0.0, requires_grad);
}

void Tensor::ensure_grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
}

std::vector<double>& Tensor::grad() {
  ensure_grad();
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("Tensor::item: not a scalar, shape " + shape_str(shape()));
  return node_->value[0];
}

static size_t flat_index(const Shape& shape, std::initializer_list<int64_t> idx) {
  if (idx.size() != shape.size())
    throw std::invalid_argument("Tensor::at: rank mismatch");
  auto strides = row_major_strides(shape);
  size_t off = 0, i = 0;
  for (int64_t v : idx) {
    if (v < 0 || v >= shape[i]) throw std::out_of_range("Tensor::at: index out of range");
    off += static_cast<size_t>(v * strides[i]);
    ++i;
  }
  return off;
}

double& Tensor::at(std::initializer_list<int64_t> idx) {
  return node_->value[flat_index(node_->shape, idx)];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  return node_->value[flat_index(node_->shape, idx)];
}

Tensor Tensor::clone() const {
  return Tensor(node_->shape, node_->value, node_->requires_grad);
}

Tensor randn(const Shape& shape, std::mt19937_64& gen, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (double& x : v) x = dist(gen);
  return Tensor(shape, std::move(v), requires_grad);
}

Tensor rand_uniform(const Shape& shape, std::mt19937_64& gen, double lo, double hi,
                    bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (double& x : v) x = dist(gen);
  return Tensor(shape, std::move(v), requires_grad);
}

void Tape::record(std::shared_ptr<TensorNode> out, std::function<void()> fn) {
  records_.push_back({std::move(out), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("Tape::backward: loss must be a defined scalar");
  for (auto& r : records_) {
    r.out->grad.assign(r.out->value.size(), 0.0);
  }
  loss.ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->fn();
}

void Tape::clear() { records_.clear(); }

namespace {
thread_local Tape* t_active_tape = nullptr;
}

Tape* active_tape() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

NoTapeScope::NoTapeScope() : prev_(t_active_tape) { t_active_tape = nullptr; }
NoTapeScope::~NoTapeScope() { t_active_tape = prev_; }

}  // namespace mpgat
