#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace mpgat {

using Shape = std::vector<int64_t>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);
std::vector<int64_t> row_major_strides(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad = false;
};

// Dense row-major array of 64-bit reals. Handle semantics: copies alias the
// same storage, so a parameter can be shared between the model and the
// optimizer while its gradient accumulates in one place.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  double* data() { return node_->value.data(); }
  const double* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  void ensure_grad() const;
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  void zero_grad();

  double item() const;
  double& at(std::initializer_list<int64_t> idx);
  double at(std::initializer_list<int64_t> idx) const;

  Tensor clone() const;  // deep copy of values; grad not copied

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

Tensor randn(const Shape& shape, std::mt19937_64& gen, double stddev = 1.0,
             bool requires_grad = false);
Tensor rand_uniform(const Shape& shape, std::mt19937_64& gen, double lo,
                    double hi, bool requires_grad = false);

// Reverse-mode tape. Ops append one backward rule per produced tensor;
// backward() replays them in reverse order. Leaf gradients accumulate
// across calls, intermediate gradients are reset at the start of each
// replay. A tape belongs to one thread.
class Tape {
 public:
  void record(std::shared_ptr<TensorNode> out, std::function<void()> fn);
  void backward(const Tensor& loss);
  size_t size() const { return records_.size(); }
  void clear();

 private:
  struct Record {
    std::shared_ptr<TensorNode> out;
    std::function<void()> fn;
  };
  std::vector<Record> records_;
};

// Thread-local recording target; null means ops run untracked.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording, e.g. for finite-difference probes inside a scope
// that is otherwise taped.
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* prev_;
};

}  // namespace mpgat
