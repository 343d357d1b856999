#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace est {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Tensor;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Receives the gradient flowing into `self` and adds the contribution for each
// parent into parent_grads[i]. An empty span marks a parent that does not need
// a gradient.
using BackwardFn = std::function<void(const Node& self, std::span<const double> grad_out,
                                      std::span<const std::span<double>> parent_grads)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool consumed = false;
  std::uint64_t id = 0;
  std::string name;
  std::string op;
  std::vector<NodePtr> parents;
  BackwardFn backward;
};

}  // namespace detail

// Dense row-major float64 array with an optional autodiff record.
//
// Tensor is a cheap handle: copies share the underlying node, so a parameter
// held by a ParameterStore and by a layer is the same leaf.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor named(std::string name, Shape shape, std::vector<double> data, bool requires_grad = true);

  // Builds the result of a differentiable op. The graph record is dropped when
  // no parent requires a gradient or grad mode is off.
  static Tensor from_op(Shape shape, std::vector<double> data, std::string op, std::vector<Tensor> parents,
                        detail::BackwardFn backward);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data().size(); }

  std::span<const double> data() const;
  // Writable access for leaves (initialization, optimizer updates, finite
  // difference probes). Throws StateError on op results.
  std::span<double> mutable_data();

  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  const std::string& name() const;
  // Identifier used in GradientMap: the name when set, otherwise "#<id>".
  std::string key() const;
  const std::string& op() const;

  // Same data, no history.
  Tensor detach() const;

  const detail::NodePtr& node() const { return node_; }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;
};

bool grad_enabled() noexcept;

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Gradients of a scalar loss with respect to every reachable leaf that
// requires a gradient, keyed by Tensor::key().
class GradientMap {
 public:
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  const std::vector<double>& at(const std::string& key) const;
  const std::vector<double>& of(const Tensor& leaf) const { return at(leaf.key()); }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  void set(const std::string& key, std::vector<double> grad);
  // Element-wise sum; keys missing on either side are treated as zero.
  void accumulate(const GradientMap& other);

  const std::map<std::string, std::vector<double>>& entries() const noexcept { return entries_; }

  // Non-empty when backward found nothing to differentiate.
  std::string warning;

 private:
  std::map<std::string, std::vector<double>> entries_;
};

// Reverse-mode sweep from a scalar loss. Consumes the graph: a second call on
// the same loss throws StateError.
GradientMap backward(const Tensor& loss);

// Multiply-accumulate tally for matmul and conv2d on the current thread.
// Used to cross-check the analytic profiler.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t count() const noexcept;

  static void add(std::uint64_t macs) noexcept;

 private:
  MacCounter* previous_;
  std::uint64_t count_ = 0;
};

}  // namespace est
