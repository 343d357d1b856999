#include "est/tensor.hpp"

#include <atomic>
#include <iostream>
#include <sstream>
#include <unordered_map>
#include <utility>

#include "est/errors.hpp"

namespace est {

namespace {

std::atomic<std::uint64_t> next_node_id{1};
thread_local bool grad_mode = true;
thread_local MacCounter* active_counter = nullptr;

detail::NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(make_node(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = est::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value) {
  const auto n = est::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::named(std::string name, Shape shape, std::vector<double> data, bool requires_grad) {
  Tensor t(std::move(shape), std::move(data), requires_grad);
  t.node_->name = std::move(name);
  return t;
}

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::string op, std::vector<Tensor> parents,
                       detail::BackwardFn backward) {
  bool needs_grad = false;
  if (grad_mode) {
    for (const auto& p : parents) needs_grad = needs_grad || p.requires_grad();
  }
  auto node = make_node(std::move(shape), std::move(data), needs_grad);
  node->op = std::move(op);
  if (needs_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return node_->shape[axis];
}

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (!node_->op.empty()) throw StateError("cannot write into the result of op '" + node_->op + "'");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t i) const { return node_->data.at(i); }

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw DimensionError("at(row, col) on tensor of shape " + to_string(shape()));
  return node_->data.at(row * node_->shape[1] + col);
}

std::vector<double> Tensor::to_vector() const { return node_->data; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw StateError("requires_grad can only be toggled on leaves");
  node_->requires_grad = value;
}

bool Tensor::is_leaf() const { return node_->op.empty(); }

const std::string& Tensor::name() const { return node_->name; }

std::string Tensor::key() const { return node_->name.empty() ? "#" + std::to_string(node_->id) : node_->name; }

const std::string& Tensor::op() const { return node_->op; }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

bool grad_enabled() noexcept { return grad_mode; }

NoGradGuard::NoGradGuard() : previous_(grad_mode) { grad_mode = false; }
NoGradGuard::~NoGradGuard() { grad_mode = previous_; }

const std::vector<double>& GradientMap::at(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw StateError("no gradient recorded for '" + key + "'");
  return it->second;
}

void GradientMap::set(const std::string& key, std::vector<double> grad) { entries_[key] = std::move(grad); }

void GradientMap::accumulate(const GradientMap& other) {
  for (const auto& [key, grad] : other.entries_) {
    auto [it, inserted] = entries_.try_emplace(key, grad);
    if (inserted) continue;
    if (it->second.size() != grad.size()) {
      throw DimensionError("gradient length mismatch while accumulating '" + key + "'");
    }
    for (std::size_t i = 0; i < grad.size(); ++i) it->second[i] += grad[i];
  }
}

GradientMap backward(const Tensor& loss) {
  if (!loss.defined()) throw StateError("backward on an undefined tensor");
  const auto& root = loss.node();
  if (root->consumed) throw StateError("graph already consumed by a previous backward call");
  if (loss.numel() != 1) throw DimensionError("backward expects a scalar loss, got shape " + to_string(loss.shape()));

  GradientMap result;
  if (!root->requires_grad) {
    result.warning = "loss does not depend on any tensor that requires a gradient";
    std::clog << "warning: " << result.warning << '\n';
    return result;
  }

  // Iterative post-order DFS over nodes that require a gradient.
  std::vector<detail::Node*> order;
  std::unordered_map<const detail::Node*, std::size_t> index;
  {
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.get(), 0}};
    index.emplace(root.get(), SIZE_MAX);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* parent = node->parents[next++].get();
        if (parent->requires_grad && index.emplace(parent, SIZE_MAX).second) stack.emplace_back(parent, 0);
        continue;
      }
      index[node] = order.size();
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::vector<std::vector<double>> grads(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) grads[i].assign(order[i]->data.size(), 0.0);
  grads[index.at(root.get())][0] = 1.0;

  std::vector<std::span<double>> parent_grads;
  for (std::size_t i = order.size(); i-- > 0;) {
    detail::Node* node = order[i];
    if (!node->backward) continue;
    parent_grads.clear();
    for (const auto& p : node->parents) {
      if (p->requires_grad) {
        parent_grads.emplace_back(grads[index.at(p.get())]);
      } else {
        parent_grads.emplace_back();
      }
    }
    node->backward(*node, grads[i], parent_grads);
  }

  for (std::size_t i = 0; i < order.size(); ++i) {
    detail::Node* node = order[i];
    if (!node->op.empty()) continue;
    const std::string key = node->name.empty() ? "#" + std::to_string(node->id) : node->name;
    if (result.contains(key)) throw StateError("two distinct leaves share the name '" + key + "'");
    result.set(key, std::move(grads[i]));
  }

  // Release the graph; intermediate results keep their values but stop
  // participating in differentiation.
  for (detail::Node* node : order) {
    if (!node->backward) continue;
    node->consumed = true;
    node->requires_grad = false;
    node->parents.clear();
    node->backward = nullptr;
  }
  return result;
}

MacCounter::MacCounter() : previous_(active_counter) { active_counter = this; }
MacCounter::~MacCounter() { active_counter = previous_; }

std::uint64_t MacCounter::count() const noexcept { return count_; }

void MacCounter::add(std::uint64_t macs) noexcept {
  if (active_counter) active_counter->count_ += macs;
}

}  // namespace est
