// SPDX-License-Identifier: Apache-2.0
//
// Explicit computation graph with reverse-mode differentiation.
//
// A Graph is a list of node records in topological order. Building a graph
// performs shape inference; evaluating it binds values to the leaves. The same
// graph can be evaluated many times with different leaf values, which is what
// the integrated-gradients path loop does.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "scope/tensor.hpp"

namespace scope {

using NodeId = std::uint32_t;

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Op {
  leaf,
  constant,
  matmul,       // [m,k] x [k,n]
  matmul_nt,    // [m,k] x [n,k]^T
  add,
  sub,
  mul,
  scale,
  add_row,      // [m,n] + [n] broadcast over rows
  mul_row,      // [m,n] * [n] broadcast over rows
  gelu,         // tanh approximation
  tanh,
  layer_norm,   // per-row standardization, no affine part
  softmax_rows,
  log_softmax_rows,
  transpose,
  slice_cols,
  concat_cols,
  concat_rows,
  gather_rows,
  pick,         // single entry as a scalar
  sum,
};

const char* op_name(Op op);

struct Node {
  Op op = Op::leaf;
  std::vector<NodeId> inputs;
  Shape shape;
  std::string name;              // leaves only
  bool differentiable = false;   // leaves only
  double scalar = 0.0;           // scale factor, layer_norm epsilon
  std::size_t begin = 0;         // slice_cols begin / pick row
  std::size_t end = 0;           // slice_cols end / pick column
  std::vector<std::size_t> indices;                     // gather_rows
  std::shared_ptr<const std::vector<std::uint8_t>> mask;  // softmax_rows; 1 keeps an entry
  std::shared_ptr<const Tensor> value;                  // constant
};

class Graph {
 public:
  NodeId leaf(std::string name, Shape shape, bool differentiable = true);
  NodeId constant(Tensor value);
  NodeId constant(std::shared_ptr<const Tensor> value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId matmul_nt(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  NodeId add_row(NodeId a, NodeId row);
  NodeId mul_row(NodeId a, NodeId row);
  NodeId gelu(NodeId a);
  NodeId tanh(NodeId a);
  NodeId layer_norm(NodeId a, double epsilon = 1e-5);
  // `mask` has rows*cols entries; masked-out entries get probability exactly 0.
  NodeId softmax_rows(NodeId a, std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr);
  NodeId log_softmax_rows(NodeId a);
  NodeId transpose(NodeId a);
  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t end);
  NodeId concat_cols(const std::vector<NodeId>& parts);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  NodeId gather_rows(NodeId table, std::vector<std::size_t> indices);
  NodeId pick(NodeId a, std::size_t row, std::size_t col);
  NodeId sum(NodeId a);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<Node>& nodes() const { return nodes_; }
  std::size_t size() const { return nodes_.size(); }
  const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
  std::vector<NodeId> leaves() const;

 private:
  NodeId push(Node node);
  const Node& input(NodeId id) const;

  std::vector<Node> nodes_;
};

using LeafValues = std::map<NodeId, Tensor>;
using Gradients = std::map<NodeId, Tensor>;

// Forward values for every node of a graph. Leaf values are referenced, not
// copied, so `leaf_values` must outlive the evaluation.
class Evaluation {
 public:
  Evaluation(const Graph& graph, const LeafValues& leaf_values);

  const Tensor& value(NodeId id) const;

  // d(scalar)/d(leaf) for every differentiable leaf. Unused leaves get zeros.
  Gradients backward(NodeId scalar) const;
  // Same, restricted to the requested leaves, each of which must be differentiable.
  Gradients backward(NodeId scalar, const std::vector<NodeId>& wrt) const;

 private:
  const Graph& graph_;
  std::vector<const Tensor*> view_;
  std::vector<std::unique_ptr<Tensor>> owned_;
};

std::vector<Tensor> evaluate(const Graph& graph, const LeafValues& leaf_values);
Gradients grad(const Graph& graph, NodeId scalar, const LeafValues& leaf_values);

}  // namespace scope
