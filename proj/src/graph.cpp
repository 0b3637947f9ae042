// SPDX-License-Identifier: Apache-2.0

#include "scope/graph.hpp"

#include <algorithm>
#include <cmath>

namespace scope {

const char* op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::constant: return "constant";
    case Op::matmul: return "matmul";
    case Op::matmul_nt: return "matmul_nt";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::add_row: return "add_row";
    case Op::mul_row: return "mul_row";
    case Op::gelu: return "gelu";
    case Op::tanh: return "tanh";
    case Op::layer_norm: return "layer_norm";
    case Op::softmax_rows: return "softmax_rows";
    case Op::log_softmax_rows: return "log_softmax_rows";
    case Op::transpose: return "transpose";
    case Op::slice_cols: return "slice_cols";
    case Op::concat_cols: return "concat_cols";
    case Op::concat_rows: return "concat_rows";
    case Op::gather_rows: return "gather_rows";
    case Op::pick: return "pick";
    case Op::sum: return "sum";
  }
  return "?";
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

[[noreturn]] void mismatch(Op op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + shape_string(a) + " and " +
                   shape_string(b));
}

bool is_matrix(const Shape& s) { return s.size() == 2; }

std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.back(); }

}  // namespace

NodeId Graph::push(Node node) {
  if (nodes_.size() >= static_cast<std::size_t>(UINT32_MAX)) throw GraphError("graph too large");
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Node& Graph::input(NodeId id) const {
  if (id >= nodes_.size()) throw GraphError("node " + std::to_string(id) + " does not exist");
  return nodes_[id];
}

NodeId Graph::leaf(std::string name, Shape shape, bool differentiable) {
  Node n;
  n.op = Op::leaf;
  n.name = std::move(name);
  Tensor probe(shape);  // validates the shape
  n.shape = std::move(shape);
  n.differentiable = differentiable;
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) { return constant(std::make_shared<const Tensor>(std::move(value))); }

NodeId Graph::constant(std::shared_ptr<const Tensor> value) {
  if (!value || value->empty()) throw GraphError("constant requires a non-empty tensor");
  if (!value->all_finite()) throw NumericError("constant contains non-finite values");
  Node n;
  n.op = Op::constant;
  n.shape = value->shape();
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const auto& sa = input(a).shape;
  const auto& sb = input(b).shape;
  if (!is_matrix(sa) || !is_matrix(sb) || sa[1] != sb[0]) mismatch(Op::matmul, sa, sb);
  Node n;
  n.op = Op::matmul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::matmul_nt(NodeId a, NodeId b) {
  const auto& sa = input(a).shape;
  const auto& sb = input(b).shape;
  if (!is_matrix(sa) || !is_matrix(sb) || sa[1] != sb[1]) mismatch(Op::matmul_nt, sa, sb);
  Node n;
  n.op = Op::matmul_nt;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[0]};
  return push(std::move(n));
}

static Node elementwise(Op op, const Node& a, NodeId ia, const Node& b, NodeId ib) {
  if (a.shape != b.shape) mismatch(op, a.shape, b.shape);
  Node n;
  n.op = op;
  n.inputs = {ia, ib};
  n.shape = a.shape;
  return n;
}

NodeId Graph::add(NodeId a, NodeId b) { return push(elementwise(Op::add, input(a), a, input(b), b)); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(elementwise(Op::sub, input(a), a, input(b), b)); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(elementwise(Op::mul, input(a), a, input(b), b)); }

NodeId Graph::scale(NodeId a, double factor) {
  if (!std::isfinite(factor)) throw NumericError("scale factor is not finite");
  Node n;
  n.op = Op::scale;
  n.inputs = {a};
  n.shape = input(a).shape;
  n.scalar = factor;
  return push(std::move(n));
}

static Node row_broadcast(Op op, const Node& a, NodeId ia, const Node& r, NodeId ir) {
  if (!is_matrix(a.shape) || r.shape.size() != 1 || r.shape[0] != a.shape[1]) mismatch(op, a.shape, r.shape);
  Node n;
  n.op = op;
  n.inputs = {ia, ir};
  n.shape = a.shape;
  return n;
}

NodeId Graph::add_row(NodeId a, NodeId row) { return push(row_broadcast(Op::add_row, input(a), a, input(row), row)); }
NodeId Graph::mul_row(NodeId a, NodeId row) { return push(row_broadcast(Op::mul_row, input(a), a, input(row), row)); }

static Node unary(Op op, const Node& a, NodeId ia) {
  Node n;
  n.op = op;
  n.inputs = {ia};
  n.shape = a.shape;
  return n;
}

NodeId Graph::gelu(NodeId a) { return push(unary(Op::gelu, input(a), a)); }
NodeId Graph::tanh(NodeId a) { return push(unary(Op::tanh, input(a), a)); }

NodeId Graph::layer_norm(NodeId a, double epsilon) {
  if (!(epsilon > 0.0)) throw GraphError("layer_norm epsilon must be positive");
  Node n = unary(Op::layer_norm, input(a), a);
  n.scalar = epsilon;
  return push(std::move(n));
}

NodeId Graph::softmax_rows(NodeId a, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  Node n = unary(Op::softmax_rows, input(a), a);
  if (mask) {
    const std::size_t r = rows_of(n.shape), c = cols_of(n.shape);
    if (mask->size() != r * c) throw ShapeError("softmax_rows: mask size does not match " + shape_string(n.shape));
    for (std::size_t i = 0; i < r; ++i) {
      bool any = false;
      for (std::size_t j = 0; j < c; ++j) any = any || (*mask)[i * c + j];
      if (!any) throw GraphError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
  }
  n.mask = std::move(mask);
  return push(std::move(n));
}

NodeId Graph::log_softmax_rows(NodeId a) { return push(unary(Op::log_softmax_rows, input(a), a)); }

NodeId Graph::transpose(NodeId a) {
  const auto& s = input(a).shape;
  if (!is_matrix(s)) throw ShapeError("transpose: expected a matrix, got " + shape_string(s));
  Node n = unary(Op::transpose, input(a), a);
  n.shape = {s[1], s[0]};
  return push(std::move(n));
}

NodeId Graph::slice_cols(NodeId a, std::size_t begin, std::size_t end) {
  const auto& s = input(a).shape;
  if (!is_matrix(s) || begin >= end || end > s[1]) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_string(s));
  }
  Node n = unary(Op::slice_cols, input(a), a);
  n.shape = {s[0], end - begin};
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}

NodeId Graph::concat_cols(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw GraphError("concat_cols: no inputs");
  Node n;
  n.op = Op::concat_cols;
  std::size_t rows = 0, cols = 0;
  for (auto p : parts) {
    const auto& s = input(p).shape;
    if (!is_matrix(s) || (cols > 0 && s[0] != rows)) mismatch(Op::concat_cols, input(parts[0]).shape, s);
    rows = s[0];
    cols += s[1];
  }
  n.inputs = parts;
  n.shape = {rows, cols};
  return push(std::move(n));
}

NodeId Graph::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw GraphError("concat_rows: no inputs");
  Node n;
  n.op = Op::concat_rows;
  std::size_t rows = 0, cols = 0;
  for (auto p : parts) {
    const auto& s = input(p).shape;
    if (!is_matrix(s) || (rows > 0 && s[1] != cols)) mismatch(Op::concat_rows, input(parts[0]).shape, s);
    rows += s[0];
    cols = s[1];
  }
  n.inputs = parts;
  n.shape = {rows, cols};
  return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId table, std::vector<std::size_t> indices) {
  const auto& s = input(table).shape;
  if (!is_matrix(s)) throw ShapeError("gather_rows: table must be a matrix, got " + shape_string(s));
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  for (auto i : indices) {
    if (i >= s[0]) throw ShapeError("gather_rows: index " + std::to_string(i) + " out of range for " + shape_string(s));
  }
  Node n = unary(Op::gather_rows, input(table), table);
  n.shape = {indices.size(), s[1]};
  n.indices = std::move(indices);
  return push(std::move(n));
}

NodeId Graph::pick(NodeId a, std::size_t row, std::size_t col) {
  const auto& s = input(a).shape;
  if (row >= rows_of(s) || col >= cols_of(s)) {
    throw ShapeError("pick: (" + std::to_string(row) + "," + std::to_string(col) + ") outside " + shape_string(s));
  }
  Node n = unary(Op::pick, input(a), a);
  n.shape = {1};
  n.begin = row;
  n.end = col;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  Node n = unary(Op::sum, input(a), a);
  n.shape = {1};
  return push(std::move(n));
}

std::vector<NodeId> Graph::leaves() const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].op == Op::leaf) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

void gemm(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* c = &C[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = &B[p * n];
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
}

// out[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += A[i * k + p] * B[j * k + p];
      C[i * n + j] += s;
    }
  }
}

// out[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = &B[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      double* c = &C[p * n];
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
}

bool kept(const Node& n, std::size_t idx) { return !n.mask || (*n.mask)[idx]; }

Tensor forward(const Node& n, const std::vector<const Tensor*>& v) {
  auto in = [&](std::size_t i) -> const Tensor& { return *v[n.inputs[i]]; };
  Tensor out(n.shape);
  auto o = out.data();
  switch (n.op) {
    case Op::leaf:
    case Op::constant:
      throw GraphError("forward called on a source node");
    case Op::matmul:
      gemm(in(0), in(1), out);
      break;
    case Op::matmul_nt:
      gemm_nt(in(0), in(1), out);
      break;
    case Op::add:
    case Op::sub:
    case Op::mul: {
      auto a = in(0).data();
      auto b = in(1).data();
      for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = n.op == Op::add ? a[i] + b[i] : n.op == Op::sub ? a[i] - b[i] : a[i] * b[i];
      }
      break;
    }
    case Op::scale: {
      auto a = in(0).data();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * n.scalar;
      break;
    }
    case Op::add_row:
    case Op::mul_row: {
      const Tensor& a = in(0);
      auto r = in(1).data();
      const std::size_t cols = a.cols();
      auto ad = a.data();
      for (std::size_t i = 0; i < o.size(); ++i) {
        o[i] = n.op == Op::add_row ? ad[i] + r[i % cols] : ad[i] * r[i % cols];
      }
      break;
    }
    case Op::gelu: {
      auto a = in(0).data();
      for (std::size_t i = 0; i < o.size(); ++i) {
        const double x = a[i];
        o[i] = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
      }
      break;
    }
    case Op::tanh: {
      auto a = in(0).data();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(a[i]);
      break;
    }
    case Op::layer_norm: {
      const Tensor& a = in(0);
      const std::size_t c = a.cols();
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto x = a.row(r);
        double mean = 0.0;
        for (double xv : x) mean += xv;
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (double xv : x) var += (xv - mean) * (xv - mean);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + n.scalar);
        auto y = out.row(r);
        for (std::size_t j = 0; j < c; ++j) y[j] = (x[j] - mean) * inv;
      }
      break;
    }
    case Op::softmax_rows: {
      const Tensor& a = in(0);
      const std::size_t c = a.cols();
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto x = a.row(r);
        auto y = out.row(r);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) {
          if (kept(n, r * c + j)) mx = std::max(mx, x[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          y[j] = kept(n, r * c + j) ? std::exp(x[j] - mx) : 0.0;
          z += y[j];
        }
        for (std::size_t j = 0; j < c; ++j) y[j] /= z;
      }
      break;
    }
    case Op::log_softmax_rows: {
      const Tensor& a = in(0);
      const std::size_t c = a.cols();
      for (std::size_t r = 0; r < a.rows(); ++r) {
        auto x = a.row(r);
        auto y = out.row(r);
        double mx = -INFINITY;
        for (double xv : x) mx = std::max(mx, xv);
        double z = 0.0;
        for (double xv : x) z += std::exp(xv - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) y[j] = x[j] - lse;
      }
      break;
    }
    case Op::transpose: {
      const Tensor& a = in(0);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
      }
      break;
    }
    case Op::slice_cols: {
      const Tensor& a = in(0);
      for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = n.begin; c < n.end; ++c) out.at(r, c - n.begin) = a.at(r, c);
      }
      break;
    }
    case Op::concat_cols: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const Tensor& a = in(p);
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < a.cols(); ++c) out.at(r, offset + c) = a.at(r, c);
        }
        offset += a.cols();
      }
      break;
    }
    case Op::concat_rows: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        auto a = in(p).data();
        std::copy(a.begin(), a.end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += a.size();
      }
      break;
    }
    case Op::gather_rows: {
      const Tensor& t = in(0);
      for (std::size_t r = 0; r < n.indices.size(); ++r) {
        auto src = t.row(n.indices[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
      }
      break;
    }
    case Op::pick:
      o[0] = in(0).data()[n.begin * cols_of(in(0).shape()) + n.end];
      break;
    case Op::sum: {
      double s = 0.0;
      for (double x : in(0).data()) s += x;
      o[0] = s;
      break;
    }
  }
  return out;
}

// Accumulates the vector-Jacobian product of node `n` into the adjoints of its inputs.
void backward_step(const Node& n, const Tensor& g, const Tensor& y, const std::vector<const Tensor*>& v,
                   std::vector<std::unique_ptr<Tensor>>& adj, const std::vector<char>& needs) {
  auto slot = [&](std::size_t i) -> Tensor* {
    const NodeId id = n.inputs[i];
    if (!needs[id]) return nullptr;
    if (!adj[id]) adj[id] = std::make_unique<Tensor>(v[id]->shape());
    return adj[id].get();
  };
  auto in = [&](std::size_t i) -> const Tensor& { return *v[n.inputs[i]]; };
  auto gd = g.data();

  switch (n.op) {
    case Op::leaf:
    case Op::constant:
      break;
    case Op::matmul: {
      // C = A B: dA = G B^T, dB = A^T G
      if (auto* da = slot(0)) gemm_nt(g, in(1), *da);
      if (auto* db = slot(1)) gemm_tn(in(0), g, *db);
      break;
    }
    case Op::matmul_nt: {
      // C = A B^T: dA = G B, dB = G^T A
      if (auto* da = slot(0)) gemm(g, in(1), *da);
      if (auto* db = slot(1)) gemm_tn(g, in(0), *db);
      break;
    }
    case Op::add:
    case Op::sub: {
      if (auto* da = slot(0)) {
        auto d = da->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i];
      }
      if (auto* db = slot(1)) {
        auto d = db->data();
        const double sign = n.op == Op::add ? 1.0 : -1.0;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += sign * gd[i];
      }
      break;
    }
    case Op::mul: {
      auto a = in(0).data();
      auto b = in(1).data();
      if (auto* da = slot(0)) {
        auto d = da->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * b[i];
      }
      if (auto* db = slot(1)) {
        auto d = db->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * a[i];
      }
      break;
    }
    case Op::scale:
      if (auto* da = slot(0)) {
        auto d = da->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * n.scalar;
      }
      break;
    case Op::add_row:
    case Op::mul_row: {
      const Tensor& a = in(0);
      auto ad = a.data();
      auto r = in(1).data();
      const std::size_t cols = a.cols();
      if (auto* da = slot(0)) {
        auto d = da->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += n.op == Op::add_row ? gd[i] : gd[i] * r[i % cols];
      }
      if (auto* dr = slot(1)) {
        auto d = dr->data();
        for (std::size_t i = 0; i < gd.size(); ++i) d[i % cols] += n.op == Op::add_row ? gd[i] : gd[i] * ad[i];
      }
      break;
    }
    case Op::gelu:
      if (auto* da = slot(0)) {
        auto a = in(0).data();
        auto d = da->data();
        for (std::size_t i = 0; i < d.size(); ++i) {
          const double x = a[i];
          const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
          const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
          d[i] += gd[i] * (0.5 * (1.0 + t) + 0.5 * x * dt);
        }
      }
      break;
    case Op::tanh:
      if (auto* da = slot(0)) {
        auto yd = y.data();
        auto d = da->data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gd[i] * (1.0 - yd[i] * yd[i]);
      }
      break;
    case Op::layer_norm:
      if (auto* da = slot(0)) {
        const Tensor& a = in(0);
        const std::size_t c = a.cols();
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < a.rows(); ++r) {
          auto x = a.row(r);
          double mean = 0.0;
          for (double xv : x) mean += xv;
          mean *= inv_c;
          double var = 0.0;
          for (double xv : x) var += (xv - mean) * (xv - mean);
          var *= inv_c;
          const double inv = 1.0 / std::sqrt(var + n.scalar);
          auto yr = y.row(r);
          auto gr = g.row(r);
          double gmean = 0.0, gy = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            gmean += gr[j];
            gy += gr[j] * yr[j];
          }
          gmean *= inv_c;
          gy *= inv_c;
          auto d = da->row(r);
          for (std::size_t j = 0; j < c; ++j) d[j] += inv * (gr[j] - gmean - yr[j] * gy);
        }
      }
      break;
    case Op::softmax_rows:
      if (auto* da = slot(0)) {
        const std::size_t c = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          auto yr = y.row(r);
          auto gr = g.row(r);
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += gr[j] * yr[j];
          auto d = da->row(r);
          for (std::size_t j = 0; j < c; ++j) d[j] += yr[j] * (gr[j] - dot);
        }
      }
      break;
    case Op::log_softmax_rows:
      if (auto* da = slot(0)) {
        const std::size_t c = y.cols();
        for (std::size_t r = 0; r < y.rows(); ++r) {
          auto yr = y.row(r);
          auto gr = g.row(r);
          double gsum = 0.0;
          for (double gv : gr) gsum += gv;
          auto d = da->row(r);
          for (std::size_t j = 0; j < c; ++j) d[j] += gr[j] - std::exp(yr[j]) * gsum;
        }
      }
      break;
    case Op::transpose:
      if (auto* da = slot(0)) {
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < g.cols(); ++c) da->at(c, r) += g.at(r, c);
        }
      }
      break;
    case Op::slice_cols:
      if (auto* da = slot(0)) {
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = n.begin; c < n.end; ++c) da->at(r, c) += g.at(r, c - n.begin);
        }
      }
      break;
    case Op::concat_cols: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const std::size_t w = in(p).cols();
        if (auto* da = slot(p)) {
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < w; ++c) da->at(r, c) += g.at(r, offset + c);
          }
        }
        offset += w;
      }
      break;
    }
    case Op::concat_rows: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < n.inputs.size(); ++p) {
        const std::size_t len = in(p).size();
        if (auto* da = slot(p)) {
          auto d = da->data();
          for (std::size_t i = 0; i < len; ++i) d[i] += gd[offset + i];
        }
        offset += len;
      }
      break;
    }
    case Op::gather_rows:
      if (auto* da = slot(0)) {
        for (std::size_t r = 0; r < n.indices.size(); ++r) {
          auto src = g.row(r);
          auto dst = da->row(n.indices[r]);
          for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
      }
      break;
    case Op::pick:
      if (auto* da = slot(0)) da->data()[n.begin * da->cols() + n.end] += gd[0];
      break;
    case Op::sum:
      if (auto* da = slot(0)) {
        for (double& d : da->data()) d += gd[0];
      }
      break;
  }
}

}  // namespace

Evaluation::Evaluation(const Graph& graph, const LeafValues& leaf_values) : graph_(graph) {
  const auto& nodes = graph.nodes();
  view_.assign(nodes.size(), nullptr);
  owned_.resize(nodes.size());
  for (NodeId id = 0; id < nodes.size(); ++id) {
    const Node& n = nodes[id];
    if (n.op == Op::leaf) {
      auto it = leaf_values.find(id);
      if (it == leaf_values.end()) throw GraphError("no value bound for leaf '" + n.name + "'");
      if (it->second.shape() != n.shape) {
        throw ShapeError("leaf '" + n.name + "' expects " + shape_string(n.shape) + ", got " +
                         shape_string(it->second.shape()));
      }
      if (!it->second.all_finite()) throw NumericError("leaf '" + n.name + "' holds non-finite values");
      view_[id] = &it->second;
    } else if (n.op == Op::constant) {
      view_[id] = n.value.get();
    } else {
      owned_[id] = std::make_unique<Tensor>(forward(n, view_));
      if (!owned_[id]->all_finite()) {
        throw NumericError(std::string("non-finite output at node ") + std::to_string(id) + " (" + op_name(n.op) + ")");
      }
      view_[id] = owned_[id].get();
    }
  }
}

const Tensor& Evaluation::value(NodeId id) const {
  if (id >= view_.size()) throw GraphError("node " + std::to_string(id) + " does not exist");
  return *view_[id];
}

Gradients Evaluation::backward(NodeId scalar) const {
  std::vector<NodeId> wrt;
  for (NodeId id : graph_.leaves()) {
    if (graph_.node(id).differentiable) wrt.push_back(id);
  }
  return backward(scalar, wrt);
}

Gradients Evaluation::backward(NodeId scalar, const std::vector<NodeId>& wrt) const {
  const auto& nodes = graph_.nodes();
  if (scalar >= nodes.size()) throw GraphError("node " + std::to_string(scalar) + " does not exist");
  if (shape_size(nodes[scalar].shape) != 1) {
    throw GraphError("backward requires a scalar node, got shape " + shape_string(nodes[scalar].shape));
  }
  std::vector<char> needs(nodes.size(), 0);
  for (NodeId id : wrt) {
    if (id >= nodes.size() || nodes[id].op != Op::leaf) throw GraphError("gradient requested for a non-leaf node");
    if (!nodes[id].differentiable) throw GraphError("leaf '" + nodes[id].name + "' is not differentiable");
    needs[id] = 1;
  }
  for (NodeId id = 0; id <= scalar; ++id) {
    for (NodeId p : nodes[id].inputs) needs[id] = needs[id] || needs[p];
  }

  std::vector<std::unique_ptr<Tensor>> adj(nodes.size());
  if (needs[scalar]) adj[scalar] = std::make_unique<Tensor>(Tensor::filled(nodes[scalar].shape, 1.0));
  for (NodeId id = scalar + 1; id-- > 0;) {
    if (!adj[id] || nodes[id].op == Op::leaf) continue;
    backward_step(nodes[id], *adj[id], *view_[id], view_, adj, needs);
    if (!adj[id]->all_finite()) {
      throw NumericError(std::string("non-finite gradient at node ") + std::to_string(id) + " (" +
                         op_name(nodes[id].op) + ")");
    }
  }

  Gradients out;
  for (NodeId id : wrt) {
    out.emplace(id, adj[id] ? std::move(*adj[id]) : Tensor(nodes[id].shape));
  }
  return out;
}

std::vector<Tensor> evaluate(const Graph& graph, const LeafValues& leaf_values) {
  Evaluation ev(graph, leaf_values);
  std::vector<Tensor> out;
  out.reserve(graph.size());
  for (NodeId id = 0; id < graph.size(); ++id) out.push_back(ev.value(id));
  return out;
}

Gradients grad(const Graph& graph, NodeId scalar, const LeafValues& leaf_values) {
  return Evaluation(graph, leaf_values).backward(scalar);
}

}  // namespace scope
