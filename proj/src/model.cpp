// SPDX-License-Identifier: Apache-2.0

#include "scope/model.hpp"

#include <cmath>

#include "scope/hash.hpp"
#include "scope/rng.hpp"

namespace scope {

const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::autoregressive: return "autoregressive";
    case ModelKind::masked_diffusion: return "masked_diffusion";
    case ModelKind::classifier: return "classifier";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& text) {
  if (text == "autoregressive" || text == "ar") return ModelKind::autoregressive;
  if (text == "masked_diffusion" || text == "diffusion") return ModelKind::masked_diffusion;
  if (text == "classifier") return ModelKind::classifier;
  throw std::invalid_argument("unknown model kind '" + text + "'");
}

void Hyperparams::validate() const {
  if (layers < 0 || heads < 1 || width < 1 || context < 1 || ff_width < 1) {
    throw std::invalid_argument("hyperparameters must be positive");
  }
  if (width % heads != 0) throw std::invalid_argument("width must be divisible by heads");
  if (kind == ModelKind::classifier && num_classes < 2) throw std::invalid_argument("classifier needs >= 2 classes");
}

std::vector<std::pair<std::string, Shape>> ModelParams::layout(const Hyperparams& hp, int vocab_size) {
  const auto d = static_cast<std::size_t>(hp.width);
  const auto f = static_cast<std::size_t>(hp.ff_width);
  const auto v = static_cast<std::size_t>(vocab_size);
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("tok_emb", Shape{v, d});
  out.emplace_back("pos_emb", Shape{static_cast<std::size_t>(hp.context), d});
  for (int l = 0; l < hp.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.g", Shape{d});
    out.emplace_back(p + "ln1.b", Shape{d});
    out.emplace_back(p + "wq", Shape{d, d});
    out.emplace_back(p + "wk", Shape{d, d});
    out.emplace_back(p + "wv", Shape{d, d});
    out.emplace_back(p + "wo", Shape{d, d});
    out.emplace_back(p + "ln2.g", Shape{d});
    out.emplace_back(p + "ln2.b", Shape{d});
    out.emplace_back(p + "w1", Shape{d, f});
    out.emplace_back(p + "b1", Shape{f});
    out.emplace_back(p + "w2", Shape{f, d});
    out.emplace_back(p + "b2", Shape{d});
  }
  out.emplace_back("lnf.g", Shape{d});
  out.emplace_back("lnf.b", Shape{d});
  if (hp.kind == ModelKind::classifier) {
    out.emplace_back("cls.w", Shape{d, static_cast<std::size_t>(hp.num_classes)});
    out.emplace_back("cls.b", Shape{static_cast<std::size_t>(hp.num_classes)});
  } else {
    out.emplace_back("out.w", Shape{d, v});
    out.emplace_back("out.b", Shape{v});
  }
  return out;
}

ModelParams::ModelParams(Hyperparams hp, Vocab vocab, Weights weights)
    : hp_(hp), vocab_(std::move(vocab)), weights_(std::move(weights)) {
  hp_.validate();
  if (vocab_.size() < 4) throw std::invalid_argument("vocab is empty");
  const auto expected = layout(hp_, vocab_.size());
  if (expected.size() != weights_.size()) throw ShapeError("model weights do not match the architecture layout");
  Fnv1a h;
  h.text(header_text());
  for (const auto& [name, shape] : expected) {
    auto it = weights_.find(name);
    if (it == weights_.end() || !it->second) throw ShapeError("missing weight '" + name + "'");
    if (it->second->shape() != shape) {
      throw ShapeError("weight '" + name + "' has shape " + shape_string(it->second->shape()) + ", expected " +
                       shape_string(shape));
    }
    if (!it->second->all_finite()) throw NumericError("weight '" + name + "' holds non-finite values");
    h.doubles(it->second->data());
  }
  model_id_ = h.value();
}

ModelParams ModelParams::initialize(const Hyperparams& hp, const Vocab& vocab, std::uint64_t seed, double init_std) {
  hp.validate();
  Rng rng(derive_seed(seed, 0x1417));
  Weights w;
  for (const auto& [name, shape] : layout(hp, vocab.size())) {
    Tensor t(shape);
    const bool gain = name.ends_with(".g");
    const bool bias = shape.size() == 1 && !gain;
    for (double& v : t.data()) v = gain ? 1.0 : bias ? 0.0 : init_std * rng.normal();
    w.emplace(name, std::make_shared<const Tensor>(std::move(t)));
  }
  return ModelParams(hp, vocab, std::move(w));
}

const Tensor& ModelParams::weight(const std::string& name) const { return *shared_weight(name); }

std::shared_ptr<const Tensor> ModelParams::shared_weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw std::out_of_range("no weight named '" + name + "'");
  return it->second;
}

ModelParams ModelParams::with_weight(const std::string& name, Tensor value) const {
  Weights w = weights_;
  if (!w.count(name)) throw std::out_of_range("no weight named '" + name + "'");
  w[name] = std::make_shared<const Tensor>(std::move(value));
  return with_weights(std::move(w));
}

std::string ModelParams::header_text() const {
  std::string s;
  s += "kind=" + std::string(to_string(hp_.kind)) + "\n";
  s += "layers=" + std::to_string(hp_.layers) + "\n";
  s += "heads=" + std::to_string(hp_.heads) + "\n";
  s += "width=" + std::to_string(hp_.width) + "\n";
  s += "context=" + std::to_string(hp_.context) + "\n";
  s += "ff_width=" + std::to_string(hp_.ff_width) + "\n";
  s += "num_classes=" + std::to_string(hp_.num_classes) + "\n";
  s += "vocab=";
  for (int i = 0; i < vocab_.size(); ++i) s += (i ? " " : "") + vocab_.token(i);
  s += "\n";
  const auto& sp = vocab_.special();
  s += "special=" + std::to_string(sp.pad) + "," + std::to_string(sp.mask) + "," + std::to_string(sp.sep) + "," +
       std::to_string(sp.eos) + "\n";
  for (const auto& [name, shape] : layout(hp_, vocab_.size())) s += "weight=" + name + " " + shape_string(shape) + "\n";
  return s;
}

NodeId BoundParams::operator()(const std::string& name) const {
  auto it = ids.find(name);
  if (it == ids.end()) throw std::out_of_range("weight '" + name + "' not bound");
  return it->second;
}

BoundParams bind_constants(Graph& g, const ModelParams& params) {
  BoundParams b;
  for (const auto& [name, t] : params.weights()) b.ids.emplace(name, g.constant(t));
  return b;
}

BoundParams bind_leaves(Graph& g, const ModelParams& params, LeafValues& values) {
  BoundParams b;
  for (const auto& [name, t] : params.weights()) {
    const NodeId id = g.leaf(name, t->shape(), true);
    values.emplace(id, *t);
    b.ids.emplace(name, id);
  }
  return b;
}

Tensor token_embedding_rows(const ModelParams& params, std::span<const int> tokens) {
  check_tokens(params, tokens, "sequence");
  const Tensor& table = params.weight("tok_emb");
  const std::size_t d = table.cols();
  Tensor out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    auto src = table.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

namespace {

std::shared_ptr<const std::vector<std::uint8_t>> causal_mask(std::size_t n) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) (*m)[i * n + j] = 1;
  }
  return m;
}

NodeId affine_norm(Graph& g, const BoundParams& w, NodeId x, const std::string& prefix) {
  return g.add_row(g.mul_row(g.layer_norm(x), w(prefix + ".g")), w(prefix + ".b"));
}

}  // namespace

NodeId encode(Graph& g, const ModelParams& params, const BoundParams& w, NodeId token_embeddings, bool causal) {
  const auto& hp = params.hyper();
  const Shape& s = g.shape(token_embeddings);
  if (s.size() != 2 || s[1] != static_cast<std::size_t>(hp.width)) {
    throw ShapeError("encode: embeddings must be [L, " + std::to_string(hp.width) + "], got " + shape_string(s));
  }
  const std::size_t len = s[0];
  check_context(params, len);

  std::vector<std::size_t> positions(len);
  for (std::size_t i = 0; i < len; ++i) positions[i] = i;
  NodeId x = g.add(token_embeddings, g.gather_rows(w("pos_emb"), positions));

  const auto mask = causal ? causal_mask(len) : nullptr;
  const auto dh = static_cast<std::size_t>(hp.width / hp.heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int l = 0; l < hp.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    const NodeId h = affine_norm(g, w, x, p + "ln1");
    const NodeId q = g.matmul(h, w(p + "wq"));
    const NodeId k = g.matmul(h, w(p + "wk"));
    const NodeId v = g.matmul(h, w(p + "wv"));
    std::vector<NodeId> heads;
    for (int head = 0; head < hp.heads; ++head) {
      const std::size_t b = static_cast<std::size_t>(head) * dh;
      const NodeId qh = g.slice_cols(q, b, b + dh);
      const NodeId kh = g.slice_cols(k, b, b + dh);
      const NodeId vh = g.slice_cols(v, b, b + dh);
      const NodeId attn = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), inv_sqrt), mask);
      heads.push_back(g.matmul(attn, vh));
    }
    const NodeId merged = heads.size() == 1 ? heads[0] : g.concat_cols(heads);
    x = g.add(x, g.matmul(merged, w(p + "wo")));

    const NodeId h2 = affine_norm(g, w, x, p + "ln2");
    const NodeId ff = g.gelu(g.add_row(g.matmul(h2, w(p + "w1")), w(p + "b1")));
    x = g.add(x, g.add_row(g.matmul(ff, w(p + "w2")), w(p + "b2")));
  }
  return affine_norm(g, w, x, "lnf");
}

NodeId lm_log_probs(Graph& g, const BoundParams& w, NodeId hidden) {
  return g.log_softmax_rows(g.add_row(g.matmul(hidden, w("out.w")), w("out.b")));
}

NodeId class_log_probs(Graph& g, const BoundParams& w, NodeId hidden) {
  const std::size_t len = g.shape(hidden)[0];
  const NodeId pool = g.constant(Tensor::filled({1, len}, 1.0 / static_cast<double>(len)));
  const NodeId pooled = g.matmul(pool, hidden);
  return g.log_softmax_rows(g.add_row(g.matmul(pooled, w("cls.w")), w("cls.b")));
}

void check_tokens(const ModelParams& params, std::span<const int> tokens, const char* what) {
  for (int t : tokens) {
    if (t < 0 || t >= params.vocab().size()) {
      throw std::out_of_range(std::string(what) + " token " + std::to_string(t) + " outside vocab");
    }
  }
}

void check_context(const ModelParams& params, std::size_t length) {
  if (length == 0) throw std::invalid_argument("empty sequence");
  if (length > static_cast<std::size_t>(params.hyper().context)) {
    throw ContextOverflow("sequence of length " + std::to_string(length) + " exceeds context " +
                          std::to_string(params.hyper().context));
  }
}

void require_kind(const ModelParams& params, ModelKind kind, const char* op) {
  if (params.kind() != kind) {
    throw ModelKindError(std::string(op) + " requires a " + to_string(kind) + " model, got " +
                         to_string(params.kind()));
  }
}

}  // namespace scope
