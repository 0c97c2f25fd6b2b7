#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "entangle/autodiff.hpp"
#include "entangle/kernels.hpp"
#include "entangle/rng.hpp"
#include "entangle/spec.hpp"
#include "entangle/tensor.hpp"

namespace entangle {

enum class BlockKind { mlp_residual, conv_residual, transformer_encoder, lstm_cell };

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::mlp_residual: return "mlp_residual";
    case BlockKind::conv_residual: return "conv_residual";
    case BlockKind::transformer_encoder: return "transformer_encoder";
    case BlockKind::lstm_cell: return "lstm_cell";
  }
  return "?";
}

inline BlockKind block_kind_from_string(const std::string& s) {
  if (s == "mlp_residual") return BlockKind::mlp_residual;
  if (s == "conv_residual") return BlockKind::conv_residual;
  if (s == "transformer_encoder") return BlockKind::transformer_encoder;
  if (s == "lstm_cell") return BlockKind::lstm_cell;
  throw std::invalid_argument("unknown block kind: " + s);
}

// The constant skip operator a block applies, materialized once at block
// construction and never trained.
struct EntangleOperator {
  enum class Form { passthrough, zero, matrix, kernel2d, kernel1d };
  Form form = Form::passthrough;
  DenseMatrix matrix;
  ConvKernel kernel;

  const Tensor operator_tensor() const {
    switch (form) {
      case Form::matrix:
        return Tensor({matrix.rows(), matrix.cols()}, matrix.vec());
      case Form::kernel2d:
      case Form::kernel1d:
        return kernel.data;
      default:
        return Tensor({1}, {form == Form::passthrough ? 1.0 : 0.0});
    }
  }
};

enum class FeatureLayout { vector_width, conv_channels, seq_channels };

inline EntangleOperator materialize_entanglement(const EntanglementSpec& spec,
                                                 FeatureLayout layout,
                                                 int feature_dim) {
  spec.validate();
  EntangleOperator op;
  const auto check_dim = [&](int declared) {
    if (declared > 0 && declared != feature_dim)
      throw std::invalid_argument(
          "entanglement operator shape does not match block feature shape");
  };
  switch (spec.kind) {
    case EntangleKind::identity:
      op.form = EntangleOperator::Form::passthrough;
      return op;
    case EntangleKind::none:
      op.form = EntangleOperator::Form::zero;
      return op;
    case EntangleKind::dense:
    case EntangleKind::orthogonal:
      if (layout != FeatureLayout::vector_width)
        throw std::invalid_argument(
            "dense/orthogonal entanglement applies to vector features only");
      check_dim(spec.dim);
      op.form = EntangleOperator::Form::matrix;
      op.matrix = spec.kind == EntangleKind::dense
                      ? make_dense_gamma(feature_dim, spec.gamma)
                      : make_orthogonal_gamma(feature_dim, spec.seed);
      return op;
    case EntangleKind::spatial:
    case EntangleKind::channel:
    case EntangleKind::channel_spatial:
    case EntangleKind::orthogonal_channel: {
      check_dim(spec.channels);
      EntanglementSpec resolved = spec;
      resolved.channels = feature_dim;
      if (layout == FeatureLayout::conv_channels) {
        op.form = EntangleOperator::Form::kernel2d;
        op.kernel = make_kernel_2d(resolved);
      } else if (layout == FeatureLayout::seq_channels) {
        op.form = EntangleOperator::Form::kernel1d;
        op.kernel = make_seq_kernel(resolved);
      } else {
        throw std::invalid_argument(
            "convolutional entanglement applies to conv/sequence features only");
      }
      return op;
    }
  }
  throw std::invalid_argument("unhandled entanglement kind");
}

// Parameters of one block: the trainable tensors of f plus the constant
// entanglement operator.
struct BlockParams {
  BlockKind kind = BlockKind::mlp_residual;
  EntanglementSpec spec;
  int width = 0;      // mlp width / transformer d_model / lstm hidden
  int channels = 0;   // conv blocks
  int input_dim = 0;  // lstm input size
  bool lstm_literal_update = false;
  std::vector<std::pair<std::string, Tensor>> params;
  EntangleOperator ent;

  Tensor& tensor(const std::string& name) {
    for (auto& [k, v] : params)
      if (k == name) return v;
    throw std::invalid_argument("block has no tensor named " + name);
  }
  const Tensor& tensor(const std::string& name) const {
    for (const auto& [k, v] : params)
      if (k == name) return v;
    throw std::invalid_argument("block has no tensor named " + name);
  }
};

inline Tensor normal_tensor(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.normal() * stddev;
  return t;
}

inline Tensor uniform_tensor(std::vector<int> shape, Rng& rng, double bound) {
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = rng.uniform(-bound, bound);
  return t;
}

// f = Dense -> ReLU -> Dense, width preserving. The closing layer starts
// small so a fresh block sits near its skip map; without normalization a
// deep stack is not trainable otherwise.
inline BlockParams make_mlp_block(int width, const EntanglementSpec& spec,
                                  Rng& rng) {
  BlockParams p;
  p.kind = BlockKind::mlp_residual;
  p.spec = spec;
  p.width = width;
  const double he = std::sqrt(2.0 / width);
  const double out_scale = 0.1 * std::sqrt(1.0 / width);
  p.params.emplace_back("w1", normal_tensor({width, width}, rng, he));
  p.params.emplace_back("b1", Tensor({width}));
  p.params.emplace_back("w2", normal_tensor({width, width}, rng, out_scale));
  p.params.emplace_back("b2", Tensor({width}));
  p.ent = materialize_entanglement(spec, FeatureLayout::vector_width, width);
  return p;
}

// f = Conv3x3 -> ReLU -> Conv3x3, channel preserving, no normalization; the
// closing conv starts small, as in the dense block
inline BlockParams make_conv_block(int channels, const EntanglementSpec& spec,
                                   Rng& rng) {
  BlockParams p;
  p.kind = BlockKind::conv_residual;
  p.spec = spec;
  p.channels = channels;
  const double he = std::sqrt(2.0 / (9.0 * channels));
  const double out_scale = 0.1 * std::sqrt(1.0 / (9.0 * channels));
  p.params.emplace_back("k1", normal_tensor({3, 3, channels, channels}, rng, he));
  p.params.emplace_back("b1", Tensor({channels}));
  p.params.emplace_back("k2",
                        normal_tensor({3, 3, channels, channels}, rng, out_scale));
  p.params.emplace_back("b2", Tensor({channels}));
  p.ent = materialize_entanglement(spec, FeatureLayout::conv_channels, channels);
  return p;
}

// post-norm encoder block, single attention head, FFN hidden 4x
inline BlockParams make_transformer_block(int d_model,
                                          const EntanglementSpec& spec,
                                          Rng& rng) {
  BlockParams p;
  p.kind = BlockKind::transformer_encoder;
  p.spec = spec;
  p.width = d_model;
  const int hidden = 4 * d_model;
  const double xavier = std::sqrt(1.0 / d_model);
  for (const char* name : {"wq", "wk", "wv", "wo"})
    p.params.emplace_back(name, normal_tensor({d_model, d_model}, rng, xavier));
  p.params.emplace_back("ln1_g", Tensor::full({d_model}, 1.0));
  p.params.emplace_back("ln1_b", Tensor({d_model}));
  p.params.emplace_back("ffn_w1",
                        normal_tensor({d_model, hidden}, rng, std::sqrt(2.0 / d_model)));
  p.params.emplace_back("ffn_b1", Tensor({hidden}));
  p.params.emplace_back("ffn_w2",
                        normal_tensor({hidden, d_model}, rng, std::sqrt(1.0 / hidden)));
  p.params.emplace_back("ffn_b2", Tensor({d_model}));
  p.params.emplace_back("ln2_g", Tensor::full({d_model}, 1.0));
  p.params.emplace_back("ln2_b", Tensor({d_model}));
  p.ent = materialize_entanglement(spec, FeatureLayout::seq_channels, d_model);
  return p;
}

// gates i, f, o = sigmoid(affine(x, h)), candidate z = tanh(affine(x, h));
// forget bias starts at 1
inline BlockParams make_lstm_block(int input_dim, int hidden,
                                   const EntanglementSpec& spec, Rng& rng,
                                   bool literal_update = false) {
  BlockParams p;
  p.kind = BlockKind::lstm_cell;
  p.spec = spec;
  p.width = hidden;
  p.input_dim = input_dim;
  p.lstm_literal_update = literal_update;
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (const char* gate : {"i", "f", "o", "z"}) {
    p.params.emplace_back(std::string("wx_") + gate,
                          uniform_tensor({input_dim, hidden}, rng, bound));
    p.params.emplace_back(std::string("wh_") + gate,
                          uniform_tensor({hidden, hidden}, rng, bound));
    Tensor b({hidden});
    if (gate[0] == 'f')
      for (auto& v : b.vec()) v = 1.0;
    p.params.emplace_back(std::string("b_") + gate, std::move(b));
  }
  p.ent = materialize_entanglement(spec, FeatureLayout::vector_width, hidden);
  return p;
}

// A block's parameters bound into one graph: trainable tensors become input
// nodes (so their gradients are addressable), the entanglement operator
// becomes a constant node.
struct BoundBlock {
  const BlockParams* block = nullptr;
  std::vector<int> param_ids;
  int ent_id = -1;

  int pid(const std::string& name) const {
    for (std::size_t i = 0; i < block->params.size(); ++i)
      if (block->params[i].first == name) return param_ids[i];
    throw std::invalid_argument("bound block has no tensor named " + name);
  }
};

inline BoundBlock bind_block(Graph& g, const BlockParams& p,
                             bool trainable = true) {
  BoundBlock b;
  b.block = &p;
  b.param_ids.reserve(p.params.size());
  for (const auto& [name, t] : p.params)
    b.param_ids.push_back(g.input(t, trainable));
  switch (p.ent.form) {
    case EntangleOperator::Form::matrix:
      b.ent_id = g.constant(
          Tensor({p.ent.matrix.rows(), p.ent.matrix.cols()}, p.ent.matrix.vec()));
      break;
    case EntangleOperator::Form::kernel2d:
    case EntangleOperator::Form::kernel1d:
      b.ent_id = g.constant(p.ent.kernel.data);
      break;
    default:
      break;
  }
  return b;
}

// Skip path: dense right-multiplication x Gamma, convolution with the constant
// kernel (stride 1, SAME, zero padding), pass-through, or zero.
inline int apply_entanglement(Graph& g, const BoundBlock& b, int x) {
  switch (b.block->ent.form) {
    case EntangleOperator::Form::passthrough:
      return x;
    case EntangleOperator::Form::zero:
      return g.scale(x, 0.0);
    case EntangleOperator::Form::matrix:
      return g.matmul(x, b.ent_id);
    case EntangleOperator::Form::kernel2d:
      return g.conv2d(x, b.ent_id, Pad::zero);
    case EntangleOperator::Form::kernel1d:
      return g.conv1d(x, b.ent_id, Pad::zero);
  }
  throw std::logic_error("unhandled entanglement form");
}

struct BlockOut {
  int y;
  int f_out;
};

// y = f(x) + entangle(x); f_out returned separately for refinement tracing
inline BlockOut residual_forward(Graph& g, int x, const BoundBlock& b) {
  const BlockParams& p = *b.block;
  int f;
  if (p.kind == BlockKind::mlp_residual) {
    const int h = g.relu(g.add(g.matmul(x, b.pid("w1")), b.pid("b1")));
    f = g.add(g.matmul(h, b.pid("w2")), b.pid("b2"));
  } else if (p.kind == BlockKind::conv_residual) {
    const int h = g.relu(g.add(g.conv2d(x, b.pid("k1")), b.pid("b1")));
    f = g.add(g.conv2d(h, b.pid("k2")), b.pid("b2"));
  } else {
    throw std::invalid_argument("residual_forward: not a residual block");
  }
  return {g.add(f, apply_entanglement(g, b, x)), f};
}

// out1 = LayerNorm(entangle(x) + Attention(x))
// out2 = LayerNorm(entangle(out1) + FFN(out1))
inline int transformer_encoder_forward(Graph& g, int x, const BoundBlock& b) {
  const BlockParams& p = *b.block;
  if (p.kind != BlockKind::transformer_encoder)
    throw std::invalid_argument("transformer_encoder_forward: wrong block kind");
  const auto att = attention(g, x, b.pid("wq"), b.pid("wk"), b.pid("wv"),
                             b.pid("wo"));
  const int sum1 = g.add(att.out, apply_entanglement(g, b, x));
  const int out1 = g.layernorm(sum1, b.pid("ln1_g"), b.pid("ln1_b"));
  const int hidden =
      g.gelu(g.add(g.matmul(out1, b.pid("ffn_w1")), b.pid("ffn_b1")));
  const int ffn = g.add(g.matmul(hidden, b.pid("ffn_w2")), b.pid("ffn_b2"));
  const int sum2 = g.add(ffn, apply_entanglement(g, b, out1));
  return g.layernorm(sum2, b.pid("ln2_g"), b.pid("ln2_b"));
}

struct LstmNodes {
  int c;
  int h;
};

// Default update gates the entangled state: c' = f . (c Gamma) + i . z.
// The literal update drops the forget gate from the state path:
// c' = c Gamma + i . z. Either way h' = o . tanh(c').
inline LstmNodes lstm_step(Graph& g, LstmNodes state, int x_t,
                           const BoundBlock& b) {
  const BlockParams& p = *b.block;
  if (p.kind != BlockKind::lstm_cell)
    throw std::invalid_argument("lstm_step: wrong block kind");
  auto gate = [&](const char* name) {
    return g.add(g.add(g.matmul(x_t, b.pid(std::string("wx_") + name)),
                       g.matmul(state.h, b.pid(std::string("wh_") + name))),
                 b.pid(std::string("b_") + name));
  };
  const int i_t = g.sigmoid(gate("i"));
  const int f_t = g.sigmoid(gate("f"));
  const int o_t = g.sigmoid(gate("o"));
  const int z_t = g.tanh_fn(gate("z"));
  const int c_ent = apply_entanglement(g, b, state.c);
  const int write = g.mul(i_t, z_t);
  const int c_next = p.lstm_literal_update
                         ? g.add(c_ent, write)
                         : g.add(g.mul(f_t, c_ent), write);
  const int h_next = g.mul(o_t, g.tanh_fn(c_next));
  return {c_next, h_next};
}

struct LSTMState {
  Tensor c;
  Tensor h;
};

// ---- convenience eval wrappers (fresh graph per call) ----

inline std::pair<Tensor, Tensor> residual_eval(const Tensor& x,
                                               const BlockParams& p) {
  Graph g;
  const int xi = g.input(x, false);
  const auto b = bind_block(g, p, false);
  const auto out = residual_forward(g, xi, b);
  return {g.value(out.y), g.value(out.f_out)};
}

inline Tensor transformer_eval(const Tensor& x, const BlockParams& p) {
  Graph g;
  const int xi = g.input(x, false);
  const auto b = bind_block(g, p, false);
  return g.value(transformer_encoder_forward(g, xi, b));
}

inline LSTMState lstm_step_eval(const LSTMState& state, const Tensor& x_t,
                                const BlockParams& p) {
  Graph g;
  const int xi = g.input(x_t, false);
  const auto b = bind_block(g, p, false);
  const LstmNodes out = lstm_step(g, {g.input(state.c, false), g.input(state.h, false)}, xi, b);
  return {g.value(out.c), g.value(out.h)};
}

// ---- checkpoint container (text format ENTANGLE-CKPT v1) ----

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<BlockParams> blocks;
  std::vector<std::pair<std::string, Tensor>> head;

  std::string meta_value(const std::string& key, const std::string& fallback = "") const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    return fallback;
  }
};

namespace detail {

inline void write_tensor_section(std::ostream& os, const std::string& name,
                                 const Tensor& t) {
  os << "tensor " << name << ' ' << t.rank();
  for (int i = 0; i < t.rank(); ++i) os << ' ' << t.dim(i);
  os << '\n';
  for (std::size_t i = 0; i < t.size(); ++i) os << format_g17(t[i]) << '\n';
}

inline Tensor read_tensor_section(std::istream& is, std::string& name) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("ckpt: truncated tensor");
  std::istringstream ls(line);
  std::string tag;
  int rank = 0;
  ls >> tag >> name >> rank;
  if (tag != "tensor" || rank < 1 || rank > 4)
    throw std::runtime_error("ckpt: bad tensor header: " + line);
  std::vector<int> shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) ls >> d;
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::getline(is, line)) throw std::runtime_error("ckpt: truncated data");
    t[i] = std::stod(line);
  }
  return t;
}

}  // namespace detail

inline void save_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os << "ENTANGLE-CKPT v1\n";
  os << "meta";
  for (const auto& [k, v] : ckpt.meta) os << ' ' << k << '=' << v;
  os << '\n';
  os << "blocks " << ckpt.blocks.size() << '\n';
  for (const auto& blk : ckpt.blocks) {
    os << "block " << to_string(blk.kind) << " width=" << blk.width
       << " channels=" << blk.channels << " input_dim=" << blk.input_dim
       << " literal=" << (blk.lstm_literal_update ? 1 : 0) << '\n';
    os << "spec " << blk.spec.format() << '\n';
    for (const auto& [name, t] : blk.params)
      detail::write_tensor_section(os, name, t);
    os << "endblock\n";
  }
  os << "head " << ckpt.head.size() << '\n';
  for (const auto& [name, t] : ckpt.head)
    detail::write_tensor_section(os, name, t);
  os << "end\n";
}

inline Checkpoint load_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "ENTANGLE-CKPT v1")
    throw std::runtime_error("ckpt: bad magic");
  Checkpoint ckpt;
  if (!std::getline(is, line)) throw std::runtime_error("ckpt: missing meta");
  {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "meta") throw std::runtime_error("ckpt: missing meta line");
    std::string tok;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw std::runtime_error("ckpt: bad meta token");
      ckpt.meta.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
    }
  }
  if (!std::getline(is, line)) throw std::runtime_error("ckpt: missing blocks");
  std::size_t nblocks = 0;
  {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag >> nblocks;
    if (tag != "blocks") throw std::runtime_error("ckpt: missing blocks line");
  }
  for (std::size_t bi = 0; bi < nblocks; ++bi) {
    if (!std::getline(is, line)) throw std::runtime_error("ckpt: truncated block");
    BlockParams blk;
    {
      std::istringstream ls(line);
      std::string tag, kind;
      ls >> tag >> kind;
      if (tag != "block") throw std::runtime_error("ckpt: bad block header");
      blk.kind = block_kind_from_string(kind);
      std::string tok;
      while (ls >> tok) {
        const auto eq = tok.find('=');
        const std::string key = tok.substr(0, eq);
        const std::string val = tok.substr(eq + 1);
        if (key == "width") blk.width = std::stoi(val);
        else if (key == "channels") blk.channels = std::stoi(val);
        else if (key == "input_dim") blk.input_dim = std::stoi(val);
        else if (key == "literal") blk.lstm_literal_update = val == "1";
        else throw std::runtime_error("ckpt: unknown block field " + key);
      }
    }
    if (!std::getline(is, line) || line.rfind("spec ", 0) != 0)
      throw std::runtime_error("ckpt: missing block spec");
    blk.spec = EntanglementSpec::parse(line.substr(5));
    while (true) {
      const auto pos = is.tellg();
      if (!std::getline(is, line)) throw std::runtime_error("ckpt: truncated block");
      if (line == "endblock") break;
      is.seekg(pos);
      std::string name;
      Tensor t = detail::read_tensor_section(is, name);
      blk.params.emplace_back(std::move(name), std::move(t));
    }
    switch (blk.kind) {
      case BlockKind::mlp_residual:
        blk.ent = materialize_entanglement(blk.spec, FeatureLayout::vector_width,
                                           blk.width);
        break;
      case BlockKind::conv_residual:
        blk.ent = materialize_entanglement(blk.spec, FeatureLayout::conv_channels,
                                           blk.channels);
        break;
      case BlockKind::transformer_encoder:
        blk.ent = materialize_entanglement(blk.spec, FeatureLayout::seq_channels,
                                           blk.width);
        break;
      case BlockKind::lstm_cell:
        blk.ent = materialize_entanglement(blk.spec, FeatureLayout::vector_width,
                                           blk.width);
        break;
    }
    ckpt.blocks.push_back(std::move(blk));
  }
  if (!std::getline(is, line)) throw std::runtime_error("ckpt: missing head");
  std::size_t nhead = 0;
  {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag >> nhead;
    if (tag != "head") throw std::runtime_error("ckpt: missing head line");
  }
  for (std::size_t i = 0; i < nhead; ++i) {
    std::string name;
    Tensor t = detail::read_tensor_section(is, name);
    ckpt.head.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

}  // namespace entangle
