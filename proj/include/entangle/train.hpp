#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "entangle/blocks.hpp"
#include "entangle/config.hpp"
#include "entangle/datasets.hpp"
#include "entangle/io.hpp"

namespace entangle {

struct RunMetrics {
  // index 0 is the initialization evaluation, then one entry per epoch
  std::vector<double> train_loss;
  std::vector<double> train_acc;
  std::vector<double> test_acc;
  double best_test_acc = 0.0;
  double wall_time_s = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  bool failed = false;
  std::string failure;
};

struct Model {
  ModelKind kind = ModelKind::res_mlp;
  Task task = Task::spiral2d;
  EntanglementSpec spec;
  int input_dim = 0;
  int num_classes = 0;
  int depth = 0;
  int width = 0;
  int channels = 0;
  bool lstm_literal = false;
  std::vector<std::pair<std::string, Tensor>> head;
  std::vector<BlockParams> blocks;

  Tensor& head_tensor(const std::string& name) {
    for (auto& [k, v] : head)
      if (k == name) return v;
    throw std::invalid_argument("model has no head tensor " + name);
  }
};

namespace detail {

inline int task_step_dim(Task task) {
  switch (task) {
    case Task::spiral2d: return 2;
    case Task::digits_lite: return kDigitSide * kDigitSide;
    case Task::seq_pixel:
    case Task::permuted_seq_pixel: return 1;
    case Task::copy_memory: return 10;
  }
  return 0;
}

inline int task_classes(Task task) {
  switch (task) {
    case Task::spiral2d: return 2;
    case Task::digits_lite:
    case Task::seq_pixel:
    case Task::permuted_seq_pixel:
    case Task::copy_memory: return 10;
  }
  return 0;
}

// deterministic sinusoidal position table
inline Tensor positional_encoding(int length, int dim) {
  Tensor pe({length, dim});
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < dim; ++i) {
      const double rate =
          std::pow(10000.0, -2.0 * (i / 2) / static_cast<double>(dim));
      pe.at(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return pe;
}

}  // namespace detail

inline Model build_model(const ExperimentConfig& cfg,
                         const EntanglementSpec& spec, Rng& rng) {
  Model m;
  m.kind = cfg.model;
  m.task = cfg.task;
  m.spec = spec;
  m.depth = cfg.depth;
  m.width = cfg.width;
  m.channels = cfg.channels;
  m.num_classes = detail::task_classes(cfg.task);
  m.lstm_literal = cfg.lstm_literal;

  switch (cfg.model) {
    case ModelKind::res_mlp: {
      m.input_dim = cfg.task == Task::spiral2d
                        ? 2
                        : detail::kDigitSide * detail::kDigitSide;
      const double he = std::sqrt(2.0 / m.input_dim);
      m.head.emplace_back("w_in", normal_tensor({m.input_dim, cfg.width}, rng, he));
      m.head.emplace_back("b_in", Tensor({cfg.width}));
      m.head.emplace_back(
          "w_out", normal_tensor({cfg.width, m.num_classes}, rng,
                                 std::sqrt(1.0 / cfg.width)));
      m.head.emplace_back("b_out", Tensor({m.num_classes}));
      for (int i = 0; i < cfg.depth; ++i)
        m.blocks.push_back(make_mlp_block(cfg.width, spec, rng));
      break;
    }
    case ModelKind::res_cnn: {
      m.input_dim = detail::kDigitSide * detail::kDigitSide;
      m.head.emplace_back("k_stem",
                          normal_tensor({3, 3, 1, cfg.channels}, rng,
                                        std::sqrt(2.0 / 9.0)));
      m.head.emplace_back("b_stem", Tensor({cfg.channels}));
      m.head.emplace_back(
          "w_out", normal_tensor({cfg.channels, m.num_classes}, rng,
                                 std::sqrt(1.0 / cfg.channels)));
      m.head.emplace_back("b_out", Tensor({m.num_classes}));
      for (int i = 0; i < cfg.depth; ++i)
        m.blocks.push_back(make_conv_block(cfg.channels, spec, rng));
      break;
    }
    case ModelKind::transformer: {
      m.input_dim = detail::task_step_dim(cfg.task);
      m.head.emplace_back(
          "w_embed", normal_tensor({m.input_dim, cfg.width}, rng,
                                   std::sqrt(1.0 / std::max(1, m.input_dim))));
      m.head.emplace_back("b_embed", Tensor({cfg.width}));
      m.head.emplace_back(
          "w_out", normal_tensor({cfg.width, m.num_classes}, rng,
                                 std::sqrt(1.0 / cfg.width)));
      m.head.emplace_back("b_out", Tensor({m.num_classes}));
      for (int i = 0; i < cfg.depth; ++i)
        m.blocks.push_back(make_transformer_block(cfg.width, spec, rng));
      break;
    }
    case ModelKind::lstm: {
      m.input_dim = detail::task_step_dim(cfg.task);
      m.head.emplace_back(
          "w_out", normal_tensor({cfg.width, m.num_classes}, rng,
                                 std::sqrt(1.0 / cfg.width)));
      m.head.emplace_back("b_out", Tensor({m.num_classes}));
      for (int i = 0; i < cfg.depth; ++i)
        m.blocks.push_back(make_lstm_block(
            i == 0 ? m.input_dim : cfg.width, cfg.width, spec, rng,
            cfg.lstm_literal));
      break;
    }
  }
  return m;
}

struct BoundModel {
  const Model* model = nullptr;
  std::vector<int> head_ids;
  std::vector<BoundBlock> blocks;

  int hid(const std::string& name) const {
    for (std::size_t i = 0; i < model->head.size(); ++i)
      if (model->head[i].first == name) return head_ids[i];
    throw std::invalid_argument("bound model has no head tensor " + name);
  }
};

inline BoundModel bind_model(Graph& g, const Model& m, bool trainable) {
  BoundModel b;
  b.model = &m;
  for (const auto& [name, t] : m.head) b.head_ids.push_back(g.input(t, trainable));
  for (const auto& blk : m.blocks) b.blocks.push_back(bind_block(g, blk, trainable));
  return b;
}

struct BatchEval {
  int loss_node = -1;
  double loss = 0.0;
  int correct = 0;
  int total = 0;
};

namespace detail {

inline int argmax_row(const Tensor& t, int row, int k) {
  int best = 0;
  for (int i = 1; i < k; ++i)
    if (t[static_cast<std::size_t>(row) * k + i] >
        t[static_cast<std::size_t>(row) * k + best])
      best = i;
  return best;
}

inline BatchEval forward_res_mlp(Graph& g, const BoundModel& bm,
                                 const Dataset& data,
                                 const std::vector<int>& idx) {
  const Model& m = *bm.model;
  const int b_count = static_cast<int>(idx.size());
  Tensor xb({b_count, m.input_dim});
  std::vector<int> labels(idx.size());
  for (int r = 0; r < b_count; ++r) {
    const Tensor& s = data.x[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])];
    for (std::size_t j = 0; j < s.size(); ++j)
      xb[static_cast<std::size_t>(r) * m.input_dim + j] = s[j];
    labels[static_cast<std::size_t>(r)] =
        data.y[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])];
  }
  int x = g.relu(g.add(g.matmul(g.constant(xb), bm.hid("w_in")), bm.hid("b_in")));
  for (const auto& blk : bm.blocks) x = residual_forward(g, x, blk).y;
  const int logits = g.add(g.matmul(x, bm.hid("w_out")), bm.hid("b_out"));
  BatchEval ev;
  ev.loss_node = g.cross_entropy_with_logits(logits, labels);
  ev.loss = g.value(ev.loss_node)[0];
  const Tensor& lv = g.value(logits);
  for (int r = 0; r < b_count; ++r) {
    ev.total += 1;
    if (argmax_row(lv, r, m.num_classes) == labels[static_cast<std::size_t>(r)])
      ev.correct += 1;
  }
  return ev;
}

inline BatchEval forward_res_cnn(Graph& g, const BoundModel& bm,
                                 const Dataset& data,
                                 const std::vector<int>& idx) {
  const Model& m = *bm.model;
  BatchEval ev;
  int loss_sum = -1;
  for (int sample : idx) {
    const Tensor& img = data.x[static_cast<std::size_t>(sample)];
    const int label = data.y[static_cast<std::size_t>(sample)];
    int x = g.relu(g.add(g.conv2d(g.constant(img), bm.hid("k_stem")),
                         bm.hid("b_stem")));
    for (const auto& blk : bm.blocks) x = residual_forward(g, x, blk).y;
    const int pooled = g.mean_pool_hw(x);
    const int logits = g.add(g.matmul(pooled, bm.hid("w_out")), bm.hid("b_out"));
    const int loss = g.cross_entropy_with_logits(logits, {label});
    loss_sum = loss_sum < 0 ? loss : g.add(loss_sum, loss);
    ev.total += 1;
    if (argmax_row(g.value(logits), 0, m.num_classes) == label) ev.correct += 1;
  }
  ev.loss_node = g.scale(loss_sum, 1.0 / static_cast<double>(idx.size()));
  ev.loss = g.value(ev.loss_node)[0];
  return ev;
}

inline BatchEval forward_transformer(Graph& g, const BoundModel& bm,
                                     const Dataset& data,
                                     const std::vector<int>& idx) {
  const Model& m = *bm.model;
  BatchEval ev;
  int loss_sum = -1;
  const int seq_len = data.x.front().dim(0);
  const int pe = g.constant(positional_encoding(seq_len, m.width));
  for (int sample : idx) {
    const Tensor& seq = data.x[static_cast<std::size_t>(sample)];
    int x = g.add(g.add(g.matmul(g.constant(seq), bm.hid("w_embed")),
                        bm.hid("b_embed")),
                  pe);
    for (const auto& blk : bm.blocks) x = transformer_encoder_forward(g, x, blk);
    int loss;
    if (data.sequence_targets) {
      const int logits = g.add(g.matmul(x, bm.hid("w_out")), bm.hid("b_out"));
      const auto& targets = data.y_seq[static_cast<std::size_t>(sample)];
      loss = g.cross_entropy_with_logits(logits, targets);
      const Tensor& lv = g.value(logits);
      for (int t = 0; t < seq_len; ++t) {
        if (targets[static_cast<std::size_t>(t)] == 0) continue;
        ev.total += 1;
        if (argmax_row(lv, t, m.num_classes) == targets[static_cast<std::size_t>(t)])
          ev.correct += 1;
      }
    } else {
      const int pooled = g.mean_rows(x);
      const int logits = g.add(g.matmul(pooled, bm.hid("w_out")), bm.hid("b_out"));
      const int label = data.y[static_cast<std::size_t>(sample)];
      loss = g.cross_entropy_with_logits(logits, {label});
      ev.total += 1;
      if (argmax_row(g.value(logits), 0, m.num_classes) == label) ev.correct += 1;
    }
    loss_sum = loss_sum < 0 ? loss : g.add(loss_sum, loss);
  }
  ev.loss_node = g.scale(loss_sum, 1.0 / static_cast<double>(idx.size()));
  ev.loss = g.value(ev.loss_node)[0];
  return ev;
}

inline BatchEval forward_lstm(Graph& g, const BoundModel& bm,
                              const Dataset& data, const std::vector<int>& idx) {
  const Model& m = *bm.model;
  const int b_count = static_cast<int>(idx.size());
  const int seq_len = data.x.front().dim(0);
  const int in_dim = data.x.front().dim(1);

  std::vector<LstmNodes> states(bm.blocks.size());
  for (auto& s : states) {
    s.c = g.constant(Tensor({b_count, m.width}));
    s.h = g.constant(Tensor({b_count, m.width}));
  }

  BatchEval ev;
  int loss_sum = -1;
  std::vector<int> step_logits;
  for (int t = 0; t < seq_len; ++t) {
    Tensor xt({b_count, in_dim});
    for (int r = 0; r < b_count; ++r) {
      const Tensor& seq = data.x[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])];
      for (int j = 0; j < in_dim; ++j)
        xt.at(r, j) = seq.at(t, j);
    }
    int layer_in = g.constant(xt);
    for (std::size_t l = 0; l < bm.blocks.size(); ++l) {
      states[l] = lstm_step(g, states[l], layer_in, bm.blocks[l]);
      layer_in = states[l].h;
    }
    if (data.sequence_targets) {
      const int logits =
          g.add(g.matmul(layer_in, bm.hid("w_out")), bm.hid("b_out"));
      std::vector<int> labels_t(idx.size());
      for (int r = 0; r < b_count; ++r)
        labels_t[static_cast<std::size_t>(r)] =
            data.y_seq[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])]
                      [static_cast<std::size_t>(t)];
      const int loss_t = g.cross_entropy_with_logits(logits, labels_t);
      loss_sum = loss_sum < 0 ? loss_t : g.add(loss_sum, loss_t);
      const Tensor& lv = g.value(logits);
      for (int r = 0; r < b_count; ++r) {
        if (labels_t[static_cast<std::size_t>(r)] == 0) continue;
        ev.total += 1;
        if (argmax_row(lv, r, m.num_classes) == labels_t[static_cast<std::size_t>(r)])
          ev.correct += 1;
      }
    } else {
      if (t == seq_len - 1) step_logits.push_back(layer_in);
    }
  }

  if (data.sequence_targets) {
    ev.loss_node = g.scale(loss_sum, 1.0 / static_cast<double>(seq_len));
  } else {
    const int logits =
        g.add(g.matmul(step_logits.back(), bm.hid("w_out")), bm.hid("b_out"));
    std::vector<int> labels(idx.size());
    for (int r = 0; r < b_count; ++r)
      labels[static_cast<std::size_t>(r)] =
          data.y[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)])];
    ev.loss_node = g.cross_entropy_with_logits(logits, labels);
    const Tensor& lv = g.value(logits);
    for (int r = 0; r < b_count; ++r) {
      ev.total += 1;
      if (argmax_row(lv, r, m.num_classes) == labels[static_cast<std::size_t>(r)])
        ev.correct += 1;
    }
  }
  ev.loss = g.value(ev.loss_node)[0];
  return ev;
}

}  // namespace detail

inline BatchEval model_forward(Graph& g, const BoundModel& bm,
                               const Dataset& data, const std::vector<int>& idx) {
  switch (bm.model->kind) {
    case ModelKind::res_mlp: return detail::forward_res_mlp(g, bm, data, idx);
    case ModelKind::res_cnn: return detail::forward_res_cnn(g, bm, data, idx);
    case ModelKind::transformer:
      return detail::forward_transformer(g, bm, data, idx);
    case ModelKind::lstm: return detail::forward_lstm(g, bm, data, idx);
  }
  throw std::logic_error("unhandled model kind");
}

// SGD with momentum or Adam; state is addressed by parameter index, so the
// parameter registry order must stay stable across steps.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, double momentum)
      : kind_(kind), lr_(lr), momentum_(momentum) {}

  void step(std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (state_.size() != params.size()) {
      state_.assign(params.size(), {});
      state2_.assign(params.size(), {});
    }
    ++t_;
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (grads[i].empty()) continue;
      Tensor& p = *params[i];
      if (state_[i].empty()) state_[i] = Tensor(p.shape());
      if (kind_ == OptimizerKind::sgd_momentum) {
        Tensor& v = state_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
          v[j] = momentum_ * v[j] - lr_ * grads[i][j];
          p[j] += v[j];
        }
      } else {
        if (state2_[i].empty()) state2_[i] = Tensor(p.shape());
        Tensor& mo = state_[i];
        Tensor& ve = state2_[i];
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(b1, t_);
        const double bc2 = 1.0 - std::pow(b2, t_);
        for (std::size_t j = 0; j < p.size(); ++j) {
          const double gj = grads[i][j];
          mo[j] = b1 * mo[j] + (1.0 - b1) * gj;
          ve[j] = b2 * ve[j] + (1.0 - b2) * gj * gj;
          p[j] -= lr_ * (mo[j] / bc1) / (std::sqrt(ve[j] / bc2) + eps);
        }
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  int t_ = 0;
  std::vector<Tensor> state_;
  std::vector<Tensor> state2_;
};

inline std::vector<Tensor*> trainable_tensors(Model& m) {
  std::vector<Tensor*> out;
  for (auto& [name, t] : m.head) out.push_back(&t);
  for (auto& blk : m.blocks)
    for (auto& [name, t] : blk.params) out.push_back(&t);
  return out;
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg,
                                 const EntanglementSpec& spec,
                                 std::uint64_t seed) {
  std::ostringstream os;
  os << to_string(cfg.task) << '|' << to_string(cfg.model) << '|' << cfg.depth
     << '|' << cfg.width << '|' << cfg.channels << '|' << cfg.epochs << '|'
     << cfg.batch_size << '|' << to_string(cfg.optimizer) << '|'
     << format_g17(cfg.lr) << '|' << format_g17(cfg.momentum) << '|'
     << format_g17(cfg.grad_clip) << '|' << cfg.lstm_literal << '|'
     << spec.format() << '|' << seed;
  return fnv1a(os.str());
}

namespace detail {

struct SplitEval {
  double loss = 0.0;
  double acc = 0.0;
};

inline SplitEval evaluate_split(const Model& m, const Dataset& data,
                                int batch_size) {
  double loss_weighted = 0.0;
  long correct = 0, total = 0;
  const int n = static_cast<int>(data.size());
  for (int begin = 0; begin < n; begin += batch_size) {
    const int end = std::min(n, begin + batch_size);
    std::vector<int> idx(static_cast<std::size_t>(end - begin));
    std::iota(idx.begin(), idx.end(), begin);
    Graph g;
    const BoundModel bm = bind_model(g, m, false);
    const BatchEval ev = model_forward(g, bm, data, idx);
    loss_weighted += ev.loss * static_cast<double>(idx.size());
    correct += ev.correct;
    total += ev.total;
  }
  return {loss_weighted / std::max(1, n),
          total > 0 ? static_cast<double>(correct) / total : 0.0};
}

}  // namespace detail

// One full training run. Deterministic per (config, spec, seed): fixed init,
// fixed data, fixed shuffle stream. A non-finite loss records a failure
// status and ends the run; it does not throw.
inline RunMetrics train_run(const ExperimentConfig& cfg,
                            const EntanglementSpec& spec, std::uint64_t seed,
                            std::ostream* csv = nullptr, Model* out_model = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  RunMetrics metrics;
  metrics.seed = seed;
  metrics.config_hash = config_hash(cfg, spec, seed);

  Rng rng(seed);
  const TaskData data = gen_dataset(cfg.task, seed);
  Model model = build_model(cfg, spec, rng);
  std::vector<Tensor*> params = trainable_tensors(model);
  Optimizer opt(cfg.optimizer, cfg.lr, cfg.momentum);

  if (csv) *csv << "epoch,train_loss,train_acc,test_acc\n";
  auto emit = [&](int epoch, double tl, double ta, double va) {
    metrics.train_loss.push_back(tl);
    metrics.train_acc.push_back(ta);
    metrics.test_acc.push_back(va);
    if (csv)
      *csv << epoch << ',' << format_g17(tl) << ',' << format_g17(ta) << ','
           << format_g17(va) << '\n';
  };

  try {
    const auto init_train = detail::evaluate_split(model, data.train, cfg.batch_size);
    const auto init_test = detail::evaluate_split(model, data.test, cfg.batch_size);
    emit(0, init_train.loss, init_train.acc, init_test.acc);

    std::vector<int> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      rng.shuffle(order);
      double loss_weighted = 0.0;
      long correct = 0, total = 0;
      for (std::size_t begin = 0; begin < order.size();
           begin += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end =
            std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
        const std::vector<int> idx(order.begin() + static_cast<long>(begin),
                                   order.begin() + static_cast<long>(end));
        Graph g;
        const BoundModel bm = bind_model(g, model, true);
        const BatchEval ev = model_forward(g, bm, data.train, idx);
        if (!std::isfinite(ev.loss))
          throw std::runtime_error("loss diverged to non-finite");
        g.backward(ev.loss_node);

        std::vector<Tensor> grads;
        grads.reserve(params.size());
        for (std::size_t i = 0; i < bm.head_ids.size(); ++i)
          grads.push_back(g.grad(bm.head_ids[i]));
        for (const auto& blk : bm.blocks)
          for (int pid : blk.param_ids) grads.push_back(g.grad(pid));
        if (cfg.grad_clip > 0.0) {
          double norm2 = 0.0;
          for (const auto& gr : grads)
            for (std::size_t j = 0; j < gr.size(); ++j) norm2 += gr[j] * gr[j];
          const double norm = std::sqrt(norm2);
          if (norm > cfg.grad_clip) {
            const double s = cfg.grad_clip / norm;
            for (auto& gr : grads)
              for (std::size_t j = 0; j < gr.size(); ++j) gr[j] *= s;
          }
        }
        opt.step(params, grads);

        loss_weighted += ev.loss * static_cast<double>(idx.size());
        correct += ev.correct;
        total += ev.total;
      }
      const auto test_eval = detail::evaluate_split(model, data.test, cfg.batch_size);
      emit(epoch, loss_weighted / static_cast<double>(order.size()),
           total > 0 ? static_cast<double>(correct) / total : 0.0,
           test_eval.acc);
    }
  } catch (const std::exception& e) {
    metrics.failed = true;
    metrics.failure = e.what();
  }

  for (double acc : metrics.test_acc)
    metrics.best_test_acc = std::max(metrics.best_test_acc, acc);
  metrics.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (out_model) *out_model = std::move(model);
  return metrics;
}

inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model m;
  m.kind = model_from_string(ckpt.meta_value("model"));
  m.task = task_from_string(ckpt.meta_value("task"));
  m.depth = std::stoi(ckpt.meta_value("depth", "0"));
  m.width = std::stoi(ckpt.meta_value("width", "0"));
  m.channels = std::stoi(ckpt.meta_value("channels", "0"));
  m.num_classes = std::stoi(ckpt.meta_value("classes", "0"));
  m.input_dim = std::stoi(ckpt.meta_value("input_dim", "0"));
  m.head = ckpt.head;
  m.blocks = ckpt.blocks;
  if (!m.blocks.empty()) m.spec = m.blocks.front().spec;
  return m;
}

// Features entering the residual chain: the input head applied to the first
// `count` samples of the split. (B, width) for mlp models, (B, H, W, C) for
// conv models.
inline Tensor stem_features(const Model& m, const Dataset& data, int count) {
  count = std::min<int>(count, static_cast<int>(data.size()));
  if (count < 1) throw std::invalid_argument("stem_features: empty split");
  if (m.kind == ModelKind::res_mlp) {
    Tensor out({count, m.width});
    for (int s = 0; s < count; ++s) {
      const Tensor& raw = data.x[static_cast<std::size_t>(s)];
      Graph g;
      int w_id = -1, b_id = -1;
      for (const auto& [name, t] : m.head) {
        if (name == "w_in") w_id = g.constant(t);
        if (name == "b_in") b_id = g.constant(t);
      }
      const int h = g.relu(
          g.add(g.matmul(g.constant(Tensor({1, m.input_dim}, raw.vec())), w_id),
                b_id));
      for (int j = 0; j < m.width; ++j)
        out.at(s, j) = g.value(h)[static_cast<std::size_t>(j)];
    }
    return out;
  }
  if (m.kind == ModelKind::res_cnn) {
    const int side = detail::kDigitSide;
    Tensor out({count, side, side, m.channels});
    for (int s = 0; s < count; ++s) {
      Graph g;
      int k_id = -1, b_id = -1;
      for (const auto& [name, t] : m.head) {
        if (name == "k_stem") k_id = g.constant(t);
        if (name == "b_stem") b_id = g.constant(t);
      }
      const int h = g.relu(
          g.add(g.conv2d(g.constant(data.x[static_cast<std::size_t>(s)]), k_id),
                b_id));
      const Tensor& hv = g.value(h);
      for (std::size_t j = 0; j < hv.size(); ++j)
        out[static_cast<std::size_t>(s) * hv.size() + j] = hv[j];
    }
    return out;
  }
  throw std::invalid_argument(
      "stem_features: refinement tracing expects a residual-chain model");
}

inline Checkpoint model_checkpoint(const Model& m) {
  Checkpoint ckpt;
  ckpt.meta = {{"model", to_string(m.kind)},
               {"task", to_string(m.task)},
               {"depth", std::to_string(m.depth)},
               {"width", std::to_string(m.width)},
               {"channels", std::to_string(m.channels)},
               {"classes", std::to_string(m.num_classes)},
               {"input_dim", std::to_string(m.input_dim)}};
  ckpt.blocks = m.blocks;
  ckpt.head = m.head;
  return ckpt;
}

// ---- sweep ------------------------------------------------------------------

struct SweepCell {
  EntanglementSpec spec;
  std::uint64_t seed = 0;
  RunMetrics metrics;
  std::string run_file;
};

struct SweepSummaryRow {
  std::string spec;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  int n_seeds = 0;
  int failures = 0;
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::vector<SweepSummaryRow> summary;
  std::string summary_file;
};

inline void write_summary_csv(std::ostream& os,
                              const std::vector<SweepSummaryRow>& rows) {
  os << "spec,mean_acc,std_acc,n_seeds,failures\n";
  for (const auto& r : rows)
    os << r.spec << ',' << format_g17(r.mean_acc) << ',' << format_g17(r.std_acc)
       << ',' << r.n_seeds << ',' << r.failures << '\n';
}

// Cartesian product of entanglement specs and seeds, executed independently
// (in parallel when jobs > 1). Each run writes its own metrics CSV; the
// sweep writes summary.csv with mean/std of the best test accuracy per spec.
inline SweepResult sweep(const ExperimentConfig& cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.output_dir);

  SweepResult result;
  for (const auto& spec : cfg.entanglements)
    for (const auto seed : cfg.seeds) {
      SweepCell cell;
      cell.spec = spec;
      cell.seed = seed;
      cell.run_file = cfg.output_dir + "/run_" + spec.slug() + "_seed" +
                      std::to_string(seed) + ".csv";
      result.cells.push_back(std::move(cell));
    }

  const int hw = static_cast<int>(std::thread::hardware_concurrency());
  const int jobs = std::max(1, std::min<int>(cfg.jobs > 0 ? cfg.jobs : hw,
                                             static_cast<int>(result.cells.size())));
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= result.cells.size()) return;
      SweepCell& cell = result.cells[i];
      std::ostringstream csv;
      Model model;
      cell.metrics = train_run(cfg, cell.spec, cell.seed, &csv, &model);
      write_file(cell.run_file, csv.str());
      if (cfg.save_checkpoint) {
        std::ostringstream ck;
        save_checkpoint(ck, model_checkpoint(model));
        write_file(cfg.output_dir + "/ckpt_" + cell.spec.slug() + "_seed" +
                       std::to_string(cell.seed) + ".txt",
                   ck.str());
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t si = 0; si < cfg.entanglements.size(); ++si) {
    SweepSummaryRow row;
    row.spec = cfg.entanglements[si].format();
    std::vector<double> accs;
    for (const auto& cell : result.cells) {
      if (cell.spec.format() != row.spec) continue;
      row.n_seeds += 1;
      if (cell.metrics.failed)
        row.failures += 1;
      else
        accs.push_back(cell.metrics.best_test_acc);
    }
    if (!accs.empty()) {
      row.mean_acc = std::accumulate(accs.begin(), accs.end(), 0.0) /
                     static_cast<double>(accs.size());
      double var = 0.0;
      for (double a : accs) var += (a - row.mean_acc) * (a - row.mean_acc);
      row.std_acc = accs.size() > 1
                        ? std::sqrt(var / static_cast<double>(accs.size() - 1))
                        : 0.0;
    } else {
      row.mean_acc = std::numeric_limits<double>::quiet_NaN();
      row.std_acc = std::numeric_limits<double>::quiet_NaN();
    }
    result.summary.push_back(std::move(row));
  }

  result.summary_file = cfg.output_dir + "/summary.csv";
  std::ostringstream os;
  write_summary_csv(os, result.summary);
  write_file(result.summary_file, os.str());
  return result;
}

}  // namespace entangle
