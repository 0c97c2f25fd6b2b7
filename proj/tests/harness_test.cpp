#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "entangle/config.hpp"
#include "entangle/datasets.hpp"
#include "entangle/train.hpp"

using namespace entangle;

namespace {

std::string run_csv(const ExperimentConfig& cfg, const EntanglementSpec& spec,
                    std::uint64_t seed, RunMetrics* out = nullptr,
                    Model* model = nullptr) {
  std::ostringstream os;
  const RunMetrics m = train_run(cfg, spec, seed, &os, model);
  if (out) *out = m;
  return os.str();
}

ExperimentConfig tiny_mlp_config() {
  ExperimentConfig cfg;
  cfg.task = Task::spiral2d;
  cfg.model = ModelKind::res_mlp;
  cfg.depth = 2;
  cfg.width = 8;
  cfg.epochs = 2;
  cfg.batch_size = 64;
  cfg.lr = 0.05;
  cfg.entanglements = {EntanglementSpec{}};
  return cfg;
}

}  // namespace

TEST(Datasets, DeterministicPerSeed) {
  for (Task task : {Task::spiral2d, Task::copy_memory}) {
    const TaskData a = gen_dataset(task, 11);
    const TaskData b = gen_dataset(task, 11);
    ASSERT_EQ(a.train.size(), b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
      ASSERT_EQ(a.train.y[i], b.train.y[i]);
      for (std::size_t j = 0; j < a.train.x[i].size(); ++j)
        ASSERT_EQ(a.train.x[i][j], b.train.x[i][j]);
    }
  }
  const TaskData c = gen_dataset(Task::spiral2d, 11);
  const TaskData d = gen_dataset(Task::spiral2d, 12);
  EXPECT_NE(c.train.x[0][0], d.train.x[0][0]);
}

TEST(Datasets, SpiralBalancedAndSized) {
  const TaskData data = gen_dataset(Task::spiral2d, 3);
  EXPECT_EQ(data.train.size(), 1000u);
  EXPECT_EQ(data.test.size(), 500u);
  int n0 = 0, n1 = 0;
  for (int y : data.train.y) (y == 0 ? n0 : n1) += 1;
  EXPECT_LE(std::abs(n0 - n1), 1);
  EXPECT_EQ(data.train.num_classes, 2);
}

TEST(Datasets, DigitsLiteShapeAndBalance) {
  const TaskData data = gen_dataset(Task::digits_lite, 5);
  EXPECT_EQ(data.train.size(), 5000u);
  EXPECT_EQ(data.test.size(), 1000u);
  std::vector<int> counts(10, 0);
  for (int y : data.train.y) counts[static_cast<std::size_t>(y)] += 1;
  for (int c : counts) EXPECT_EQ(c, 500);
  for (int i = 0; i < 20; ++i) {
    const Tensor& img = data.train.x[static_cast<std::size_t>(i)];
    ASSERT_EQ(img.rank(), 3);
    EXPECT_EQ(img.dim(0), 14);
    EXPECT_EQ(img.dim(1), 14);
    EXPECT_EQ(img.dim(2), 1);
    for (std::size_t j = 0; j < img.size(); ++j) {
      EXPECT_GE(img[j], 0.0);
      EXPECT_LE(img[j], 1.0);
    }
  }
}

TEST(Datasets, SeqPixelIsFlattenedDigits) {
  const TaskData img = gen_dataset(Task::digits_lite, 7);
  const TaskData seq = gen_dataset(Task::seq_pixel, 7);
  ASSERT_EQ(img.train.size(), seq.train.size());
  ASSERT_EQ(seq.train.x[0].rank(), 2);
  EXPECT_EQ(seq.train.x[0].dim(0), 196);
  EXPECT_EQ(seq.train.x[0].dim(1), 1);
  for (std::size_t j = 0; j < 196; ++j)
    EXPECT_EQ(seq.train.x[0][j], img.train.x[0][j]);
  EXPECT_EQ(seq.train.y[0], img.train.y[0]);
}

TEST(Datasets, IdentityPermutationEqualsSeqPixel) {
  const TaskData seq = gen_dataset(Task::seq_pixel, 9);
  std::vector<int> identity(196);
  std::iota(identity.begin(), identity.end(), 0);
  const Dataset permuted = apply_sequence_permutation(seq.train, identity);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < permuted.x[i].size(); ++j)
      ASSERT_EQ(permuted.x[i][j], seq.train.x[i][j]);
}

TEST(Datasets, PermutedSharesOnePermutationAcrossSplits) {
  const TaskData seq = gen_dataset(Task::seq_pixel, 9);
  const TaskData perm = gen_dataset(Task::permuted_seq_pixel, 9);
  const auto p = pixel_permutation(196);
  for (std::size_t i : {std::size_t(0), std::size_t(3)}) {
    for (int t = 0; t < 196; ++t) {
      ASSERT_EQ(perm.train.x[i].at(t, 0),
                seq.train.x[i].at(p[static_cast<std::size_t>(t)], 0));
      ASSERT_EQ(perm.test.x[i].at(t, 0),
                seq.test.x[i].at(p[static_cast<std::size_t>(t)], 0));
    }
  }
}

TEST(Datasets, CopyMemoryStructure) {
  const TaskData data = gen_dataset(Task::copy_memory, 13);
  EXPECT_EQ(data.train.size(), 1024u);
  EXPECT_TRUE(data.train.sequence_targets);
  const Tensor& x = data.train.x[0];
  const auto& target = data.train.y_seq[0];
  ASSERT_EQ(x.dim(0), 57);
  ASSERT_EQ(x.dim(1), 10);
  for (int t = 0; t < 57; ++t) {
    double row_sum = 0.0;
    for (int k = 0; k < 10; ++k) row_sum += x.at(t, k);
    EXPECT_EQ(row_sum, 1.0);  // one-hot
  }
  // first three inputs are the symbols recalled at the last three positions
  for (int r = 0; r < 3; ++r) {
    int sym = -1;
    for (int k = 0; k < 10; ++k)
      if (x.at(r, k) == 1.0) sym = k;
    EXPECT_GE(sym, 1);
    EXPECT_LE(sym, 8);
    EXPECT_EQ(target[static_cast<std::size_t>(54 + r)], sym);
  }
  for (int t = 0; t < 54; ++t) EXPECT_EQ(target[static_cast<std::size_t>(t)], 0);
  // trigger right before recall
  EXPECT_EQ(x.at(53, 9), 1.0);
}

TEST(Config, ParsesFullFile) {
  const std::string text = R"(
# experiment settings
[experiment]
task = digits_lite
model = res_cnn
depth = 6
channels = 4
epochs = 3
batch_size = 16
optimizer = sgd_momentum
lr = 0.08
momentum = 0.9
seeds = 1, 2, 3
output_dir = /tmp/entangle_cfg_test

[entanglement]
kind = spatial
gamma = 0.1
kernel_size = 3

[entanglement]
kind = channel
gamma = 1.0
)";
  const ExperimentConfig cfg = parse_config_text(text);
  EXPECT_EQ(cfg.task, Task::digits_lite);
  EXPECT_EQ(cfg.model, ModelKind::res_cnn);
  EXPECT_EQ(cfg.depth, 6);
  ASSERT_EQ(cfg.seeds.size(), 3u);
  EXPECT_EQ(cfg.seeds[2], 3u);
  ASSERT_EQ(cfg.entanglements.size(), 2u);
  EXPECT_EQ(cfg.entanglements[0].kind, EntangleKind::spatial);
  EXPECT_EQ(cfg.entanglements[1].kind, EntangleKind::channel);
  EXPECT_DOUBLE_EQ(cfg.entanglements[1].gamma, 1.0);
}

TEST(Config, ModelDependentDefaults) {
  const ExperimentConfig lstm_cfg = parse_config_text(
      "[experiment]\ntask = copy_memory\nmodel = lstm\n[entanglement]\nkind = identity\n");
  EXPECT_EQ(lstm_cfg.optimizer, OptimizerKind::adam);
  EXPECT_DOUBLE_EQ(lstm_cfg.lr, 5e-4);
  const ExperimentConfig mlp_cfg = parse_config_text(
      "[experiment]\ntask = spiral2d\nmodel = res_mlp\n[entanglement]\nkind = identity\n");
  EXPECT_EQ(mlp_cfg.optimizer, OptimizerKind::sgd_momentum);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config_text("[experiment]\nbogus_key = 1\n"),
               std::invalid_argument);
  EXPECT_THROW(parse_config_text("[bogus]\n"), std::invalid_argument);
  EXPECT_THROW(parse_config_text("task = spiral2d\n"), std::invalid_argument);
  EXPECT_THROW(
      parse_config_text("[experiment]\ntask = spiral2d\nmodel = lstm\n"),
      std::invalid_argument);  // incompatible task/model
  EXPECT_THROW(
      parse_config_text("[experiment]\ntask = spiral2d\nmodel = res_mlp\nlr = -1\n"),
      std::invalid_argument);
}

TEST(Train, DeterministicMetricsPerSeed) {
  const ExperimentConfig cfg = tiny_mlp_config();
  const std::string a = run_csv(cfg, cfg.entanglements[0], 5);
  const std::string b = run_csv(cfg, cfg.entanglements[0], 5);
  EXPECT_EQ(a, b);
  const std::string c = run_csv(cfg, cfg.entanglements[0], 6);
  EXPECT_NE(a, c);
  EXPECT_EQ(a.rfind("epoch,train_loss,train_acc,test_acc\n", 0), 0u);
}

TEST(Train, IdentityAndDenseGammaZeroAreIdenticalPerSeed) {
  const ExperimentConfig cfg = tiny_mlp_config();
  EntanglementSpec identity;
  EntanglementSpec dense0;
  dense0.kind = EntangleKind::dense;
  dense0.gamma = 0.0;
  EXPECT_EQ(run_csv(cfg, identity, 7), run_csv(cfg, dense0, 7));
}

TEST(Train, ZeroEpochRunContainsOnlyInitEvaluation) {
  ExperimentConfig cfg = tiny_mlp_config();
  cfg.epochs = 0;
  RunMetrics m;
  run_csv(cfg, cfg.entanglements[0], 3, &m);
  EXPECT_EQ(m.train_loss.size(), 1u);
  EXPECT_EQ(m.test_acc.size(), 1u);
  EXPECT_FALSE(m.failed);
}

TEST(Train, DivergenceIsRecordedNotThrown) {
  ExperimentConfig cfg = tiny_mlp_config();
  cfg.lr = 1e12;
  cfg.epochs = 3;
  RunMetrics m;
  EXPECT_NO_THROW(run_csv(cfg, cfg.entanglements[0], 4, &m));
  EXPECT_TRUE(m.failed);
  EXPECT_FALSE(m.failure.empty());
}

TEST(Train, EntanglementTensorUntouchedByTraining) {
  ExperimentConfig cfg = tiny_mlp_config();
  cfg.epochs = 1;
  EntanglementSpec spec;
  spec.kind = EntangleKind::dense;
  spec.gamma = 0.3;
  Model model;
  run_csv(cfg, spec, 8, nullptr, &model);
  const Tensor after = model.blocks[0].ent.operator_tensor();
  const DenseMatrix fresh = make_dense_gamma(cfg.width, 0.3);
  ASSERT_EQ(after.size(), fresh.size());
  for (std::size_t i = 0; i < after.size(); ++i)
    EXPECT_EQ(after[i], fresh.vec()[i]);
}

TEST(Train, SpiralBaselineLearns) {
  // depth-4 residual MLP at gamma=0 separates the spirals
  ExperimentConfig cfg = tiny_mlp_config();
  cfg.depth = 4;
  cfg.width = 32;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  cfg.lr = 0.05;
  EntanglementSpec dense0;
  dense0.kind = EntangleKind::dense;
  dense0.gamma = 0.0;
  RunMetrics m;
  run_csv(cfg, dense0, 1, &m);
  ASSERT_FALSE(m.failed) << m.failure;
  EXPECT_GE(m.best_test_acc, 0.95);
}

TEST(Sweep, CellCountingAndSummary) {
  ExperimentConfig cfg = tiny_mlp_config();
  cfg.epochs = 1;
  cfg.seeds = {1, 2, 3};
  cfg.output_dir = "/tmp/entangle_sweep_test";
  std::filesystem::remove_all(cfg.output_dir);
  const SweepResult result = sweep(cfg);
  EXPECT_EQ(result.cells.size(), 3u);
  ASSERT_EQ(result.summary.size(), 1u);
  EXPECT_EQ(result.summary[0].n_seeds, 3);
  EXPECT_EQ(result.summary[0].failures, 0);
  EXPECT_TRUE(std::filesystem::exists(result.summary_file));
  for (const auto& cell : result.cells)
    EXPECT_TRUE(std::filesystem::exists(cell.run_file));
  const std::string summary = read_file(result.summary_file);
  EXPECT_EQ(summary.rfind("spec,mean_acc,std_acc,n_seeds,failures\n", 0), 0u);
}

TEST(Sweep, DuplicateSpecsKeepDuplicateRows) {
  ExperimentConfig cfg = tiny_mlp_config();
  cfg.epochs = 0;
  cfg.seeds = {1};
  cfg.entanglements = {EntanglementSpec{}, EntanglementSpec{}};
  cfg.output_dir = "/tmp/entangle_sweep_dup";
  std::filesystem::remove_all(cfg.output_dir);
  const SweepResult result = sweep(cfg);
  EXPECT_EQ(result.cells.size(), 2u);
  EXPECT_EQ(result.summary.size(), 2u);
}

TEST(Train, ConfigHashSeparatesRuns) {
  const ExperimentConfig cfg = tiny_mlp_config();
  EntanglementSpec dense;
  dense.kind = EntangleKind::dense;
  dense.gamma = 0.1;
  EXPECT_NE(config_hash(cfg, cfg.entanglements[0], 1),
            config_hash(cfg, cfg.entanglements[0], 2));
  EXPECT_NE(config_hash(cfg, cfg.entanglements[0], 1),
            config_hash(cfg, dense, 1));
}

TEST(Train, LstmSmokeOnCopyMemory) {
  ExperimentConfig cfg;
  cfg.task = Task::copy_memory;
  cfg.model = ModelKind::lstm;
  cfg.depth = 1;
  cfg.width = 16;
  cfg.epochs = 1;
  cfg.batch_size = 64;
  cfg.optimizer = OptimizerKind::adam;
  cfg.lr = 5e-3;
  cfg.entanglements = {EntanglementSpec{}};
  RunMetrics m;
  run_csv(cfg, cfg.entanglements[0], 2, &m);
  ASSERT_FALSE(m.failed) << m.failure;
  ASSERT_EQ(m.train_loss.size(), 2u);
  EXPECT_LT(m.train_loss[1], m.train_loss[0]);
}

TEST(Train, TransformerSmokeOnCopyMemory) {
  ExperimentConfig cfg;
  cfg.task = Task::copy_memory;
  cfg.model = ModelKind::transformer;
  cfg.depth = 1;
  cfg.width = 8;
  cfg.epochs = 1;
  cfg.batch_size = 128;
  cfg.optimizer = OptimizerKind::adam;
  cfg.lr = 1e-3;
  EntanglementSpec spec;
  spec.kind = EntangleKind::channel;
  spec.gamma = 0.1;
  cfg.entanglements = {spec};
  RunMetrics m;
  run_csv(cfg, spec, 2, &m);
  ASSERT_FALSE(m.failed) << m.failure;
  EXPECT_LT(m.train_loss[1], m.train_loss[0]);
}
