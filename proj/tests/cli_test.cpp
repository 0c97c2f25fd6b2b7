#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "entangle/io.hpp"

#ifndef ENTANGLE_CLI_PATH
#error "ENTANGLE_CLI_PATH must point at the built binary"
#endif

namespace {

namespace fs = std::filesystem;
const std::string kCli = ENTANGLE_CLI_PATH;

int run(const std::string& args, const std::string& out_file = "/dev/null") {
  const int rc = std::system((kCli + " " + args + " > " + out_file + " 2>&1").c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

fs::path scratch() {
  const auto dir = fs::temp_directory_path() / "entangle_cli_test";
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Cli, SpectrumPrintsDenseEigenvalues) {
  const auto out = (scratch() / "spectrum.txt").string();
  ASSERT_EQ(run("spectrum --kind dense --n 3 --gamma 0.4", out), 0);
  const std::string text = entangle::read_file(out);
  EXPECT_NE(text.find("eigenvalues: 1 0.6 0.6"), std::string::npos) << text;
}

TEST(Cli, MakeKernelIsByteDeterministic) {
  const auto f1 = (scratch() / "k1.txt").string();
  const auto f2 = (scratch() / "k2.txt").string();
  ASSERT_EQ(run("make-kernel --kind channel_spatial --c 3 --k 3 --gamma 0.5 --out " + f1), 0);
  ASSERT_EQ(run("make-kernel --kind channel_spatial --c 3 --k 3 --gamma 0.5 --out " + f2), 0);
  EXPECT_EQ(entangle::read_file(f1), entangle::read_file(f2));
  EXPECT_EQ(entangle::read_file(f1).rfind("ENTANGLE-KERNEL v1\n", 0), 0u);
}

TEST(Cli, TrainThenRefineTraceRoundTrip) {
  const auto dir = scratch() / "train_out";
  fs::remove_all(dir);
  const auto cfg_path = (scratch() / "train.cfg").string();
  std::ofstream cfg(cfg_path);
  cfg << "[experiment]\n"
         "task = spiral2d\n"
         "model = res_mlp\n"
         "depth = 3\n"
         "width = 8\n"
         "epochs = 1\n"
         "batch_size = 64\n"
         "lr = 0.05\n"
         "seeds = 4\n"
         "save_checkpoint = 1\n"
         "output_dir = " << dir.string() << "\n"
         "[entanglement]\n"
         "kind = dense\n"
         "gamma = 0.1\n";
  cfg.close();

  ASSERT_EQ(run("train --config " + cfg_path), 0);
  const auto run_csv = dir / "run_dense_g0.1_seed4.csv";
  const auto ckpt = dir / "ckpt_dense_g0.1_seed4.txt";
  ASSERT_TRUE(fs::exists(run_csv));
  ASSERT_TRUE(fs::exists(ckpt));
  EXPECT_EQ(entangle::read_file(run_csv.string())
                .rfind("epoch,train_loss,train_acc,test_acc\n", 0),
            0u);

  const auto trace_csv = (scratch() / "trace.csv").string();
  ASSERT_EQ(run("refine-trace --ckpt " + ckpt.string() + " --batch 4 --out " +
                trace_csv),
            0);
  const std::string trace = entangle::read_file(trace_csv);
  EXPECT_EQ(trace.rfind("block_index,x_norm,f_norm,gamma_x_norm,", 0), 0u);
  // one row per block plus header
  EXPECT_EQ(std::count(trace.begin(), trace.end(), '\n'), 4);
}

TEST(Cli, SweepWritesSummary) {
  const auto dir = scratch() / "sweep_out";
  fs::remove_all(dir);
  const auto cfg_path = (scratch() / "sweep.cfg").string();
  std::ofstream cfg(cfg_path);
  cfg << "[experiment]\n"
         "task = spiral2d\n"
         "model = res_mlp\n"
         "depth = 2\n"
         "width = 8\n"
         "epochs = 0\n"
         "batch_size = 64\n"
         "lr = 0.05\n"
         "seeds = 1,2\n"
         "output_dir = " << dir.string() << "\n"
         "[entanglement]\n"
         "kind = identity\n"
         "[entanglement]\n"
         "kind = none\n";
  cfg.close();
  ASSERT_EQ(run("sweep --config " + cfg_path), 0);
  const std::string summary = entangle::read_file((dir / "summary.csv").string());
  EXPECT_EQ(summary.rfind("spec,mean_acc,std_acc,n_seeds,failures\n", 0), 0u);
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 3);
}

TEST(Cli, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run("no-such-command"), 2);
  EXPECT_EQ(run("train --config /does/not/exist.cfg"), 2);
  EXPECT_EQ(run("make-kernel --kind bogus"), 2);
  EXPECT_EQ(run("spectrum --kind spatial --c 2 --k 2"), 2);  // even kernel
}
