// Command-line front end: kernel export, spectrum reports, training runs,
// sweeps, refinement traces, and the built-in invariant suite.
//
// Exit codes: 0 success, 1 invariant/assertion failure, 2 bad usage/config.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "entangle/config.hpp"
#include "entangle/io.hpp"
#include "entangle/refine.hpp"
#include "entangle/selfcheck.hpp"
#include "entangle/train.hpp"

namespace {

using nlohmann::json;

struct SpecOptions {
  std::string kind = "identity";
  double gamma = 0.0;
  int kernel_size = 0;
  int channels = 0;
  int dim = 0;
  std::uint64_t seed = 0;

  entangle::EntanglementSpec to_spec() const {
    entangle::EntanglementSpec s;
    s.kind = entangle::kind_from_string(kind);
    s.gamma = gamma;
    s.kernel_size = kernel_size;
    s.channels = channels;
    s.dim = dim;
    s.seed = seed;
    s.validate();
    return s;
  }
};

void add_spec_options(CLI::App* cmd, SpecOptions& opts) {
  cmd->add_option("--kind", opts.kind,
                  "identity|none|dense|orthogonal|spatial|channel|"
                  "channel_spatial|orthogonal_channel");
  cmd->add_option("--gamma", opts.gamma, "entanglement factor in [0,1]");
  cmd->add_option("--k,--kernel-size", opts.kernel_size, "odd window size");
  cmd->add_option("--c,--channels", opts.channels, "channel count");
  cmd->add_option("--n,--dim", opts.dim, "vector dimension");
  cmd->add_option("--seed", opts.seed, "generator seed (orthogonal kinds)");
}

void emit(const std::string& out_path, const std::string& content) {
  if (out_path.empty()) {
    std::cout << content;
  } else {
    entangle::write_file(out_path, content);
  }
}

json metrics_json(const entangle::RunMetrics& m) {
  json j;
  j["seed"] = m.seed;
  j["config_hash"] = m.config_hash;
  j["best_test_acc"] = m.best_test_acc;
  j["wall_time_s"] = m.wall_time_s;
  j["failed"] = m.failed;
  if (m.failed) j["failure"] = m.failure;
  j["train_loss"] = m.train_loss;
  j["train_acc"] = m.train_acc;
  j["test_acc"] = m.test_acc;
  return j;
}

int cmd_make_kernel(const SpecOptions& opts, bool seq, const std::string& out) {
  const auto spec = opts.to_spec();
  std::ostringstream os;
  entangle::write_kernel_file(os, spec, entangle::materialize_operator(spec, seq));
  emit(out, os.str());
  return 0;
}

int cmd_spectrum(const SpecOptions& opts, bool as_json) {
  const auto spec = opts.to_spec();
  const auto rep = entangle::spectrum_report(spec);
  if (as_json) {
    json j;
    j["spec"] = spec.format();
    j["has_matrix"] = rep.has_matrix;
    if (rep.has_matrix) {
      if (!rep.eigenvalues.empty()) j["eigenvalues"] = rep.eigenvalues;
      j["singular_values"] = rep.singular_values;
      j["spectral_norm"] = rep.spectral_norm;
      j["is_orthogonal"] = rep.is_orthogonal;
    } else {
      j["tap_l1"] = rep.tap_l1;
      j["tap_l2"] = rep.tap_l2;
    }
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  std::cout << "spec: " << spec.format() << '\n';
  if (rep.has_matrix) {
    if (!rep.eigenvalues.empty()) {
      std::cout << "eigenvalues:";
      for (double v : rep.eigenvalues) std::cout << ' ' << v;
      std::cout << '\n';
    }
    std::cout << "singular_values:";
    for (double v : rep.singular_values) std::cout << ' ' << v;
    std::cout << '\n';
    std::cout << "spectral_norm: " << rep.spectral_norm << '\n';
    std::cout << "is_orthogonal: " << (rep.is_orthogonal ? "true" : "false")
              << '\n';
  } else {
    std::cout << "per-channel tap norms: l1 " << rep.tap_l1 << ", l2 "
              << rep.tap_l2 << '\n';
  }
  return 0;
}

int cmd_train(const std::string& config_path, std::uint64_t seed_override,
              bool seed_given, const std::string& out_override, bool as_json) {
  entangle::ExperimentConfig cfg = entangle::parse_config_file(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  const std::uint64_t seed = seed_given ? seed_override : cfg.seeds.front();
  const entangle::EntanglementSpec spec = cfg.entanglements.front();

  std::filesystem::create_directories(cfg.output_dir);
  std::ostringstream csv;
  entangle::Model model;
  const entangle::RunMetrics metrics =
      entangle::train_run(cfg, spec, seed, &csv, &model);
  const std::string run_file = cfg.output_dir + "/run_" + spec.slug() +
                               "_seed" + std::to_string(seed) + ".csv";
  entangle::write_file(run_file, csv.str());
  if (cfg.save_checkpoint) {
    std::ostringstream ck;
    entangle::save_checkpoint(ck, entangle::model_checkpoint(model));
    entangle::write_file(cfg.output_dir + "/ckpt_" + spec.slug() + "_seed" +
                             std::to_string(seed) + ".txt",
                         ck.str());
  }
  if (as_json) {
    json j = metrics_json(metrics);
    j["spec"] = spec.format();
    j["run_file"] = run_file;
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << "run " << spec.format() << " seed " << seed << ": "
              << (metrics.failed ? "FAILED (" + metrics.failure + ")"
                                 : "best test acc " +
                                       std::to_string(metrics.best_test_acc))
              << "\nmetrics: " << run_file << '\n';
  }
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_override,
              bool as_json) {
  entangle::ExperimentConfig cfg = entangle::parse_config_file(config_path);
  if (!out_override.empty()) cfg.output_dir = out_override;
  const entangle::SweepResult result = entangle::sweep(cfg);
  if (as_json) {
    json j;
    j["summary_file"] = result.summary_file;
    j["cells"] = json::array();
    for (const auto& cell : result.cells) {
      json c = metrics_json(cell.metrics);
      c["spec"] = cell.spec.format();
      c["run_file"] = cell.run_file;
      j["cells"].push_back(std::move(c));
    }
    j["summary"] = json::array();
    for (const auto& row : result.summary)
      j["summary"].push_back({{"spec", row.spec},
                              {"mean_acc", row.mean_acc},
                              {"std_acc", row.std_acc},
                              {"n_seeds", row.n_seeds},
                              {"failures", row.failures}});
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << "spec,mean_acc,std_acc,n_seeds,failures\n";
    for (const auto& row : result.summary)
      std::cout << row.spec << ',' << row.mean_acc << ',' << row.std_acc << ','
                << row.n_seeds << ',' << row.failures << '\n';
    std::cout << "summary: " << result.summary_file << '\n';
  }
  return 0;
}

int cmd_refine_trace(const std::string& ckpt_path, int batch,
                     std::uint64_t seed, const std::string& out) {
  std::ifstream f(ckpt_path);
  if (!f) throw std::invalid_argument("cannot open checkpoint " + ckpt_path);
  const entangle::Checkpoint ckpt = entangle::load_checkpoint(f);
  const entangle::Model model = entangle::model_from_checkpoint(ckpt);
  const entangle::TaskData data = entangle::gen_dataset(model.task, seed);
  const entangle::Tensor features =
      entangle::stem_features(model, data.test, batch);
  const entangle::RefinementTrace trace =
      entangle::trace_refinement(model.blocks, features);
  std::ostringstream os;
  entangle::write_trace_csv(os, trace);
  emit(out, os.str());
  return 0;
}

int cmd_check(bool perturb, bool as_json) {
  entangle::CheckOptions opts;
  opts.perturb_kernel = perturb;
  const auto results = entangle::run_selfcheck(opts);
  bool all_pass = true;
  json j = json::array();
  for (const auto& r : results) {
    all_pass = all_pass && r.pass;
    if (as_json) {
      j.push_back({{"name", r.name}, {"pass", r.pass}, {"detail", r.detail}});
    } else {
      std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " — "
                << r.detail << '\n';
    }
  }
  if (as_json) std::cout << j.dump(2) << '\n';
  return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"entangled residual mapping toolkit"};
  app.require_subcommand(1);

  SpecOptions kernel_opts;
  bool kernel_seq = false;
  std::string kernel_out;
  auto* make_kernel = app.add_subcommand(
      "make-kernel", "materialize an entanglement operator to a kernel file");
  add_spec_options(make_kernel, kernel_opts);
  make_kernel->add_flag("--seq", kernel_seq, "emit the 1D (sequence) form");
  make_kernel->add_option("--out", kernel_out, "output file (default stdout)");

  SpecOptions spectrum_opts;
  bool spectrum_json = false;
  auto* spectrum =
      app.add_subcommand("spectrum", "eigen/singular spectrum of an operator");
  add_spec_options(spectrum, spectrum_opts);
  spectrum->add_flag("--json", spectrum_json, "machine-readable output");

  std::string train_config, train_out;
  std::uint64_t train_seed = 0;
  bool train_json = false;
  auto* train = app.add_subcommand("train", "single training run from a config");
  train->add_option("--config", train_config, "config file")->required();
  auto* train_seed_opt =
      train->add_option("--seed", train_seed, "override the config seed");
  train->add_option("--out", train_out, "override output_dir");
  train->add_flag("--json", train_json, "machine-readable output");

  std::string sweep_config, sweep_out;
  bool sweep_json = false;
  auto* sweep_cmd =
      app.add_subcommand("sweep", "entanglement x seed sweep from a config");
  sweep_cmd->add_option("--config", sweep_config, "config file")->required();
  sweep_cmd->add_option("--out", sweep_out, "override output_dir");
  sweep_cmd->add_flag("--json", sweep_json, "machine-readable output");

  std::string trace_ckpt, trace_out;
  int trace_batch = 8;
  std::uint64_t trace_seed = 1;
  auto* trace = app.add_subcommand(
      "refine-trace", "per-block refinement ratios and bounds from a checkpoint");
  trace->add_option("--ckpt", trace_ckpt, "checkpoint file")->required();
  trace->add_option("--batch", trace_batch, "samples to trace (default 8)");
  trace->add_option("--seed", trace_seed, "dataset seed (default 1)");
  trace->add_option("--out", trace_out, "output CSV (default stdout)");

  bool check_perturb = false, check_json = false;
  auto* check =
      app.add_subcommand("check", "run the built-in invariant suite (exit 1 on "
                                  "any violation)");
  check->add_flag(
      "--perturb-kernel", check_perturb,
      "self-test: perturb one entry of every checked kernel by 1e-6");
  check->add_flag("--json", check_json, "machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (make_kernel->parsed())
      return cmd_make_kernel(kernel_opts, kernel_seq, kernel_out);
    if (spectrum->parsed()) return cmd_spectrum(spectrum_opts, spectrum_json);
    if (train->parsed())
      return cmd_train(train_config, train_seed, train_seed_opt->count() > 0,
                       train_out, train_json);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_config, sweep_out, sweep_json);
    if (trace->parsed())
      return cmd_refine_trace(trace_ckpt, trace_batch, trace_seed, trace_out);
    if (check->parsed()) return cmd_check(check_perturb, check_json);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
