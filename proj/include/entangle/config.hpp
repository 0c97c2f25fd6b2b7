#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "entangle/datasets.hpp"
#include "entangle/spec.hpp"

namespace entangle {

enum class ModelKind { res_mlp, res_cnn, transformer, lstm };

inline const char* to_string(ModelKind m) {
  switch (m) {
    case ModelKind::res_mlp: return "res_mlp";
    case ModelKind::res_cnn: return "res_cnn";
    case ModelKind::transformer: return "transformer";
    case ModelKind::lstm: return "lstm";
  }
  return "?";
}

inline ModelKind model_from_string(const std::string& s) {
  if (s == "res_mlp") return ModelKind::res_mlp;
  if (s == "res_cnn") return ModelKind::res_cnn;
  if (s == "transformer") return ModelKind::transformer;
  if (s == "lstm") return ModelKind::lstm;
  throw std::invalid_argument("unknown model: " + s);
}

enum class OptimizerKind { sgd_momentum, adam };

inline const char* to_string(OptimizerKind o) {
  return o == OptimizerKind::sgd_momentum ? "sgd_momentum" : "adam";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd_momentum") return OptimizerKind::sgd_momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

struct ExperimentConfig {
  Task task = Task::spiral2d;
  ModelKind model = ModelKind::res_mlp;
  int depth = 2;
  int width = 16;
  int channels = 4;
  int epochs = 5;
  int batch_size = 32;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  double lr = 0.05;
  double momentum = 0.9;
  double grad_clip = 0.0;  // global-norm clip; 0 disables
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "out";
  bool lstm_literal = false;
  bool save_checkpoint = false;
  int jobs = 0;  // 0 = one worker per hardware thread
  std::vector<EntanglementSpec> entanglements;

  void validate() const {
    if (depth < 1) throw std::invalid_argument("config: depth must be >= 1");
    if (width < 1 || channels < 1)
      throw std::invalid_argument("config: width/channels must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
    if (grad_clip < 0.0)
      throw std::invalid_argument("config: grad_clip must be >= 0");
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (batch_size < 1)
      throw std::invalid_argument("config: batch_size must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be nonempty");
    if (entanglements.empty())
      throw std::invalid_argument("config: at least one [entanglement] section");
    for (const auto& e : entanglements) e.validate();

    const bool seq_task = task == Task::seq_pixel ||
                          task == Task::permuted_seq_pixel ||
                          task == Task::copy_memory;
    switch (model) {
      case ModelKind::res_mlp:
        if (task != Task::spiral2d && task != Task::digits_lite)
          throw std::invalid_argument("config: res_mlp expects spiral2d/digits_lite");
        break;
      case ModelKind::res_cnn:
        if (task != Task::digits_lite)
          throw std::invalid_argument("config: res_cnn expects digits_lite");
        break;
      case ModelKind::transformer:
      case ModelKind::lstm:
        if (!seq_task)
          throw std::invalid_argument("config: sequence model expects a sequence task");
        break;
    }
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Flat key=value format with [experiment] and repeatable [entanglement]
// sections; '#' starts a comment.
inline ExperimentConfig parse_config_text(const std::string& text) {
  ExperimentConfig cfg;
  bool optimizer_set = false;
  bool lr_set = false;
  std::istringstream is(text);
  std::string raw;
  std::string section;
  while (std::getline(is, raw)) {
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw = raw.substr(0, hash);
    const std::string line = detail::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: malformed section header: " + line);
      section = line.substr(1, line.size() - 2);
      if (section == "entanglement")
        cfg.entanglements.emplace_back();
      else if (section != "experiment")
        throw std::invalid_argument("config: unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key=value, got: " + line);
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    if (section == "experiment") {
      if (key == "task") cfg.task = task_from_string(val);
      else if (key == "model") cfg.model = model_from_string(val);
      else if (key == "depth") cfg.depth = std::stoi(val);
      else if (key == "width") cfg.width = std::stoi(val);
      else if (key == "channels") cfg.channels = std::stoi(val);
      else if (key == "epochs") cfg.epochs = std::stoi(val);
      else if (key == "batch_size") cfg.batch_size = std::stoi(val);
      else if (key == "optimizer") { cfg.optimizer = optimizer_from_string(val); optimizer_set = true; }
      else if (key == "lr") { cfg.lr = std::stod(val); lr_set = true; }
      else if (key == "momentum") cfg.momentum = std::stod(val);
      else if (key == "grad_clip") cfg.grad_clip = std::stod(val);
      else if (key == "output_dir") cfg.output_dir = val;
      else if (key == "lstm_literal") cfg.lstm_literal = val == "1" || val == "true";
      else if (key == "save_checkpoint") cfg.save_checkpoint = val == "1" || val == "true";
      else if (key == "jobs") cfg.jobs = std::stoi(val);
      else if (key == "seeds") {
        cfg.seeds.clear();
        std::istringstream ss(val);
        std::string tok;
        while (std::getline(ss, tok, ','))
          cfg.seeds.push_back(std::stoull(detail::trim(tok)));
      } else {
        throw std::invalid_argument("config: unknown experiment key '" + key + "'");
      }
    } else if (section == "entanglement") {
      EntanglementSpec& e = cfg.entanglements.back();
      if (key == "kind") e.kind = kind_from_string(val);
      else if (key == "gamma") e.gamma = std::stod(val);
      else if (key == "kernel_size") e.kernel_size = std::stoi(val);
      else if (key == "channels") e.channels = std::stoi(val);
      else if (key == "dim") e.dim = std::stoi(val);
      else if (key == "seed") e.seed = std::stoull(val);
      else throw std::invalid_argument("config: unknown entanglement key '" + key + "'");
    } else {
      throw std::invalid_argument("config: key outside a section: " + line);
    }
  }
  if (cfg.entanglements.empty()) cfg.entanglements.emplace_back();

  // model-dependent optimizer defaults when unspecified
  if (!optimizer_set &&
      (cfg.model == ModelKind::lstm || cfg.model == ModelKind::transformer))
    cfg.optimizer = OptimizerKind::adam;
  if (!lr_set)
    cfg.lr = cfg.optimizer == OptimizerKind::adam ? 5e-4 : 0.05;

  cfg.validate();
  return cfg;
}

inline ExperimentConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

}  // namespace entangle
