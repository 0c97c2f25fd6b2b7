#pragma once

#include <cstdint>
#include <cstdio>
#include <sstream>
#include <stdexcept>
#include <string>

namespace entangle {

enum class EntangleKind {
  identity,
  none,
  dense,
  orthogonal,
  spatial,
  channel,
  channel_spatial,
  orthogonal_channel,
};

inline const char* to_string(EntangleKind k) {
  switch (k) {
    case EntangleKind::identity: return "identity";
    case EntangleKind::none: return "none";
    case EntangleKind::dense: return "dense";
    case EntangleKind::orthogonal: return "orthogonal";
    case EntangleKind::spatial: return "spatial";
    case EntangleKind::channel: return "channel";
    case EntangleKind::channel_spatial: return "channel_spatial";
    case EntangleKind::orthogonal_channel: return "orthogonal_channel";
  }
  return "?";
}

inline EntangleKind kind_from_string(const std::string& s) {
  if (s == "identity") return EntangleKind::identity;
  if (s == "none") return EntangleKind::none;
  if (s == "dense") return EntangleKind::dense;
  if (s == "orthogonal") return EntangleKind::orthogonal;
  if (s == "spatial") return EntangleKind::spatial;
  if (s == "channel") return EntangleKind::channel;
  if (s == "channel_spatial") return EntangleKind::channel_spatial;
  if (s == "orthogonal_channel") return EntangleKind::orthogonal_channel;
  throw std::invalid_argument("unknown entanglement kind: " + s);
}

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Declarative description of one entanglement operator. Fields not used by
// the kind are ignored; kernel_size 0 means "kind default".
struct EntanglementSpec {
  EntangleKind kind = EntangleKind::identity;
  double gamma = 0.0;
  int kernel_size = 0;
  int channels = 0;
  int dim = 0;
  std::uint64_t seed = 0;

  // channel-wise mixing is a 1x1 kernel by convention; spatial kinds default
  // to 3x3
  int resolved_kernel_size() const {
    switch (kind) {
      case EntangleKind::channel:
      case EntangleKind::orthogonal_channel:
        return 1;
      case EntangleKind::spatial:
      case EntangleKind::channel_spatial:
        return kernel_size > 0 ? kernel_size : 3;
      default:
        return kernel_size > 0 ? kernel_size : 1;
    }
  }

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0))
      throw std::invalid_argument("entanglement: gamma must be in [0,1]");
    if (kernel_size < 0 || (kernel_size > 0 && kernel_size % 2 == 0))
      throw std::invalid_argument("entanglement: kernel_size must be odd");
    if (kind == EntangleKind::channel && kernel_size > 1)
      throw std::invalid_argument(
          "entanglement: channel kind is 1x1; use channel_spatial for k>1");
    if (channels < 0 || dim < 0)
      throw std::invalid_argument("entanglement: negative dimension");
  }

  std::string format() const {
    std::ostringstream os;
    os << "kind=" << to_string(kind) << " gamma=" << format_g17(gamma)
       << " k=" << resolved_kernel_size() << " c=" << channels << " n=" << dim
       << " seed=" << seed;
    return os.str();
  }

  // filesystem-safe tag used in run/kernel file names
  std::string slug() const {
    std::ostringstream os;
    os << to_string(kind);
    switch (kind) {
      case EntangleKind::dense:
      case EntangleKind::spatial:
      case EntangleKind::channel:
      case EntangleKind::channel_spatial: {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%g", gamma);
        os << "_g" << buf;
        break;
      }
      case EntangleKind::orthogonal:
      case EntangleKind::orthogonal_channel:
        os << "_s" << seed;
        break;
      default:
        break;
    }
    return os.str();
  }

  static EntanglementSpec parse(const std::string& line) {
    EntanglementSpec spec;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("entanglement spec: bad token '" + tok + "'");
      const std::string key = tok.substr(0, eq);
      const std::string val = tok.substr(eq + 1);
      if (key == "kind") spec.kind = kind_from_string(val);
      else if (key == "gamma") spec.gamma = std::stod(val);
      else if (key == "k") spec.kernel_size = std::stoi(val);
      else if (key == "c") spec.channels = std::stoi(val);
      else if (key == "n") spec.dim = std::stoi(val);
      else if (key == "seed") spec.seed = std::stoull(val);
      else
        throw std::invalid_argument("entanglement spec: unknown key '" + key + "'");
    }
    spec.validate();
    return spec;
  }
};

}  // namespace entangle
