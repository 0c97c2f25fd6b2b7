#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "entangle/kernels.hpp"
#include "entangle/spec.hpp"
#include "entangle/tensor.hpp"

namespace entangle {

// Materializes the operator a spec describes, as a bare tensor:
// rank-2 for vector kinds, rank-4 (or rank-3 with seq=true) for conv kinds.
inline Tensor materialize_operator(const EntanglementSpec& spec,
                                   bool seq = false) {
  switch (spec.kind) {
    case EntangleKind::dense:
    case EntangleKind::orthogonal: {
      const auto m = channel_mixing_matrix(spec);
      return Tensor({m->rows(), m->cols()}, m->vec());
    }
    case EntangleKind::identity:
    case EntangleKind::none: {
      if (spec.dim > 0) {
        const auto m = channel_mixing_matrix(spec);
        return Tensor({m->rows(), m->cols()}, m->vec());
      }
      return seq ? make_seq_kernel(spec).data : make_kernel_2d(spec).data;
    }
    default:
      return seq ? make_seq_kernel(spec).data : make_kernel_2d(spec).data;
  }
}

inline void write_kernel_file(std::ostream& os, const EntanglementSpec& spec,
                              const Tensor& t) {
  os << "ENTANGLE-KERNEL v1\n";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) os << ' ';
    os << t.dim(i);
  }
  os << '\n' << spec.format() << '\n';
  for (std::size_t i = 0; i < t.size(); ++i) os << format_g17(t[i]) << '\n';
}

struct KernelFile {
  EntanglementSpec spec;
  Tensor data;
};

inline KernelFile read_kernel_file(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "ENTANGLE-KERNEL v1")
    throw std::runtime_error("kernel file: bad magic");
  if (!std::getline(is, line)) throw std::runtime_error("kernel file: no shape");
  std::istringstream shape_is(line);
  std::vector<int> shape;
  int d;
  while (shape_is >> d) shape.push_back(d);
  if (!std::getline(is, line)) throw std::runtime_error("kernel file: no spec");
  KernelFile kf;
  kf.spec = EntanglementSpec::parse(line);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::getline(is, line))
      throw std::runtime_error("kernel file: truncated data");
    t[i] = std::stod(line);
  }
  kf.data = std::move(t);
  return kf;
}

inline std::uint64_t fnv1a(const void* data, std::size_t len) {
  const unsigned char* b = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= b[i];
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

}  // namespace entangle
