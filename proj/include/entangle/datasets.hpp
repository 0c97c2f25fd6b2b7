#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "entangle/rng.hpp"
#include "entangle/tensor.hpp"

namespace entangle {

enum class Task { spiral2d, digits_lite, seq_pixel, permuted_seq_pixel, copy_memory };

inline const char* to_string(Task t) {
  switch (t) {
    case Task::spiral2d: return "spiral2d";
    case Task::digits_lite: return "digits_lite";
    case Task::seq_pixel: return "seq_pixel";
    case Task::permuted_seq_pixel: return "permuted_seq_pixel";
    case Task::copy_memory: return "copy_memory";
  }
  return "?";
}

inline Task task_from_string(const std::string& s) {
  if (s == "spiral2d") return Task::spiral2d;
  if (s == "digits_lite") return Task::digits_lite;
  if (s == "seq_pixel") return Task::seq_pixel;
  if (s == "permuted_seq_pixel") return Task::permuted_seq_pixel;
  if (s == "copy_memory") return Task::copy_memory;
  throw std::invalid_argument("unknown task: " + s);
}

struct Dataset {
  std::vector<Tensor> x;
  std::vector<int> y;                      // one class per sample
  std::vector<std::vector<int>> y_seq;     // per-position targets (copy task)
  int num_classes = 0;
  bool sequence_targets = false;

  std::size_t size() const { return x.size(); }
};

struct TaskData {
  Dataset train;
  Dataset test;
};

// ---- spiral2d -------------------------------------------------------------

namespace detail {

inline Dataset gen_spiral(std::size_t count, Rng& rng) {
  Dataset d;
  d.num_classes = 2;
  for (std::size_t i = 0; i < count; ++i) {
    const int cls = static_cast<int>(i % 2);
    const double t =
        static_cast<double>(i / 2) / std::max<std::size_t>(1, count / 2 - 1);
    const double r = 0.3 + 2.0 * t;
    const double theta = 3.5 * 3.14159265358979323846 * t +
                         3.14159265358979323846 * cls;
    Tensor p({2});
    p.at(0) = r * std::cos(theta) + 0.1 * rng.normal();
    p.at(1) = r * std::sin(theta) + 0.1 * rng.normal();
    d.x.push_back(std::move(p));
    d.y.push_back(cls);
  }
  return d;
}

// ---- digits_lite ----------------------------------------------------------

using Polyline = std::vector<std::pair<double, double>>;

inline Polyline circle_poly(double cx, double cy, double rx, double ry, int n) {
  Polyline p;
  for (int i = 0; i <= n; ++i) {
    const double a = 2.0 * 3.14159265358979323846 * i / n;
    p.emplace_back(cx + rx * std::cos(a), cy + ry * std::sin(a));
  }
  return p;
}

inline const std::vector<std::vector<Polyline>>& digit_strokes() {
  static const std::vector<std::vector<Polyline>> strokes = [] {
    std::vector<std::vector<Polyline>> s(10);
    s[0] = {circle_poly(0.5, 0.5, 0.26, 0.36, 12)};
    s[1] = {{{0.33, 0.28}, {0.55, 0.12}},
            {{0.55, 0.12}, {0.55, 0.88}},
            {{0.35, 0.88}, {0.72, 0.88}}};
    s[2] = {{{0.25, 0.28}, {0.32, 0.14}, {0.52, 0.10}, {0.70, 0.16},
             {0.74, 0.32}, {0.62, 0.50}, {0.42, 0.66}, {0.26, 0.86}},
            {{0.26, 0.88}, {0.76, 0.88}}};
    s[3] = {{{0.28, 0.16}, {0.48, 0.10}, {0.66, 0.16}, {0.70, 0.30}, {0.55, 0.45}},
            {{0.55, 0.45}, {0.73, 0.55}, {0.75, 0.72}, {0.58, 0.88}, {0.32, 0.84}}};
    s[4] = {{{0.62, 0.10}, {0.24, 0.62}},
            {{0.24, 0.62}, {0.80, 0.62}},
            {{0.62, 0.34}, {0.62, 0.90}}};
    s[5] = {{{0.72, 0.12}, {0.32, 0.12}},
            {{0.32, 0.12}, {0.30, 0.45}},
            {{0.30, 0.45}, {0.52, 0.40}, {0.70, 0.48}, {0.74, 0.64},
             {0.60, 0.84}, {0.32, 0.82}}};
    s[6] = {{{0.64, 0.10}, {0.44, 0.16}, {0.32, 0.36}, {0.28, 0.60},
             {0.36, 0.82}, {0.56, 0.88}, {0.70, 0.74}, {0.66, 0.56},
             {0.48, 0.50}, {0.32, 0.58}}};
    s[7] = {{{0.24, 0.12}, {0.76, 0.12}},
            {{0.76, 0.12}, {0.44, 0.88}},
            {{0.36, 0.50}, {0.64, 0.50}}};
    s[8] = {circle_poly(0.5, 0.30, 0.18, 0.19, 10),
            circle_poly(0.5, 0.69, 0.22, 0.20, 10)};
    s[9] = {{{0.36, 0.90}, {0.56, 0.84}, {0.68, 0.64}, {0.72, 0.40},
             {0.64, 0.18}, {0.44, 0.12}, {0.30, 0.26}, {0.34, 0.44},
             {0.52, 0.50}, {0.68, 0.42}}};
    return s;
  }();
  return strokes;
}

inline double point_segment_dist2(double px, double py, double ax, double ay,
                                  double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double wx = px - ax, wy = py - ay;
  const double vv = vx * vx + vy * vy;
  double t = vv > 0.0 ? (wx * vx + wy * vy) / vv : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx);
  const double dy = py - (ay + t * vy);
  return dx * dx + dy * dy;
}

constexpr int kDigitSide = 14;

inline Tensor render_digit(int digit, Rng& rng) {
  const double shift_x = rng.uniform(-1.0, 1.0);
  const double shift_y = rng.uniform(-1.0, 1.0);
  const double scale = rng.uniform(0.85, 1.1);
  const double angle = rng.uniform(-0.12, 0.12);
  const double width = rng.uniform(0.45, 0.65);
  const double ca = std::cos(angle), sa = std::sin(angle);

  // glyph -> pixel transform
  std::vector<std::vector<std::pair<double, double>>> segs;
  for (const auto& line : digit_strokes()[static_cast<std::size_t>(digit)]) {
    std::vector<std::pair<double, double>> pts;
    for (const auto& [gx, gy] : line) {
      const double cx = (gx - 0.5) * scale;
      const double cy = (gy - 0.5) * scale;
      const double rx = ca * cx - sa * cy + 0.5;
      const double ry = sa * cx + ca * cy + 0.5;
      pts.emplace_back(rx * (kDigitSide - 1) + shift_x,
                       ry * (kDigitSide - 1) + shift_y);
    }
    segs.push_back(std::move(pts));
  }

  Tensor img({kDigitSide, kDigitSide, 1});
  const double denom = 2.0 * width * width;
  for (int py = 0; py < kDigitSide; ++py) {
    for (int px = 0; px < kDigitSide; ++px) {
      double best = 1e30;
      for (const auto& pts : segs)
        for (std::size_t i = 0; i + 1 < pts.size(); ++i)
          best = std::min(best, point_segment_dist2(px, py, pts[i].first,
                                                    pts[i].second,
                                                    pts[i + 1].first,
                                                    pts[i + 1].second));
      double v = std::exp(-best / denom) + 0.08 * rng.normal();
      img.at(py, px, 0) = std::clamp(v, 0.0, 1.0);
    }
  }
  return img;
}

inline Dataset gen_digits(std::size_t count, Rng& rng) {
  Dataset d;
  d.num_classes = 10;
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % 10);
  rng.shuffle(labels);
  for (std::size_t i = 0; i < count; ++i) {
    d.x.push_back(render_digit(labels[i], rng));
    d.y.push_back(labels[i]);
  }
  return d;
}

inline Dataset flatten_to_sequence(const Dataset& images) {
  Dataset d;
  d.num_classes = images.num_classes;
  d.y = images.y;
  for (const auto& img : images.x)
    d.x.emplace_back(
        Tensor({static_cast<int>(img.size()), 1}, img.vec()));
  return d;
}

inline Dataset gen_copy_memory(std::size_t count, Rng& rng) {
  constexpr int kSymbols = 8;   // classes 1..8
  constexpr int kRecall = 3;
  constexpr int kDelay = 50;
  constexpr int kTrigger = 9;
  constexpr int kAlphabet = 10;  // blank, 8 symbols, trigger
  const int length = 2 * kRecall + kDelay + 1;
  Dataset d;
  d.num_classes = kAlphabet;
  d.sequence_targets = true;
  for (std::size_t s = 0; s < count; ++s) {
    std::vector<int> symbols(kRecall);
    for (auto& v : symbols) v = 1 + rng.uniform_int(kSymbols);
    Tensor x({length, kAlphabet});
    std::vector<int> target(static_cast<std::size_t>(length), 0);
    for (int t = 0; t < length; ++t) {
      int input_sym = 0;
      if (t < kRecall) input_sym = symbols[static_cast<std::size_t>(t)];
      else if (t == kRecall + kDelay) input_sym = kTrigger;
      x.at(t, input_sym) = 1.0;
      if (t >= kRecall + kDelay + 1)
        target[static_cast<std::size_t>(t)] =
            symbols[static_cast<std::size_t>(t - (kRecall + kDelay + 1))];
    }
    d.x.push_back(std::move(x));
    d.y.push_back(0);
    d.y_seq.push_back(std::move(target));
  }
  return d;
}

}  // namespace detail

// fixed permutation shared by train and test, independent of the dataset seed
constexpr std::uint64_t kPixelPermutationSeed = 0xfeedfaceULL;

inline std::vector<int> pixel_permutation(int n,
                                          std::uint64_t seed = kPixelPermutationSeed) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  rng.shuffle(perm);
  return perm;
}

inline Dataset apply_sequence_permutation(const Dataset& d,
                                          const std::vector<int>& perm) {
  Dataset out;
  out.num_classes = d.num_classes;
  out.y = d.y;
  out.sequence_targets = d.sequence_targets;
  out.y_seq = d.y_seq;
  for (const auto& seq : d.x) {
    if (seq.rank() != 2 || seq.dim(0) != static_cast<int>(perm.size()))
      throw std::invalid_argument("apply_sequence_permutation: length mismatch");
    Tensor p(seq.shape());
    const int cols = seq.dim(1);
    for (int i = 0; i < seq.dim(0); ++i)
      for (int j = 0; j < cols; ++j)
        p.at(i, j) = seq.at(perm[static_cast<std::size_t>(i)], j);
    out.x.push_back(std::move(p));
  }
  return out;
}

// Deterministic per (task, seed): same arguments reproduce the same bytes.
inline TaskData gen_dataset(Task task, std::uint64_t seed) {
  Rng train_rng(seed);
  Rng test_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  switch (task) {
    case Task::spiral2d:
      return {detail::gen_spiral(1000, train_rng), detail::gen_spiral(500, test_rng)};
    case Task::digits_lite:
      return {detail::gen_digits(5000, train_rng), detail::gen_digits(1000, test_rng)};
    case Task::seq_pixel: {
      const TaskData img = gen_dataset(Task::digits_lite, seed);
      return {detail::flatten_to_sequence(img.train),
              detail::flatten_to_sequence(img.test)};
    }
    case Task::permuted_seq_pixel: {
      const TaskData seq = gen_dataset(Task::seq_pixel, seed);
      const auto perm = pixel_permutation(detail::kDigitSide * detail::kDigitSide);
      return {apply_sequence_permutation(seq.train, perm),
              apply_sequence_permutation(seq.test, perm)};
    }
    case Task::copy_memory:
      return {detail::gen_copy_memory(1024, train_rng),
              detail::gen_copy_memory(256, test_rng)};
  }
  throw std::invalid_argument("gen_dataset: unknown task");
}

}  // namespace entangle
