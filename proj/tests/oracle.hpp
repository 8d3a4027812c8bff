#pragma once

// Independent reference implementations used as test oracles. Everything here
// is written with plain loops in double precision and shares no code with the
// library beyond its data types.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "tamp/model.hpp"

namespace oracle {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // row-major, rows of equal length

inline Mat to_mat(const tamp::Matrix& m) {
  Mat out(m.rows(), Vec(m.cols()));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  return out;
}

inline Mat matmul_t(const Mat& x, const Mat& w) {
  Mat out(x.size(), Vec(w.size(), 0.0));
  for (std::size_t n = 0; n < x.size(); ++n)
    for (std::size_t o = 0; o < w.size(); ++o)
      for (std::size_t c = 0; c < x[n].size(); ++c) out[n][o] += x[n][c] * w[o][c];
  return out;
}

inline Mat rms(const Mat& x, const std::vector<float>& g, double eps) {
  Mat out = x;
  for (auto& row : out) {
    double ms = 0.0;
    for (double v : row) ms += v * v;
    ms /= static_cast<double>(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = row[c] / std::sqrt(ms + eps) * g[c];
  }
  return out;
}

struct BlockOut {
  Mat attn_in, o_in, ffn_in, down_in;
  Mat q, k, v, o, gate, up, down;
  Mat attention;  // head-averaged
  Mat out;
};

inline BlockOut block(const tamp::ToyModel& m, std::size_t b, const Mat& x) {
  const auto& blk = m.blocks[b];
  auto W = [&](tamp::LayerKind k) { return to_mat(blk.layer(k).weight); };
  BlockOut r;
  const std::size_t n = x.size();
  const std::size_t d = m.d_model;
  const std::size_t dh = d / m.n_heads;
  r.attn_in = rms(x, blk.attn_norm, m.norm_eps);
  r.q = matmul_t(r.attn_in, W(tamp::LayerKind::q));
  r.k = matmul_t(r.attn_in, W(tamp::LayerKind::k));
  r.v = matmul_t(r.attn_in, W(tamp::LayerKind::v));
  r.attention.assign(n, Vec(n, 0.0));
  r.o_in.assign(n, Vec(d, 0.0));
  for (std::size_t h = 0; h < m.n_heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      Vec s(i + 1);
      for (std::size_t j = 0; j <= i; ++j) {
        double dotp = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dotp += r.q[i][h * dh + c] * r.k[j][h * dh + c];
        s[j] = dotp / std::sqrt(static_cast<double>(dh));
      }
      const double mx = *std::max_element(s.begin(), s.end());
      double z = 0.0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j <= i; ++j) {
        const double p = s[j] / z;
        r.attention[i][j] += p / static_cast<double>(m.n_heads);
        for (std::size_t c = 0; c < dh; ++c) r.o_in[i][h * dh + c] += p * r.v[j][h * dh + c];
      }
    }
  }
  r.o = matmul_t(r.o_in, W(tamp::LayerKind::o));
  Mat h = x;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) h[i][c] += r.o[i][c];
  r.ffn_in = rms(h, blk.ffn_norm, m.norm_eps);
  r.gate = matmul_t(r.ffn_in, W(tamp::LayerKind::gate));
  r.up = matmul_t(r.ffn_in, W(tamp::LayerKind::up));
  r.down_in = r.gate;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < r.gate[i].size(); ++c) {
      const double g = r.gate[i][c];
      r.down_in[i][c] = g / (1.0 + std::exp(-g)) * r.up[i][c];
    }
  r.down = matmul_t(r.down_in, W(tamp::LayerKind::down));
  r.out = h;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) r.out[i][c] += r.down[i][c];
  return r;
}

inline Mat forward(const tamp::ToyModel& m, const Mat& x, std::vector<BlockOut>* blocks = nullptr) {
  Mat cur = x;
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    auto r = block(m, b, cur);
    cur = r.out;
    if (blocks) blocks->push_back(std::move(r));
  }
  return cur;
}

// ---------------------------------------------------------------- diversity

inline double cos_dist(const Vec& a, const Vec& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

inline double intra(const Mat& z, const std::vector<std::size_t>& idx) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t a = 0; a < idx.size(); ++a)
    for (std::size_t b = a + 1; b < idx.size(); ++b) {
      s += cos_dist(z[idx[a]], z[idx[b]]);
      ++n;
    }
  return s / static_cast<double>(n);
}

inline double inter(const Mat& z, const std::vector<std::size_t>& ia,
                    const std::vector<std::size_t>& ib) {
  double s = 0.0;
  for (auto a : ia)
    for (auto b : ib) s += cos_dist(z[a], z[b]);
  return s / static_cast<double>(ia.size() * ib.size());
}

// ---------------------------------------------------------------- allocation

/// Affine allocation; the shift is found by bisection on the monotone budget
/// function rather than by breakpoints.
inline Vec allocate(const Vec& imp, const Vec& params, double p, double lambda) {
  const double lo = *std::min_element(imp.begin(), imp.end());
  const double hi = *std::max_element(imp.begin(), imp.end());
  Vec raw(imp.size());
  for (std::size_t i = 0; i < imp.size(); ++i) {
    const double s = hi > lo ? (imp[i] - lo) / (hi - lo) : 0.5;
    raw[i] = p + lambda * (1.0 - 2.0 * s);
  }
  const double total = std::accumulate(params.begin(), params.end(), 0.0);
  auto mean_at = [&](double c) {
    double g = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) g += params[i] * std::clamp(raw[i] + c, 0.0, 1.0);
    return g / total;
  };
  double a = -2.0, b = 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (a + b);
    (mean_at(mid) < p ? a : b) = mid;
  }
  const double c = std::abs(mean_at(0.0) - p) < 1e-15 ? 0.0 : 0.5 * (a + b);
  Vec r(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) r[i] = std::clamp(raw[i] + c, 0.0, 1.0);
  return r;
}

// ---------------------------------------------------------------- selection

struct Knn {
  std::vector<std::vector<std::size_t>> nb;
  Mat d;  // full distance matrix
};

/// Neighbours by a full stable sort of (distance, index).
inline Knn knn(const Mat& z, std::size_t k) {
  const std::size_t n = z.size();
  Knn g;
  g.d.assign(n, Vec(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) g.d[i][j] = std::clamp(cos_dist(z[i], z[j]), 0.0, 2.0);
  g.nb.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) others.push_back(j);
    std::stable_sort(others.begin(), others.end(),
                     [&](std::size_t a, std::size_t b) { return g.d[i][a] < g.d[i][b]; });
    g.nb[i].assign(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return g;
}

inline double mmd(const Mat& d, const std::vector<std::size_t>& c,
                  const std::vector<std::size_t>& s, double gamma) {
  auto A = [&](const std::vector<std::size_t>& x, const std::vector<std::size_t>& y) {
    double t = 0.0;
    for (auto i : x)
      for (auto j : y) t += std::exp(-gamma * d[i][j]);
    return t / static_cast<double>(x.size() * y.size());
  };
  return std::max(0.0, A(c, c) + A(s, s) - 2.0 * A(c, s));
}

struct Amia {
  std::vector<std::size_t> picks;
  Vec trace;
};

/// AMIA: synchronous forward update, greedy reverse pass, MMD recomputed from
/// scratch after every pick.
inline Amia amia(const Vec& a0, const Mat& z, std::size_t k, double gf, double gr,
                 double threshold, std::size_t min_count) {
  const std::size_t n = z.size();
  const auto g = knn(z, k);
  Vec a = a0;
  for (std::size_t i = 0; i < n; ++i)
    for (auto j : g.nb[i]) a[i] += std::exp(-gf * g.d[i][j]) * a0[j];
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  Amia r;
  std::vector<bool> used(n, false);
  while (r.picks.size() < n) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!used[i] && (best == n || a[i] > a[best])) best = i;
    used[best] = true;
    const double ab = a[best];
    for (auto j : g.nb[best]) a[j] -= std::exp(-gr * g.d[best][j]) * ab;
    r.picks.push_back(best);
    r.trace.push_back(mmd(g.d, all, r.picks, gr));
    if (r.picks.size() >= std::min(min_count, n) && r.trace.back() < threshold) break;
  }
  return r;
}

// ---------------------------------------------------------------- masks

/// Drop set by full sort of (importance, flat index).
inline std::vector<std::uint8_t> mask(const Mat& imp, double ratio, bool per_row) {
  const std::size_t rows = imp.size();
  const std::size_t cols = imp.front().size();
  std::vector<std::uint8_t> keep(rows * cols, 1);
  auto drop = [&](std::vector<std::size_t> idx) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return imp[a / cols][a % cols] < imp[b / cols][b % cols];
    });
    const auto n = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(idx.size()) + 1e-9));
    for (std::size_t i = 0; i < n; ++i) keep[idx[i]] = 0;
  };
  if (per_row) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<std::size_t> idx(cols);
      std::iota(idx.begin(), idx.end(), r * cols);
      drop(idx);
    }
  } else {
    std::vector<std::size_t> idx(rows * cols);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    drop(idx);
  }
  return keep;
}

}  // namespace oracle
