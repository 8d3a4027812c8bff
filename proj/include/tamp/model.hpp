#pragma once

// Deterministic multimodal transformer used as the pruning target.
//
// Each block is pre-norm (RMS), causal multi-head attention followed by a
// SwiGLU feed-forward network:
//
//   h   = x + o(attn(rms(x) * g_attn))
//   out = h + down(silu(gate(u)) * up(u)),  u = rms(h) * g_ffn
//
// There is no positional encoding and no final norm; inputs arrive already
// embedded.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tamp/core.hpp"

namespace tamp {

// ---------------------------------------------------------------- modality

struct ModalityId {
  int id = 0;
  std::string name;
  bool operator==(const ModalityId&) const = default;
};

struct Span {
  ModalityId modality;
  std::size_t start = 0;
  std::size_t len = 0;
};

/// Pre-embedded tokens tagged with contiguous modality spans.
struct TokenSequence {
  Matrix embeddings;  // N x d_model
  std::vector<Span> spans;

  std::size_t size() const { return embeddings.rows(); }

  /// Throws ShapeError/NumericError when the span layout or values are bad.
  void validate() const {
    if (embeddings.rows() == 0) throw ShapeError("token sequence is empty");
    std::size_t cursor = 0;
    for (const auto& s : spans) {
      if (s.start != cursor)
        throw ShapeError("spans are not contiguous at token " + std::to_string(cursor));
      cursor += s.len;
    }
    if (cursor != embeddings.rows())
      throw ShapeError("spans cover " + std::to_string(cursor) + " tokens, sequence has " +
                       std::to_string(embeddings.rows()));
    if (!all_finite(embeddings.flat())) throw NumericError("non-finite embedding value");
  }

  /// Token indices belonging to a modality id (possibly several spans).
  std::vector<std::size_t> indices_of(int modality_id) const {
    std::vector<std::size_t> out;
    for (const auto& s : spans)
      if (s.modality.id == modality_id)
        for (std::size_t i = 0; i < s.len; ++i) out.push_back(s.start + i);
    return out;
  }

  /// Distinct modalities in order of first appearance.
  std::vector<ModalityId> modalities() const {
    std::vector<ModalityId> out;
    for (const auto& s : spans) {
      bool seen = false;
      for (const auto& m : out) seen = seen || m.id == s.modality.id;
      if (!seen) out.push_back(s.modality);
    }
    return out;
  }
};

/// Builds spans from (modality, len) pairs laid end to end.
inline std::vector<Span> make_spans(const std::vector<std::pair<ModalityId, std::size_t>>& parts) {
  std::vector<Span> spans;
  std::size_t cursor = 0;
  for (const auto& [m, len] : parts) {
    spans.push_back({m, cursor, len});
    cursor += len;
  }
  return spans;
}

// ---------------------------------------------------------------- layers

enum class LayerKind : std::uint8_t { q = 0, k, v, o, gate, up, down };

inline constexpr std::size_t kLayersPerBlock = 7;
inline constexpr std::array<LayerKind, kLayersPerBlock> kAllKinds = {
    LayerKind::q, LayerKind::k, LayerKind::v, LayerKind::o,
    LayerKind::gate, LayerKind::up, LayerKind::down};

constexpr std::string_view kind_name(LayerKind k) {
  constexpr std::array<std::string_view, kLayersPerBlock> names = {
      "q", "k", "v", "o", "gate", "up", "down"};
  return names[static_cast<std::size_t>(k)];
}

inline LayerKind kind_from_name(std::string_view s) {
  for (auto k : kAllKinds)
    if (kind_name(k) == s) return k;
  throw FormatError("unknown layer kind '" + std::string(s) + "'");
}

/// Position of a linear layer inside the model.
struct LayerId {
  std::size_t block = 0;
  LayerKind kind = LayerKind::q;

  std::size_t flat() const { return block * kLayersPerBlock + static_cast<std::size_t>(kind); }
  static LayerId from_flat(std::size_t i) {
    return {i / kLayersPerBlock, static_cast<LayerKind>(i % kLayersPerBlock)};
  }
  std::string name() const {
    return "blocks." + std::to_string(block) + "." + std::string(kind_name(kind));
  }
  auto operator<=>(const LayerId&) const = default;
};

/// Row-major keep/drop flags with the shape of a weight matrix.
struct KeepMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;  // 1 = keep

  static KeepMask all(std::size_t rows, std::size_t cols, bool value) {
    return {rows, cols, std::vector<std::uint8_t>(rows * cols, value ? 1 : 0)};
  }
  bool kept(std::size_t r, std::size_t c) const { return keep[r * cols + c] != 0; }
  std::size_t dropped() const {
    std::size_t n = 0;
    for (auto k : keep) n += k == 0;
    return n;
  }
  bool operator==(const KeepMask&) const = default;
};

struct LinearLayer {
  Matrix weight;  // C_out x C_in
  LayerKind kind = LayerKind::q;
  std::size_t block_index = 0;
  std::optional<KeepMask> mask;

  std::size_t param_count() const { return weight.size(); }

  /// Stores the mask and zeroes exactly the dropped entries.
  void apply_mask(KeepMask m) {
    if (m.rows != weight.rows() || m.cols != weight.cols())
      throw ShapeError("mask shape does not match weight of " +
                       LayerId{block_index, kind}.name());
    auto w = weight.flat();
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!m.keep[i]) w[i] = 0.0f;
    if (mask) {
      // Composition keeps only entries retained by both masks.
      for (std::size_t i = 0; i < m.keep.size(); ++i) m.keep[i] &= mask->keep[i];
    }
    mask = std::move(m);
  }
};

struct Block {
  std::array<LinearLayer, kLayersPerBlock> layers;
  std::vector<float> attn_norm;
  std::vector<float> ffn_norm;

  LinearLayer& layer(LayerKind k) { return layers[static_cast<std::size_t>(k)]; }
  const LinearLayer& layer(LayerKind k) const { return layers[static_cast<std::size_t>(k)]; }
};

struct ToyModel {
  std::vector<Block> blocks;
  std::size_t n_heads = 1;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::uint64_t seed = 0;
  float norm_eps = 1e-5f;

  std::size_t n_layers() const { return blocks.size() * kLayersPerBlock; }
  LinearLayer& layer(LayerId id) { return blocks.at(id.block).layer(id.kind); }
  const LinearLayer& layer(LayerId id) const { return blocks.at(id.block).layer(id.kind); }

  std::vector<LayerId> layer_ids() const {
    std::vector<LayerId> ids;
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (auto k : kAllKinds) ids.push_back({b, k});
    return ids;
  }

  /// Throws ConfigError/ShapeError/NumericError if the model is malformed.
  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_ff == 0) throw ConfigError("model dims must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& blk = blocks[b];
      if (blk.attn_norm.size() != d_model || blk.ffn_norm.size() != d_model)
        throw ShapeError("norm scale length mismatch in block " + std::to_string(b));
      for (auto k : kAllKinds) {
        const auto& l = blk.layer(k);
        const auto [rows, cols] = expected_shape(k);
        if (l.kind != k || l.block_index != b)
          throw ShapeError("layer identity mismatch at " + LayerId{b, k}.name());
        if (l.weight.rows() != rows || l.weight.cols() != cols)
          throw ShapeError("bad weight shape for " + LayerId{b, k}.name());
        if (!all_finite(l.weight.flat()))
          throw NumericError("non-finite weight in " + LayerId{b, k}.name());
      }
    }
  }

  std::pair<std::size_t, std::size_t> expected_shape(LayerKind k) const {
    switch (k) {
      case LayerKind::gate:
      case LayerKind::up:
        return {d_ff, d_model};
      case LayerKind::down:
        return {d_model, d_ff};
      default:
        return {d_model, d_model};
    }
  }
};

// ---------------------------------------------------------------- init

/// Seeded model with weights drawn from U(-1/sqrt(C_in), 1/sqrt(C_in)) and unit
/// norm scales. Each layer has its own stream derived from (seed, block, kind).
inline ToyModel init_synthetic(std::size_t d_model, std::size_t n_heads, std::size_t d_ff,
                               std::size_t n_blocks, std::uint64_t seed) {
  ToyModel m;
  m.d_model = d_model;
  m.n_heads = n_heads;
  m.d_ff = d_ff;
  m.seed = seed;
  if (d_model == 0 || n_heads == 0 || d_ff == 0) throw ConfigError("model dims must be positive");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  m.blocks.resize(n_blocks);
  for (std::size_t b = 0; b < n_blocks; ++b) {
    auto& blk = m.blocks[b];
    blk.attn_norm.assign(d_model, 1.0f);
    blk.ffn_norm.assign(d_model, 1.0f);
    for (auto k : kAllKinds) {
      auto& l = blk.layer(k);
      l.kind = k;
      l.block_index = b;
      const auto [rows, cols] = m.expected_shape(k);
      l.weight = Matrix(rows, cols);
      Rng rng(mix_seed(seed, b, static_cast<std::uint64_t>(k)));
      const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
      for (auto& w : l.weight.flat()) w = static_cast<float>(rng.uniform(-bound, bound));
    }
  }
  return m;
}

/// FNV-1a over the little-endian bytes of every weight and norm scale.
inline std::uint64_t weights_checksum(const ToyModel& m) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto feed = [&](std::span<const float> v) {
    for (float f : v) {
      auto u = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) {
        h ^= (u >> (8 * i)) & 0xFFu;
        h *= 0x100000001b3ull;
      }
    }
  };
  for (const auto& blk : m.blocks) {
    for (const auto& l : blk.layers) feed(l.weight.flat());
    feed(blk.attn_norm);
    feed(blk.ffn_norm);
  }
  return h;
}

// ---------------------------------------------------------------- forward

struct CaptureFlags {
  bool layer_inputs = false;
  bool layer_outputs = false;
  bool attention = false;
  bool block_io = false;

  static CaptureFlags none() { return {}; }
  static CaptureFlags all() { return {true, true, true, true}; }
};

/// Captured activations of one block for one sequence. Layers that share an
/// input (q/k/v and gate/up) share the stored matrix.
struct BlockTrace {
  Matrix attn_in;   // input to q, k, v
  Matrix o_in;      // head-concatenated attention mix
  Matrix ffn_in;    // input to gate, up
  Matrix down_in;   // silu(gate) * up
  std::array<Matrix, kLayersPerBlock> outputs;
  Matrix attention;  // N x N, head-averaged post-softmax
  Matrix block_in;
  Matrix block_out;

  const Matrix& input(LayerKind k) const {
    switch (k) {
      case LayerKind::q:
      case LayerKind::k:
      case LayerKind::v:
        return attn_in;
      case LayerKind::o:
        return o_in;
      case LayerKind::gate:
      case LayerKind::up:
        return ffn_in;
      case LayerKind::down:
        return down_in;
    }
    return attn_in;
  }
  const Matrix& output(LayerKind k) const { return outputs[static_cast<std::size_t>(k)]; }
};

/// Activations captured from one forward pass over one sequence.
struct ActivationTrace {
  std::vector<Span> spans;
  std::vector<BlockTrace> blocks;
  CaptureFlags flags;
  std::size_t n_tokens = 0;
};

struct ForwardResult {
  Matrix hidden;  // final residual stream, N x d_model
  ActivationTrace trace;
};

namespace detail {

inline Matrix rms_norm(const Matrix& x, const std::vector<float>& scale, float eps) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    const double ms = squared_norm(x.row(n)) / static_cast<double>(x.cols());
    const auto inv = static_cast<float>(1.0 / std::sqrt(ms + eps));
    auto src = x.row(n);
    auto dst = out.row(n);
    for (std::size_t c = 0; c < x.cols(); ++c) dst[c] = src[c] * inv * scale[c];
  }
  return out;
}

inline void check_finite(const Matrix& m, std::size_t block, std::string_view what) {
  if (!all_finite(m.flat()))
    throw NumericError("non-finite value in block " + std::to_string(block) + " " +
                       std::string(what));
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  auto fa = a.flat();
  auto fb = b.flat();
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] += fb[i];
}

/// Causal multi-head attention. Returns the head-concatenated value mix and
/// writes the head-averaged probabilities into `avg_attention`.
inline Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                               std::size_t n_heads, Matrix* avg_attention) {
  const std::size_t n = q.rows();
  const std::size_t d = q.cols();
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix mix(n, d);
  if (avg_attention) *avg_attention = Matrix(n, n);
  std::vector<double> probs(n);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c)
          s += static_cast<double>(q(i, off + c)) * k(j, off + c);
        probs[j] = s * scale;
        mx = std::max(mx, probs[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        probs[j] = std::exp(probs[j] - mx);
        z += probs[j];
      }
      for (std::size_t j = 0; j <= i; ++j) probs[j] /= z;
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) acc += probs[j] * v(j, off + c);
        mix(i, off + c) = static_cast<float>(acc);
      }
      if (avg_attention)
        for (std::size_t j = 0; j <= i; ++j)
          (*avg_attention)(i, j) += static_cast<float>(probs[j] / static_cast<double>(n_heads));
    }
  }
  return mix;
}

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

}  // namespace detail

/// Runs one block in place on the residual stream `x`.
inline void forward_block(const ToyModel& model, std::size_t b, Matrix& x, BlockTrace* trace,
                          const CaptureFlags& flags) {
  const Block& blk = model.blocks[b];
  auto out_of = [&](LayerKind k, const Matrix& in) {
    Matrix z = matmul_transposed(in, blk.layer(k).weight);
    detail::check_finite(z, b, kind_name(k));
    return z;
  };
  if (trace && flags.block_io) trace->block_in = x;

  Matrix a_in = detail::rms_norm(x, blk.attn_norm, model.norm_eps);
  detail::check_finite(a_in, b, "attn_norm");
  Matrix q = out_of(LayerKind::q, a_in);
  Matrix k = out_of(LayerKind::k, a_in);
  Matrix v = out_of(LayerKind::v, a_in);
  Matrix attention;
  Matrix mix = detail::causal_attention(q, k, v, model.n_heads,
                                        trace && flags.attention ? &attention : nullptr);
  Matrix o = out_of(LayerKind::o, mix);
  detail::add_inplace(x, o);

  Matrix f_in = detail::rms_norm(x, blk.ffn_norm, model.norm_eps);
  detail::check_finite(f_in, b, "ffn_norm");
  Matrix g = out_of(LayerKind::gate, f_in);
  Matrix u = out_of(LayerKind::up, f_in);
  Matrix hdn(g.rows(), g.cols());
  for (std::size_t i = 0; i < hdn.size(); ++i)
    hdn.flat()[i] = detail::silu(g.flat()[i]) * u.flat()[i];
  detail::check_finite(hdn, b, "swiglu");
  Matrix dn = out_of(LayerKind::down, hdn);
  detail::add_inplace(x, dn);

  if (!trace) return;
  if (flags.attention) trace->attention = std::move(attention);
  if (flags.block_io) trace->block_out = x;
  if (flags.layer_inputs) {
    trace->attn_in = std::move(a_in);
    trace->o_in = std::move(mix);
    trace->ffn_in = std::move(f_in);
    trace->down_in = std::move(hdn);
  }
  if (flags.layer_outputs) {
    trace->outputs = {std::move(q), std::move(k), std::move(v), std::move(o),
                      std::move(g), std::move(u), std::move(dn)};
  }
}

/// Pure function of (model, sequence, flags).
inline ForwardResult forward(const ToyModel& model, const TokenSequence& seq,
                             const CaptureFlags& capture = CaptureFlags::none()) {
  if (seq.embeddings.cols() != model.d_model)
    throw ShapeError("sequence has " + std::to_string(seq.embeddings.cols()) +
                     " columns, model d_model is " + std::to_string(model.d_model));
  seq.validate();
  ForwardResult r;
  r.hidden = seq.embeddings;
  r.trace.spans = seq.spans;
  r.trace.flags = capture;
  r.trace.n_tokens = seq.size();
  const bool any = capture.layer_inputs || capture.layer_outputs || capture.attention ||
                   capture.block_io;
  if (any) r.trace.blocks.resize(model.blocks.size());
  for (std::size_t b = 0; b < model.blocks.size(); ++b)
    forward_block(model, b, r.hidden, any ? &r.trace.blocks[b] : nullptr, capture);
  return r;
}

}  // namespace tamp
