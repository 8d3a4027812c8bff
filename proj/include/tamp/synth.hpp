#pragma once

// Seeded synthetic multimodal data.
//
// A "world" fixes, per modality, a centre vector and a low-rank basis; tokens
// are centre + basis * z + isotropic noise. Calibration and evaluation sets
// share the world and differ only in their sample seed. A modality can be
// marked noisy: its tokens are then replaced by high-magnitude Gaussian noise
// confined to a fixed subset of channels (used for calibration only).

#include <optional>
#include <string>
#include <vector>

#include "tamp/model.hpp"

namespace tamp {

struct ModalitySpec {
  std::string name;
  std::size_t len = 0;
};

struct WorldConfig {
  std::size_t d_model = 64;
  std::vector<ModalitySpec> modalities = {{"visual", 24}, {"language", 16}};
  std::uint64_t seed = 0;
  std::size_t rank = 4;          // latent dims per modality
  double center_scale = 1.0;
  double latent_scale = 1.0;
  double noise_scale = 0.5;
  double noisy_magnitude = 8.0;          // scale of noisy-modality tokens
  double noisy_channel_fraction = 0.125; // share of channels carrying the noise
  double bias_value = 0.0;  // constant written to channel 0 of every token (0 = off)
};

struct SampleConfig {
  std::size_t n_samples = 16;
  std::uint64_t seed = 1;
  std::string noisy_modality;  // empty = clean
  std::vector<std::string> only;  // modalities to emit, in world order; empty = all
};

/// Fixed per-modality parameters derived from a WorldConfig.
class SyntheticWorld {
 public:
  explicit SyntheticWorld(WorldConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.modalities.empty()) throw ConfigError("at least one modality is required");
    if (cfg_.d_model == 0) throw ConfigError("d_model must be positive");
    for (std::size_t m = 0; m < cfg_.modalities.size(); ++m) {
      const auto& spec = cfg_.modalities[m];
      for (std::size_t p = 0; p < m; ++p)
        if (cfg_.modalities[p].name == spec.name)
          throw ConfigError("duplicate modality '" + spec.name + "'");
      Rng rng(mix_seed(cfg_.seed, 0xC0FFEE, m));
      std::vector<float> center(cfg_.d_model);
      for (auto& c : center) c = static_cast<float>(cfg_.center_scale * rng.normal());
      Matrix basis(cfg_.rank, cfg_.d_model);
      const double bscale = cfg_.latent_scale / std::sqrt(static_cast<double>(cfg_.rank));
      for (auto& b : basis.flat()) b = static_cast<float>(bscale * rng.normal());
      centers_.push_back(std::move(center));
      bases_.push_back(std::move(basis));
    }
    Rng rng(mix_seed(cfg_.seed, 0xBADC0DE));
    const auto n_noise = std::max<std::size_t>(
        1, static_cast<std::size_t>(cfg_.noisy_channel_fraction * static_cast<double>(cfg_.d_model)));
    const std::size_t first = cfg_.bias_value != 0.0 ? 1 : 0;
    noise_channels_ = rng.sample_without_replacement(cfg_.d_model - first, n_noise);
    for (auto& c : noise_channels_) c += first;
    std::sort(noise_channels_.begin(), noise_channels_.end());
  }

  const WorldConfig& config() const { return cfg_; }
  std::span<const float> center(std::size_t modality) const { return centers_.at(modality); }
  const std::vector<std::size_t>& noise_channels() const { return noise_channels_; }

  std::vector<TokenSequence> sample(const SampleConfig& sc) const {
    if (!sc.noisy_modality.empty()) {
      bool found = false;
      for (const auto& m : cfg_.modalities) found = found || m.name == sc.noisy_modality;
      if (!found) throw ConfigError("noisy modality '" + sc.noisy_modality + "' is not configured");
    }
    std::vector<bool> emit(cfg_.modalities.size(), sc.only.empty());
    for (const auto& name : sc.only) {
      bool found = false;
      for (std::size_t m = 0; m < cfg_.modalities.size(); ++m)
        if (cfg_.modalities[m].name == name) emit[m] = found = true;
      if (!found) throw ConfigError("modality '" + name + "' is not configured");
    }
    std::vector<TokenSequence> out;
    out.reserve(sc.n_samples);
    for (std::size_t s = 0; s < sc.n_samples; ++s) {
      Rng rng(mix_seed(sc.seed, s, 0x5EED));
      std::vector<std::pair<ModalityId, std::size_t>> parts;
      std::size_t n = 0;
      for (std::size_t m = 0; m < cfg_.modalities.size(); ++m) {
        if (!emit[m]) continue;
        parts.emplace_back(ModalityId{static_cast<int>(m), cfg_.modalities[m].name},
                           cfg_.modalities[m].len);
        n += cfg_.modalities[m].len;
      }
      TokenSequence seq;
      seq.spans = make_spans(parts);
      seq.embeddings = Matrix(n, cfg_.d_model);
      std::size_t row = 0;
      for (std::size_t m = 0; m < cfg_.modalities.size(); ++m) {
        if (!emit[m]) continue;
        const bool noisy = cfg_.modalities[m].name == sc.noisy_modality;
        for (std::size_t t = 0; t < cfg_.modalities[m].len; ++t, ++row) {
          auto x = seq.embeddings.row(row);
          if (noisy) {
            for (auto c : noise_channels_)
              x[c] = static_cast<float>(cfg_.noisy_magnitude * rng.normal());
            if (cfg_.bias_value != 0.0) x[0] = static_cast<float>(cfg_.bias_value);
            continue;
          }
          std::vector<double> z(cfg_.rank);
          for (auto& v : z) v = rng.normal();
          for (std::size_t c = 0; c < cfg_.d_model; ++c) {
            double v = centers_[m][c] + cfg_.noise_scale * rng.normal();
            for (std::size_t r = 0; r < cfg_.rank; ++r) v += bases_[m](r, c) * z[r];
            x[c] = static_cast<float>(v);
          }
          if (cfg_.bias_value != 0.0) x[0] = static_cast<float>(cfg_.bias_value);
        }
      }
      out.push_back(std::move(seq));
    }
    return out;
  }

 private:
  WorldConfig cfg_;
  std::vector<std::vector<float>> centers_;
  std::vector<Matrix> bases_;
  std::vector<std::size_t> noise_channels_;
};

/// Parses "visual:24,language:16".
inline std::vector<ModalitySpec> parse_modalities(const std::string& text) {
  std::vector<ModalitySpec> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    const auto colon = item.find(':');
    if (colon == std::string::npos || colon == 0)
      throw ConfigError("modality spec '" + item + "' must look like name:len");
    ModalitySpec spec;
    spec.name = item.substr(0, colon);
    try {
      spec.len = std::stoul(item.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad token count in '" + item + "'");
    }
    out.push_back(spec);
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw ConfigError("no modalities given");
  return out;
}

/// Zeroes o and down of block `b`, making it an identity on the residual stream.
inline void make_identity_block(ToyModel& model, std::size_t b) {
  for (auto k : {LayerKind::o, LayerKind::down})
    for (auto& w : model.blocks.at(b).layer(k).weight.flat()) w = 0.0f;
}

// ---------------------------------------------------------------- scenario

/// A model/data pair built to stress calibration-driven pruning:
///  - calibration sequences carry an extra modality of high-magnitude noise
///    on a few channels; evaluation sequences do not contain it;
///  - q/k are sharpened and share a rank-1 term along the clean data's
///    content direction, so attention concentrates on content tokens;
///  - every token carries a constant bias channel, and a fraction of the
///    d_model-input layers are redundant: small and close to rank 1 along that
///    channel, so their output tokens are nearly collinear.
struct AdversarialScenarioConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t n_blocks = 4;
  std::vector<ModalitySpec> modalities = {{"visual", 24}, {"audio", 16}, {"language", 16}};
  std::string noisy_modality = "audio";
  std::size_t calib_samples = 32;
  std::size_t eval_samples = 8;
  double noisy_magnitude = 8.0;
  double bias_value = 3.0;
  double qk_scale = 3.0;
  double attention_focus = 1.0;
  double redundant_fraction = 0.5;
  double redundant_scale = 0.3;
  double redundant_residual = 0.1;  // weight of the random part in redundant layers
  std::optional<std::uint64_t> calib_seed;  // resamples calibration only
};

struct Scenario {
  ToyModel model;
  std::vector<TokenSequence> calib;
  std::vector<TokenSequence> eval;
  std::vector<LayerId> redundant_layers;
};

/// Unit vector along the mean of the clean modalities' centres, zero on the
/// noise and bias channels.
inline std::vector<double> content_direction(const SyntheticWorld& world,
                                             const std::string& noisy_modality) {
  const auto& cfg = world.config();
  std::vector<double> c(cfg.d_model, 0.0);
  for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
    if (cfg.modalities[m].name == noisy_modality) continue;
    auto ctr = world.center(m);
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += ctr[j];
  }
  for (auto ch : world.noise_channels()) c[ch] = 0.0;
  if (cfg.bias_value != 0.0) c[0] = 0.0;
  double n = 0.0;
  for (double v : c) n += v * v;
  n = std::sqrt(n);
  if (n == 0.0) throw DegenerateError("content direction is zero");
  for (double& v : c) v /= n;
  return c;
}

inline Scenario make_adversarial_scenario(std::uint64_t seed,
                                          const AdversarialScenarioConfig& cfg = {}) {
  WorldConfig wc;
  wc.d_model = cfg.d_model;
  wc.modalities = cfg.modalities;
  wc.seed = mix_seed(seed, 0xD47A);
  wc.noisy_magnitude = cfg.noisy_magnitude;
  wc.bias_value = cfg.bias_value;
  SyntheticWorld world(wc);

  std::vector<std::string> clean;
  for (const auto& m : cfg.modalities)
    if (m.name != cfg.noisy_modality) clean.push_back(m.name);

  Scenario sc;
  sc.calib = world.sample({cfg.calib_samples, mix_seed(cfg.calib_seed.value_or(seed), 0xCA1B), cfg.noisy_modality, {}});
  sc.eval = world.sample({cfg.eval_samples, mix_seed(seed, 0xE7A1), "", clean});
  sc.model = init_synthetic(cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.n_blocks, mix_seed(seed, 0x30DE1));

  const auto c = content_direction(world, cfg.noisy_modality);
  const double d = static_cast<double>(cfg.d_model);
  Rng rng(mix_seed(seed, 0x57C7));
  for (std::size_t b = 0; b < sc.model.blocks.size(); ++b) {
    auto& blk = sc.model.blocks[b];
    std::vector<double> a(cfg.d_model);
    for (auto& v : a) v = rng.normal() / std::sqrt(d);
    for (auto k : {LayerKind::q, LayerKind::k}) {
      auto& w = blk.layer(k).weight;
      for (std::size_t o = 0; o < w.rows(); ++o)
        for (std::size_t i = 0; i < w.cols(); ++i)
          w(o, i) = static_cast<float>(cfg.qk_scale * w(o, i) +
                                       cfg.attention_focus * std::sqrt(d) * a[o] * c[i]);
    }
    for (auto k : {LayerKind::q, LayerKind::k, LayerKind::v, LayerKind::gate, LayerKind::up}) {
      const bool redundant = rng.uniform() < cfg.redundant_fraction;
      auto& w = blk.layer(k).weight;
      std::vector<double> u(w.rows());
      for (auto& v : u) v = rng.normal();
      if (!redundant) continue;
      sc.redundant_layers.push_back({b, k});
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
      for (std::size_t o = 0; o < w.rows(); ++o)
        for (std::size_t i = 0; i < w.cols(); ++i)
          w(o, i) = static_cast<float>(cfg.redundant_scale *
                                       (cfg.redundant_residual * w(o, i) + (i == 0 ? bound * u[o] : 0.0)));
    }
  }
  return sc;
}

}  // namespace tamp
