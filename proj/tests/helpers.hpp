#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "tamp/core.hpp"
#include "tamp/model.hpp"

namespace testutil {

namespace fs = std::filesystem;

/// Fresh empty directory under the system temp dir.
inline fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tamp_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

inline tamp::Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed,
                                  double scale = 1.0) {
  tamp::Rng rng(seed);
  tamp::Matrix m(rows, cols);
  for (auto& v : m.flat()) v = static_cast<float>(scale * rng.normal());
  return m;
}

/// Sequence with spans laid out from (name, len) pairs; ids follow list order.
inline tamp::TokenSequence sequence(tamp::Matrix emb,
                                    const std::vector<std::pair<std::string, std::size_t>>& parts) {
  std::vector<std::pair<tamp::ModalityId, std::size_t>> p;
  std::vector<std::string> names;
  for (const auto& [name, len] : parts) {
    int id = -1;
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) id = static_cast<int>(i);
    if (id < 0) {
      id = static_cast<int>(names.size());
      names.push_back(name);
    }
    p.emplace_back(tamp::ModalityId{id, name}, len);
  }
  tamp::TokenSequence s;
  s.embeddings = std::move(emb);
  s.spans = tamp::make_spans(p);
  return s;
}

inline std::vector<tamp::TokenSequence> random_sequences(std::size_t count, std::size_t d,
                                                         std::size_t n_a, std::size_t n_b,
                                                         std::uint64_t seed) {
  std::vector<tamp::TokenSequence> out;
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(sequence(random_matrix(n_a + n_b, d, tamp::mix_seed(seed, i)),
                           {{"visual", n_a}, {"language", n_b}}));
  return out;
}

}  // namespace testutil
