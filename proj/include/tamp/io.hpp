#pragma once

// On-disk formats.
//
// Checkpoint: a directory holding `manifest.json`, `weights.bin` (raw
// little-endian float32) and, when any layer is masked, `masks.bin` (one
// bit per weight, LSB first, each mask starting on a byte boundary).
//
// Sequence data: JSONL, one record per sequence
//   {"spans":[{"modality":"visual","len":9},...],
//    "embeddings_file":"calib.bin","row_offset":0,"dim":64}
// with embeddings stored row-major in a shared little-endian float32 blob.
// `dim` is optional; readers fall back to the caller's expected width.

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tamp/model.hpp"

namespace tamp {

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace io_detail {

inline void append_f32(std::vector<std::uint8_t>& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((u >> (8 * i)) & 0xFFu));
}

inline float read_f32(const std::vector<std::uint8_t>& buf, std::size_t at) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(buf[at + i]) << (8 * i);
  return std::bit_cast<float>(u);
}

inline std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + p.string());
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

inline Json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw FormatError("cannot open " + p.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

template <typename T>
T field(const Json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw FormatError(where + ": bad field '" + key + "': " + e.what());
  }
}

}  // namespace io_detail

// ---------------------------------------------------------------- checkpoint

inline constexpr const char* kManifestName = "manifest.json";
inline constexpr const char* kWeightsBlob = "weights.bin";
inline constexpr const char* kMasksBlob = "masks.bin";

inline void save_checkpoint(const ToyModel& model, const fs::path& dir) {
  model.validate();
  fs::create_directories(dir);
  std::vector<std::uint8_t> weights;
  std::vector<std::uint8_t> masks;
  Json layers = Json::array();
  Json norms = Json::array();
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& blk = model.blocks[b];
    for (auto k : kAllKinds) {
      const auto& l = blk.layer(k);
      Json entry = {{"block", b},
                    {"kind", std::string(kind_name(k))},
                    {"shape", {l.weight.rows(), l.weight.cols()}},
                    {"blob", kWeightsBlob},
                    {"offset", weights.size()}};
      for (float w : l.weight.flat()) io_detail::append_f32(weights, w);
      if (l.mask) {
        const std::size_t offset = masks.size();
        const std::size_t bits = l.mask->keep.size();
        masks.resize(offset + (bits + 7) / 8, 0);
        for (std::size_t i = 0; i < bits; ++i)
          if (l.mask->keep[i]) masks[offset + i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
        entry["mask"] = {{"blob", kMasksBlob}, {"offset", offset}, {"bits", bits}};
      } else {
        entry["mask"] = nullptr;
      }
      layers.push_back(std::move(entry));
    }
    for (const auto& [name, vec] : {std::pair{"attn_norm", &blk.attn_norm},
                                    std::pair{"ffn_norm", &blk.ffn_norm}}) {
      norms.push_back({{"block", b},
                       {"name", name},
                       {"blob", kWeightsBlob},
                       {"offset", weights.size()},
                       {"len", vec->size()}});
      for (float w : *vec) io_detail::append_f32(weights, w);
    }
  }
  Json blobs = {{kWeightsBlob, weights.size()}};
  if (!masks.empty()) blobs[kMasksBlob] = masks.size();
  Json manifest = {{"format", "tamp-checkpoint"},
                   {"version", 1},
                   {"d_model", model.d_model},
                   {"n_heads", model.n_heads},
                   {"d_ff", model.d_ff},
                   {"n_blocks", model.blocks.size()},
                   {"seed", model.seed},
                   {"norm_eps", model.norm_eps},
                   {"blobs", blobs},
                   {"layers", layers},
                   {"norms", norms}};
  io_detail::write_file(dir / kWeightsBlob, weights);
  if (!masks.empty())
    io_detail::write_file(dir / kMasksBlob, masks);
  else if (fs::exists(dir / kMasksBlob))
    fs::remove(dir / kMasksBlob);
  io_detail::write_text(dir / kManifestName, manifest.dump(2) + "\n");
}

inline ToyModel load_checkpoint(const fs::path& dir) {
  using io_detail::field;
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) throw FormatError("missing " + manifest_path.string());
  const Json manifest = io_detail::read_json(manifest_path);
  const std::string where = manifest_path.string();
  if (field<std::string>(manifest, "format", where) != "tamp-checkpoint")
    throw FormatError(where + ": not a tamp checkpoint");
  if (field<int>(manifest, "version", where) != 1)
    throw FormatError(where + ": unsupported version");

  ToyModel m;
  m.d_model = field<std::size_t>(manifest, "d_model", where);
  m.n_heads = field<std::size_t>(manifest, "n_heads", where);
  m.d_ff = field<std::size_t>(manifest, "d_ff", where);
  m.seed = field<std::uint64_t>(manifest, "seed", where);
  m.norm_eps = static_cast<float>(field<double>(manifest, "norm_eps", where));
  const auto n_blocks = field<std::size_t>(manifest, "n_blocks", where);
  m.blocks.resize(n_blocks);

  std::map<std::string, std::vector<std::uint8_t>> blobs;
  const Json declared = field<Json>(manifest, "blobs", where);
  for (const auto& [name, size] : declared.items()) {
    if (name.find('/') != std::string::npos || name.find("..") != std::string::npos)
      throw FormatError(where + ": illegal blob name '" + name + "'");
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw FormatError("missing blob " + p.string());
    auto bytes = io_detail::read_file(p);
    if (bytes.size() != size.get<std::size_t>())
      throw FormatError(p.string() + ": expected " + std::to_string(size.get<std::size_t>()) +
                        " bytes, found " + std::to_string(bytes.size()));
    blobs.emplace(name, std::move(bytes));
  }
  auto blob = [&](const std::string& name) -> const std::vector<std::uint8_t>& {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw FormatError(where + ": undeclared blob '" + name + "'");
    return it->second;
  };
  auto floats_at = [&](const std::string& name, std::size_t offset, std::size_t count) {
    const auto& buf = blob(name);
    if (offset + count * 4 > buf.size())
      throw FormatError((dir / name).string() + ": read past end of blob");
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = io_detail::read_f32(buf, offset + 4 * i);
    return out;
  };

  std::vector<bool> seen(n_blocks * kLayersPerBlock, false);
  for (const auto& entry : field<Json>(manifest, "layers", where)) {
    const auto b = field<std::size_t>(entry, "block", where);
    const auto k = kind_from_name(field<std::string>(entry, "kind", where));
    if (b >= n_blocks) throw FormatError(where + ": block index out of range");
    const auto shape = field<std::vector<std::size_t>>(entry, "shape", where);
    if (shape.size() != 2) throw FormatError(where + ": shape must have 2 dims");
    auto& l = m.blocks[b].layer(k);
    l.kind = k;
    l.block_index = b;
    l.weight = Matrix(shape[0], shape[1],
                      floats_at(field<std::string>(entry, "blob", where),
                                field<std::size_t>(entry, "offset", where), shape[0] * shape[1]));
    if (entry.contains("mask") && !entry["mask"].is_null()) {
      const auto& mj = entry["mask"];
      const auto& buf = blob(field<std::string>(mj, "blob", where));
      const auto offset = field<std::size_t>(mj, "offset", where);
      const auto bits = field<std::size_t>(mj, "bits", where);
      if (bits != shape[0] * shape[1]) throw FormatError(where + ": mask size mismatch");
      if (offset + (bits + 7) / 8 > buf.size())
        throw FormatError((dir / field<std::string>(mj, "blob", where)).string() +
                          ": read past end of blob");
      KeepMask mask = KeepMask::all(shape[0], shape[1], false);
      for (std::size_t i = 0; i < bits; ++i)
        mask.keep[i] = (buf[offset + i / 8] >> (i % 8)) & 1u;
      l.mask = std::move(mask);
    }
    seen[LayerId{b, k}.flat()] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) throw FormatError(where + ": missing layer " + LayerId::from_flat(i).name());
  for (const auto& entry : field<Json>(manifest, "norms", where)) {
    const auto b = field<std::size_t>(entry, "block", where);
    if (b >= n_blocks) throw FormatError(where + ": block index out of range");
    const auto name = field<std::string>(entry, "name", where);
    auto values = floats_at(field<std::string>(entry, "blob", where),
                            field<std::size_t>(entry, "offset", where),
                            field<std::size_t>(entry, "len", where));
    if (name == "attn_norm")
      m.blocks[b].attn_norm = std::move(values);
    else if (name == "ffn_norm")
      m.blocks[b].ffn_norm = std::move(values);
    else
      throw FormatError(where + ": unknown norm '" + name + "'");
  }
  try {
    m.validate();
  } catch (const Error& e) {
    throw FormatError(where + ": " + e.what());
  }
  return m;
}

// ---------------------------------------------------------------- sequences

/// Maps modality names to stable small-integer ids in order of registration.
class ModalityRegistry {
 public:
  ModalityId get(const std::string& name) {
    for (const auto& m : known_)
      if (m.name == name) return m;
    known_.push_back({static_cast<int>(known_.size()), name});
    return known_.back();
  }
  const std::vector<ModalityId>& all() const { return known_; }

 private:
  std::vector<ModalityId> known_;
};

/// Writes `<stem>.jsonl` and `<stem>.bin` under `dir`.
inline void save_sequences(const std::vector<TokenSequence>& seqs, const fs::path& dir,
                           const std::string& stem) {
  fs::create_directories(dir);
  std::vector<std::uint8_t> blob;
  std::string jsonl;
  std::size_t row = 0;
  const std::string bin_name = stem + ".bin";
  for (const auto& s : seqs) {
    Json spans = Json::array();
    for (const auto& sp : s.spans) spans.push_back({{"modality", sp.modality.name}, {"len", sp.len}});
    Json rec = {{"spans", spans},
                {"embeddings_file", bin_name},
                {"row_offset", row},
                {"dim", s.embeddings.cols()}};
    jsonl += rec.dump() + "\n";
    for (float f : s.embeddings.flat()) io_detail::append_f32(blob, f);
    row += s.embeddings.rows();
  }
  io_detail::write_file(dir / bin_name, blob);
  io_detail::write_text(dir / (stem + ".jsonl"), jsonl);
}

inline std::vector<TokenSequence> load_sequences(const fs::path& jsonl, std::size_t expected_dim,
                                                 ModalityRegistry& registry) {
  using io_detail::field;
  std::ifstream in(jsonl);
  if (!in) throw FormatError("cannot open " + jsonl.string());
  std::map<std::string, std::vector<std::uint8_t>> blobs;
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = jsonl.string() + ":" + std::to_string(line_no);
    Json rec;
    try {
      rec = Json::parse(line);
    } catch (const Json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    const auto file = field<std::string>(rec, "embeddings_file", where);
    const auto row_offset = field<std::size_t>(rec, "row_offset", where);
    const std::size_t dim = rec.contains("dim") ? field<std::size_t>(rec, "dim", where) : expected_dim;
    if (expected_dim != 0 && dim != expected_dim)
      throw ShapeError(where + ": embedding dim " + std::to_string(dim) + " != model d_model " +
                       std::to_string(expected_dim));
    if (dim == 0) throw FormatError(where + ": embedding dim unknown");
    std::vector<std::pair<ModalityId, std::size_t>> parts;
    for (const auto& sp : field<Json>(rec, "spans", where))
      parts.emplace_back(registry.get(field<std::string>(sp, "modality", where)),
                         field<std::size_t>(sp, "len", where));
    TokenSequence seq;
    seq.spans = make_spans(parts);
    std::size_t n = 0;
    for (const auto& [m, len] : parts) n += len;

    auto it = blobs.find(file);
    if (it == blobs.end()) {
      const fs::path p = jsonl.parent_path() / file;
      it = blobs.emplace(file, io_detail::read_file(p)).first;
    }
    const auto& buf = it->second;
    const std::size_t begin = row_offset * dim * 4;
    if (begin + n * dim * 4 > buf.size())
      throw FormatError(where + ": rows exceed " + file);
    std::vector<float> data(n * dim);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = io_detail::read_f32(buf, begin + 4 * i);
    seq.embeddings = Matrix(n, dim, std::move(data));
    try {
      seq.validate();
    } catch (const Error& e) {
      throw FormatError(where + ": " + e.what());
    }
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace tamp
