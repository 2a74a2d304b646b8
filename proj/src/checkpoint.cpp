// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include "umv2/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "umv2/errors.hpp"

namespace umv2 {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

namespace {

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

std::size_t dtype_size(const std::string& d) {
  if (d == "f32") return 4;
  if (d == "f64") return 8;
  return 0;
}

std::string entry_line(const ManifestEntry& e) {
  std::ostringstream os;
  os << e.name << ' ' << e.dtype << ' ' << e.rows << 'x' << e.cols << ' ' << e.offset << ' ' << e.bytes;
  return os.str();
}

std::string expect_prefix(std::istream& in, const std::string& prefix, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw LoadError(path + ": header ends before '" + prefix + "'");
  if (line.rfind(prefix, 0) != 0) throw LoadError(path + ": expected '" + prefix + "', got '" + line + "'");
  return line.substr(prefix.size());
}

std::uint64_t parse_u64(const std::string& s, const std::string& what, const std::string& path) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || s.front() == '-') throw LoadError(path + ": bad " + what + " '" + s + "'");
  return v;
}

template <typename T>
Model<T>& mut(const Model<T>& m) {
  return const_cast<Model<T>&>(m);  // for_each is non-const; only read here
}

}  // namespace

CheckpointHeader read_checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path + ": cannot open");
  std::string magic;
  if (!std::getline(in, magic)) throw LoadError(path + ": empty file");
  if (magic != kCheckpointMagic) {
    throw LoadError(path + ": version mismatch, expected '" + std::string(kCheckpointMagic) + "', got '" +
                    magic.substr(0, 40) + "'");
  }
  CheckpointHeader h;
  try {
    h.config = nlohmann::json::parse(expect_prefix(in, "config: ", path));
    h.meta = nlohmann::json::parse(expect_prefix(in, "meta: ", path));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path + ": bad header json: " + e.what());
  }
  const auto count = parse_u64(expect_prefix(in, "tensors: ", path), "tensor count", path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string line;
    if (!std::getline(in, line)) throw LoadError(path + ": manifest ends after " + std::to_string(i) + " entries");
    std::istringstream ls(line);
    ManifestEntry e;
    std::string shape, off, bytes, rest;
    if (!(ls >> e.name >> e.dtype >> shape >> off >> bytes) || (ls >> rest)) {
      throw LoadError(path + ": malformed manifest entry '" + line + "'");
    }
    const auto x = shape.find('x');
    if (x == std::string::npos) throw LoadError(path + ": bad shape in manifest entry '" + line + "'");
    e.rows = parse_u64(shape.substr(0, x), "rows", path);
    e.cols = parse_u64(shape.substr(x + 1), "cols", path);
    e.offset = parse_u64(off, "offset", path);
    e.bytes = parse_u64(bytes, "byte count", path);
    const std::size_t es = dtype_size(e.dtype);
    if (es == 0) throw LoadError(path + ": unknown dtype in manifest entry '" + line + "'");
    if (e.bytes != static_cast<std::uint64_t>(e.rows) * e.cols * es) {
      throw LoadError(path + ": byte count does not match shape in manifest entry '" + line + "'");
    }
    h.entries.push_back(e);
  }
  h.payload_bytes = parse_u64(expect_prefix(in, "payload: ", path), "payload size", path);
  h.payload_start = static_cast<std::uint64_t>(in.tellg());

  std::vector<const ManifestEntry*> sorted;
  for (const auto& e : h.entries) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto* e = sorted[i];
    if (e->offset + e->bytes > h.payload_bytes) {
      throw LoadError(path + ": manifest entry '" + entry_line(*e) + "' runs past the payload (" +
                      std::to_string(h.payload_bytes) + " bytes)");
    }
    if (i + 1 < sorted.size() && e->offset + e->bytes > sorted[i + 1]->offset) {
      throw LoadError(path + ": overlapping manifest entries '" + entry_line(*e) + "' and '" +
                      entry_line(*sorted[i + 1]) + "'");
    }
  }
  const auto size = std::filesystem::file_size(path);
  if (size < h.payload_start + h.payload_bytes) {
    throw LoadError(path + ": truncated payload, " + std::to_string(size - h.payload_start) + " of " +
                    std::to_string(h.payload_bytes) + " bytes present");
  }
  if (size > h.payload_start + h.payload_bytes) throw LoadError(path + ": trailing bytes after the payload");
  return h;
}

template <typename T>
void save_checkpoint(const Model<T>& m, const std::string& path, const nlohmann::json& extra) {
  std::vector<ManifestEntry> entries;
  std::vector<const Matrix<T>*> tensors;
  std::uint64_t off = 0;
  mut(m).for_each([&](const std::string& name, Matrix<T>& t) {
    ManifestEntry e{name, dtype_name<T>(), t.rows(), t.cols(), off, t.size() * sizeof(T)};
    off += e.bytes;
    entries.push_back(e);
    tensors.push_back(&t);
  });
  nlohmann::json meta;
  auto& layers = meta["memory"] = nlohmann::json::array();
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    if (!m.blocks[b].mem) continue;
    const auto& mem = *m.blocks[b].mem;
    layers.push_back({{"block", b},
                      {"gain_q", mem.retrieval.gain_q},
                      {"gain_k", mem.retrieval.gain_k},
                      {"shuffle_seed", mem.shuffle.seed()}});
  }
  meta["extra"] = extra;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(tmp + ": cannot open for writing");
    out << kCheckpointMagic << '\n';
    out << "config: " << to_json(m.cfg).dump() << '\n';
    out << "meta: " << meta.dump() << '\n';
    out << "tensors: " << entries.size() << '\n';
    for (const auto& e : entries) out << entry_line(e) << '\n';
    out << "payload: " << off << '\n';
    for (const auto* t : tensors) {
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(T)));
    }
    out.flush();
    if (!out) {
      std::remove(tmp.c_str());
      throw Error(tmp + ": write failed (disk full?)");
    }
  }
  std::filesystem::rename(tmp, path);
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  const auto h = read_checkpoint_header(path);
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(h.config);
  } catch (const ConfigError& e) {
    throw LoadError(path + ": bad config: " + e.what());
  }
  // Shapes come from a cheap uncalibrated build; every tensor is overwritten.
  ModelConfig skeleton = cfg;
  skeleton.init.calibrate = false;
  skeleton.init.sigma_v = 0.0;
  LoadedCheckpoint<T> out;
  out.model = build_model<T>(skeleton);
  out.model.cfg = cfg;

  std::map<std::string, const ManifestEntry*> by_name;
  for (const auto& e : h.entries) {
    if (!by_name.emplace(e.name, &e).second) throw LoadError(path + ": duplicate tensor '" + e.name + "'");
  }
  std::ifstream in(path, std::ios::binary);
  std::size_t seen = 0;
  out.model.for_each([&](const std::string& name, Matrix<T>& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw LoadError(path + ": missing tensor '" + name + "'");
    const auto& e = *it->second;
    if (e.dtype != dtype_name<T>()) {
      throw LoadError(path + ": tensor '" + name + "' has dtype " + e.dtype + ", expected " + dtype_name<T>());
    }
    if (e.rows != t.rows() || e.cols != t.cols()) {
      throw LoadError(path + ": tensor '" + name + "' has shape " + std::to_string(e.rows) + "x" +
                      std::to_string(e.cols) + ", config implies " + std::to_string(t.rows()) + "x" +
                      std::to_string(t.cols()));
    }
    in.seekg(static_cast<std::streamoff>(h.payload_start + e.offset));
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(e.bytes));
    if (!in) throw LoadError(path + ": read failed for tensor '" + name + "'");
    ++seen;
  });
  if (seen != h.entries.size()) throw LoadError(path + ": manifest lists tensors the config does not define");

  const auto& layers = h.meta.value("memory", nlohmann::json::array());
  std::size_t li = 0;
  for (std::size_t b = 0; b < out.model.blocks.size(); ++b) {
    auto& mem = out.model.blocks[b].mem;
    if (!mem) continue;
    if (li >= layers.size() || layers[li].value("block", std::size_t{0}) != b) {
      throw LoadError(path + ": meta lacks memory state for block " + std::to_string(b));
    }
    const auto& l = layers[li++];
    try {
      mem->retrieval.gain_q = l.at("gain_q").get<double>();
      mem->retrieval.gain_k = l.at("gain_k").get<double>();
      const auto seed = l.at("shuffle_seed").get<std::uint64_t>();
      mem->shuffle = IndexShuffle(seed, cfg.layer_memory_config().num_values());
    } catch (const nlohmann::json::exception& e) {
      throw LoadError(path + ": bad memory meta for block " + std::to_string(b) + ": " + e.what());
    }
  }
  out.extra = h.meta.value("extra", nlohmann::json::object());
  return out;
}

template void save_checkpoint<float>(const Model<float>&, const std::string&, const nlohmann::json&);
template void save_checkpoint<double>(const Model<double>&, const std::string&, const nlohmann::json&);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::string&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::string&);

}  // namespace umv2
