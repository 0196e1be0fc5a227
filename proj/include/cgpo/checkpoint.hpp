#pragma once

// Checkpoint file layout (little-endian), format version 1:
//
//   offset  size  field
//   0       8     magic "CGPOCKPT"
//   8       4     u32 format version (1)
//   12      4     u32 scalar width in bytes (4 = float32, 8 = float64)
//   16      8     u64 header length H
//   24      H     UTF-8 JSON header: {"model_config", "tokenizer_fingerprint",
//                 "n_params", "tensors": [{name, offset, rows, cols}], "provenance"}
//   24+H    N*w   weights, flat, in the order of "tensors"
//   ...     8     u64 FNV-1a of the weight bytes

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "hash.hpp"
#include "model.hpp"
#include "tokenizer.hpp"

namespace cgpo {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
          {"d_model", c.d_model},     {"d_ff", c.d_ff},
          {"context_len", c.context_len}, {"vocab_size", c.vocab_size},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

template <class T>
struct BasicCheckpoint {
  Transformer<T> model;
  std::string tokenizer_fingerprint = Tokenizer{}.fingerprint();
  nlohmann::json provenance = nlohmann::json::object();

  /// Content hash of config and weights; identifies a model in reports.
  std::string model_id() const {
    Fnv1a h;
    h.update(to_json(model.config()).dump());
    h.update(std::span<const T>(model.weights()));
    return h.hex();
  }
};

using Checkpoint = BasicCheckpoint<float>;

namespace detail {

constexpr char kCheckpointMagic[8] = {'C', 'G', 'P', 'O', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class U>
void put(std::ofstream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class U>
bool get(std::ifstream& in, U& v) {
  return static_cast<bool>(in.read(reinterpret_cast<char*>(&v), sizeof v));
}

}  // namespace detail

template <class T>
void save_checkpoint(const BasicCheckpoint<T>& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["model_config"] = to_json(ckpt.model.config());
  header["tokenizer_fingerprint"] = ckpt.tokenizer_fingerprint;
  header["n_params"] = ckpt.model.num_params();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : ckpt.model.layout().tensors) {
    tensors.push_back({{"name", t.name}, {"offset", t.offset}, {"rows", t.rows}, {"cols", t.cols}});
  }
  header["tensors"] = std::move(tensors);
  header["provenance"] = ckpt.provenance;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorKind::Io, "cannot open for writing: " + path.string());
  out.write(detail::kCheckpointMagic, 8);
  detail::put<std::uint32_t>(out, detail::kCheckpointVersion);
  detail::put<std::uint32_t>(out, sizeof(T));
  detail::put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto& w = ckpt.model.weights();
  out.write(reinterpret_cast<const char*>(w.data()),
            static_cast<std::streamsize>(w.size() * sizeof(T)));
  detail::put<std::uint64_t>(out, Fnv1a{}.update(std::span<const T>(w)).digest());
  out.flush();
  require(out.good(), ErrorKind::Io, "write failed: " + path.string());
}

/// Loads a checkpoint and checks its tokenizer fingerprint against
/// `expected_fingerprint` (the built-in tokenizer by default).
template <class T = float>
BasicCheckpoint<T> load_checkpoint(const std::filesystem::path& path,
                                   const std::string& expected_fingerprint =
                                       Tokenizer{}.fingerprint()) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::Io, "cannot open: " + path.string());
  auto corrupt = [&](const std::string& why) {
    fail(ErrorKind::CorruptCheckpoint, path.string() + ": " + why);
  };

  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
    corrupt("bad magic");
  std::uint32_t version = 0, width = 0;
  std::uint64_t header_len = 0;
  if (!detail::get(in, version) || !detail::get(in, width) || !detail::get(in, header_len))
    corrupt("truncated preamble");
  if (version != detail::kCheckpointVersion) corrupt("unsupported version " + std::to_string(version));
  if (width != sizeof(T)) corrupt("scalar width " + std::to_string(width) + " does not match");
  if (header_len > (1u << 26)) corrupt("implausible header length");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) corrupt("truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    corrupt(std::string("header: ") + e.what());
  }

  BasicCheckpoint<T> ckpt{Transformer<T>(model_config_from_json(header.at("model_config")))};
  ckpt.tokenizer_fingerprint = header.at("tokenizer_fingerprint").get<std::string>();
  ckpt.provenance = header.value("provenance", nlohmann::json::object());
  require(ckpt.tokenizer_fingerprint == expected_fingerprint, ErrorKind::FingerprintMismatch,
          path.string() + ": tokenizer fingerprint " + ckpt.tokenizer_fingerprint +
              " does not match " + expected_fingerprint);
  if (header.at("n_params").get<std::size_t>() != ckpt.model.num_params())
    corrupt("parameter count does not match model_config");

  auto& w = ckpt.model.weights();
  if (!in.read(reinterpret_cast<char*>(w.data()), static_cast<std::streamsize>(w.size() * sizeof(T))))
    corrupt("truncated weights");
  std::uint64_t checksum = 0;
  if (!detail::get(in, checksum)) corrupt("missing checksum");
  if (checksum != Fnv1a{}.update(std::span<const T>(w)).digest()) corrupt("checksum mismatch");
  return ckpt;
}

}  // namespace cgpo
