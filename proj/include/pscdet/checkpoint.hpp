#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pscdet/dsrae.hpp"
#include "pscdet/error.hpp"

namespace pscdet {

// Checkpoint layout: 8-byte magic "DSRAE\0v1", a little-endian u64 header
// length, a UTF-8 JSON header (architecture, hyperparameters, mode, block
// manifest), then the raw little-endian binary64 blocks in manifest order.
inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'R', 'A',
                                             'E', '\0', 'v', '1'};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r = (r << 8) | ((v >> (8 * i)) & 0xFF);
    return r;
  }
}

inline void append_u64le(std::string& out, std::uint64_t v) {
  const std::uint64_t le = to_le(v);
  char buf[8];
  std::memcpy(buf, &le, 8);
  out.append(buf, 8);
}

inline std::uint64_t read_u64le(const char* p) {
  std::uint64_t v;
  std::memcpy(&v, p, 8);
  return to_le(v);
}

inline void append_doubles_le(std::string& out, const double* vals,
                              std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    append_u64le(out, std::bit_cast<std::uint64_t>(vals[i]));
  }
}

inline void read_doubles_le(const char* p, double* vals, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    vals[i] = std::bit_cast<double>(read_u64le(p + 8 * i));
  }
}

struct CkptBlock {
  std::string name;
  std::vector<std::size_t> shape;
  const double* data;
  std::size_t count;
};

// Trainable blocks plus the normalization statistics.
inline std::vector<CkptBlock> checkpoint_blocks(const ModelParams& p) {
  std::vector<CkptBlock> blocks;
  for (const auto& b : param_blocks(p)) {
    blocks.push_back({b.name, b.tensor->shape, b.tensor->data.data(),
                      b.tensor->numel()});
  }
  blocks.push_back({"norm_mean", {kNumAttributes}, p.norm.mean.data(),
                    kNumAttributes});
  blocks.push_back({"norm_std", {kNumAttributes}, p.norm.stddev.data(),
                    kNumAttributes});
  return blocks;
}

inline nlohmann::json arch_to_json(const Architecture& a) {
  return {{"conv_channels", a.conv_channels},
          {"latent_dim", a.latent_dim},
          {"dsr_dim", a.dsr_dim},
          {"decoder_hidden", a.decoder_hidden},
          {"dropout_rate", a.dropout_rate}};
}

inline Architecture arch_from_json(const nlohmann::json& j) {
  Architecture a;
  a.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  a.latent_dim = j.at("latent_dim").get<std::size_t>();
  a.dsr_dim = j.at("dsr_dim").get<std::size_t>();
  a.decoder_hidden = j.at("decoder_hidden").get<std::size_t>();
  a.dropout_rate = j.at("dropout_rate").get<double>();
  return a;
}

inline nlohmann::json hyper_to_json(const Hyper& h) {
  return {{"p", h.p},         {"q", h.q},
          {"lambda1", h.lambda1}, {"lambda2", h.lambda2},
          {"lambda3", h.lambda3}, {"tau", h.tau}};
}

inline Hyper hyper_from_json(const nlohmann::json& j) {
  Hyper h;
  h.p = j.at("p").get<double>();
  h.q = j.at("q").get<double>();
  h.lambda1 = j.at("lambda1").get<double>();
  h.lambda2 = j.at("lambda2").get<double>();
  h.lambda3 = j.at("lambda3").get<double>();
  h.tau = j.at("tau").get<double>();
  return h;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& p, const std::string& path) {
  const auto blocks = detail::checkpoint_blocks(p);
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& b : blocks) {
    manifest.push_back({{"name", b.name},
                        {"shape", b.shape},
                        {"offset", offset},
                        {"count", b.count}});
    offset += b.count * 8;
  }
  nlohmann::json header = {{"format_version", 1},
                           {"mode", mode_name(p.mode)},
                           {"architecture", detail::arch_to_json(p.arch)},
                           {"hyperparameters", detail::hyper_to_json(p.hyper)},
                           {"manifest", manifest}};
  const std::string header_str = header.dump();

  std::string out;
  out.reserve(16 + header_str.size() + offset);
  out.append(kCheckpointMagic, 8);
  detail::append_u64le(out, header_str.size());
  out += header_str;
  for (const auto& b : blocks) {
    detail::append_doubles_le(out, b.data, b.count);
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open '" + tmp + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("write failed for '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw CheckpointError("cannot move checkpoint into place at '" + path + "'");
  }
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw CheckpointError("truncated checkpoint");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw CheckpointError("bad checkpoint magic");
  }
  const std::uint64_t header_len = detail::read_u64le(bytes.data() + 8);
  if (16 + header_len > bytes.size()) {
    throw CheckpointError("truncated checkpoint header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }

  ModelParams p;
  try {
    if (header.at("format_version").get<int>() != 1) {
      throw CheckpointError("unsupported checkpoint version");
    }
    const ModelMode mode =
        mode_from_name(header.at("mode").get<std::string>());
    const Architecture arch =
        detail::arch_from_json(header.at("architecture"));
    const Hyper hyper = detail::hyper_from_json(header.at("hyperparameters"));
    p = make_empty_params(arch, mode, hyper);

    const auto expected = detail::checkpoint_blocks(p);
    const auto& manifest = header.at("manifest");
    if (!manifest.is_array() || manifest.size() != expected.size()) {
      throw CheckpointError("checkpoint manifest does not match architecture");
    }
    const char* data = bytes.data() + 16 + header_len;
    const std::size_t data_size = bytes.size() - 16 - header_len;
    std::uint64_t offset = 0;
    std::vector<ParamBlock> targets = param_blocks(p);
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const auto& entry = manifest.at(i);
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto count = entry.at("count").get<std::uint64_t>();
      const auto off = entry.at("offset").get<std::uint64_t>();
      if (name != expected[i].name || shape != expected[i].shape ||
          count != expected[i].count || off != offset) {
        throw CheckpointError("checkpoint manifest entry '" + name +
                              "' does not match architecture");
      }
      if (off + count * 8 > data_size) {
        throw CheckpointError("truncated checkpoint data");
      }
      double* dst = nullptr;
      if (i < targets.size()) {
        dst = targets[i].tensor->data.data();
      } else if (name == "norm_mean") {
        dst = p.norm.mean.data();
      } else if (name == "norm_std") {
        dst = p.norm.stddev.data();
      }
      detail::read_doubles_le(data + off, dst, count);
      offset += count * 8;
    }
    if (offset != data_size) {
      throw CheckpointError("checkpoint has trailing bytes");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  } catch (const DataError& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  return p;
}

}  // namespace pscdet
