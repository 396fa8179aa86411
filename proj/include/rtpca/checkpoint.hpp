#pragma once

// Checkpoint file: a single binary blob holding a JSON header followed by
// raw little-endian float32 arrays.
//
//   bytes 0..7    magic "RTPCACK1"
//   bytes 8..15   u64 little-endian header length H
//   bytes 16..    H bytes of UTF-8 JSON
//   then          float32 payload; each array at the offset (in floats,
//                 relative to the payload start) stated in the header
//
// The header carries the model config echo, step/epoch counters, the RNG
// state, the best evaluation MPJPE, and the name -> {shape, offset} table
// for model parameters and optimizer moments. Arrays are stored as float32
// regardless of the run precision.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rtpca/model.hpp"
#include "rtpca/tensor.hpp"
#include "rtpca/tpca.hpp"

namespace rtpca {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

inline nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::ordered_json j;
  j["frames"] = cfg.frames;
  j["joints"] = cfg.joints;
  j["channels"] = cfg.channels;
  j["blocks"] = cfg.blocks;
  j["heads"] = cfg.heads;
  j["mlp_ratio"] = cfg.mlp_ratio;
  j["dropout"] = cfg.dropout;
  j["tpca"] = {{"stages", cfg.tpca.stages},
               {"ratio", cfg.tpca.ratio},
               {"compression", to_string(cfg.tpca.compression)},
               {"amplification", to_string(cfg.tpca.amplification)}};
  j["xlr"] = {{"prev_pool_target", cfg.xlr.prev_pool_target},
              {"enabled", cfg.xlr.enabled}};
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.frames = j.at("frames").get<int64_t>();
  cfg.joints = j.at("joints").get<int64_t>();
  cfg.channels = j.at("channels").get<int64_t>();
  cfg.blocks = j.at("blocks").get<int64_t>();
  cfg.heads = j.at("heads").get<int64_t>();
  cfg.mlp_ratio = j.at("mlp_ratio").get<int64_t>();
  cfg.dropout = j.at("dropout").get<double>();
  const auto& t = j.at("tpca");
  cfg.tpca.stages = t.at("stages").get<int64_t>();
  cfg.tpca.ratio = t.at("ratio").get<int64_t>();
  const std::string comp = t.at("compression").get<std::string>();
  const std::string amp = t.at("amplification").get<std::string>();
  if (comp == "pool") {
    cfg.tpca.compression = Compression::pool;
  } else if (comp == "conv") {
    cfg.tpca.compression = Compression::conv;
  } else {
    throw ConfigError("tpca compression must be 'pool' or 'conv', got '" +
                      comp + "'");
  }
  if (amp == "linear") {
    cfg.tpca.amplification = Amplification::linear;
  } else if (amp == "trans_conv") {
    cfg.tpca.amplification = Amplification::trans_conv;
  } else {
    throw ConfigError("tpca amplification must be 'linear' or 'trans_conv', got '" +
                      amp + "'");
  }
  const auto& x = j.at("xlr");
  cfg.xlr.prev_pool_target = x.at("prev_pool_target").get<int64_t>();
  cfg.xlr.enabled = x.at("enabled").get<bool>();
  cfg.validate();
  return cfg;
}

// Training-progress payload stored alongside the parameters.
template <class S>
struct CheckpointExtra {
  int64_t step = 0;
  int64_t epoch = 0;
  double best_mpjpe = -1.0;
  std::string rng_state;
  std::vector<std::vector<S>> adam_m;
  std::vector<std::vector<S>> adam_v;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'R', 'T', 'P', 'C', 'A', 'C', 'K', '1'};

inline void append_f32(std::vector<float>& payload, const void* src,
                       size_t count, bool is_double) {
  const size_t base = payload.size();
  payload.resize(base + count);
  if (is_double) {
    const double* d = static_cast<const double*>(src);
    for (size_t i = 0; i < count; ++i)
      payload[base + i] = static_cast<float>(d[i]);
  } else {
    std::memcpy(payload.data() + base, src, count * sizeof(float));
  }
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ParamStore<S>& params,
                     const CheckpointExtra<S>* extra = nullptr) {
  nlohmann::ordered_json header;
  header["format"] = "rtpca-checkpoint";
  header["version"] = 1;
  header["config"] = model_config_to_json(cfg);
  header["step"] = extra ? extra->step : 0;
  header["epoch"] = extra ? extra->epoch : 0;
  header["best_mpjpe"] = extra ? extra->best_mpjpe : -1.0;
  header["rng"] = extra ? extra->rng_state : "";

  std::vector<float> payload;
  constexpr bool is_double = std::is_same_v<S, double>;
  nlohmann::ordered_json ptable = nlohmann::ordered_json::array();
  for (const auto& [name, t] : params.items()) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = payload.size();
    ptable.push_back(std::move(entry));
    detail::append_f32(payload, t.values().data(),
                       static_cast<size_t>(t.numel()), is_double);
  }
  header["params"] = std::move(ptable);

  nlohmann::ordered_json mtable = nlohmann::ordered_json::array();
  if (extra) {
    for (size_t i = 0; i < extra->adam_m.size(); ++i) {
      nlohmann::ordered_json entry;
      entry["name"] = params.items()[i].first;
      entry["m_offset"] = payload.size();
      detail::append_f32(payload, extra->adam_m[i].data(),
                         extra->adam_m[i].size(), is_double);
      entry["v_offset"] = payload.size();
      detail::append_f32(payload, extra->adam_v[i].data(),
                         extra->adam_v[i].size(), is_double);
      entry["size"] = extra->adam_m[i].size();
      mtable.push_back(std::move(entry));
    }
  }
  header["adam"] = std::move(mtable);

  const std::string header_str = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("checkpoint: cannot write " + path);
  out.write(detail::kCheckpointMagic, 8);
  const uint64_t hlen = header_str.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(header_str.data(), static_cast<std::streamsize>(hlen));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
}

// Loads parameters (and optionally optimizer state) into an existing store.
// The stored config must match `expected` exactly.
template <class S>
void load_checkpoint(const std::string& path, const ModelConfig& expected,
                     ParamStore<S>& params,
                     CheckpointExtra<S>* extra = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("checkpoint: cannot open " + path);
  char magic[8];
  uint64_t hlen = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0) {
    throw ParseError("checkpoint: " + path + " is not a checkpoint file");
  }
  std::string header_str(hlen, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ParseError("checkpoint: truncated header in " + path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad header: ") + e.what());
  }

  const nlohmann::ordered_json stored_cfg =
      model_config_to_json(model_config_from_json(header.at("config")));
  if (stored_cfg != model_config_to_json(expected)) {
    throw ConfigError("checkpoint: stored model config " + stored_cfg.dump() +
                      " does not match the run config");
  }

  std::ifstream in2(path, std::ios::binary);
  in2.seekg(0, std::ios::end);
  const std::streamoff end_pos = in2.tellg();
  const size_t payload_floats =
      static_cast<size_t>(end_pos - static_cast<std::streamoff>(16 + hlen)) /
      sizeof(float);
  std::vector<float> data(payload_floats);
  in2.seekg(static_cast<std::streamoff>(16 + hlen));
  in2.read(reinterpret_cast<char*>(data.data()),
           static_cast<std::streamsize>(payload_floats * sizeof(float)));
  if (!in2) throw ParseError("checkpoint: truncated payload in " + path);

  auto& items = params.items();
  const auto& ptable = header.at("params");
  if (ptable.size() != items.size()) {
    throw ConfigError("checkpoint: parameter table size mismatch");
  }
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& entry = ptable[i];
    if (entry.at("name").get<std::string>() != items[i].first) {
      throw ConfigError("checkpoint: parameter '" +
                        entry.at("name").get<std::string>() +
                        "' does not match expected '" + items[i].first + "'");
    }
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != items[i].second.shape()) {
      throw ConfigError("checkpoint: shape mismatch for " + items[i].first);
    }
    const size_t off = entry.at("offset").get<size_t>();
    const size_t count = static_cast<size_t>(items[i].second.numel());
    if (off + count > data.size()) {
      throw ParseError("checkpoint: payload too short for " + items[i].first);
    }
    auto& dst = items[i].second.mutable_values();
    for (size_t k = 0; k < count; ++k)
      dst[k] = static_cast<S>(data[off + k]);
  }

  if (extra) {
    extra->step = header.value("step", int64_t{0});
    extra->epoch = header.value("epoch", int64_t{0});
    extra->best_mpjpe = header.value("best_mpjpe", -1.0);
    extra->rng_state = header.value("rng", std::string{});
    extra->adam_m.clear();
    extra->adam_v.clear();
    for (const auto& entry : header.at("adam")) {
      const size_t size = entry.at("size").get<size_t>();
      const size_t mo = entry.at("m_offset").get<size_t>();
      const size_t vo = entry.at("v_offset").get<size_t>();
      if (mo + size > data.size() || vo + size > data.size()) {
        throw ParseError("checkpoint: payload too short for optimizer state");
      }
      std::vector<S> m(size), v(size);
      for (size_t k = 0; k < size; ++k) {
        m[k] = static_cast<S>(data[mo + k]);
        v[k] = static_cast<S>(data[vo + k]);
      }
      extra->adam_m.push_back(std::move(m));
      extra->adam_v.push_back(std::move(v));
    }
  }
}

}  // namespace rtpca
