#pragma once

// Checkpoint: "AROBCKPT" | u16 version | u32 header length | JSON header |
// f32 parameters then buffers, in the network's canonical order.

#include "json.hpp"

#include "arob/io/binary.hpp"
#include "arob/network.hpp"

namespace arob::io {

inline constexpr char kCheckpointMagic[8] = {'A', 'R', 'O', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

inline nlohmann::json spec_to_json(const NetworkSpec& s) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : s.blocks) blocks.push_back({{"filters", b.filters}, {"pool", b.pool}});
  return {{"in_channels", s.in_channels}, {"spatial", s.spatial},   {"blocks", blocks},
          {"dense_hidden", s.dense_hidden}, {"classes", s.classes}, {"dropout", s.dropout},
          {"bn_epsilon", s.bn_epsilon},   {"bn_momentum", s.bn_momentum}};
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.in_channels = j.at("in_channels").get<std::size_t>();
  s.spatial = j.at("spatial").get<std::array<std::size_t, 3>>();
  s.blocks.clear();
  for (const auto& b : j.at("blocks")) s.blocks.push_back({b.at("filters").get<std::size_t>(), b.at("pool").get<std::size_t>()});
  s.dense_hidden = j.at("dense_hidden").get<std::size_t>();
  s.classes = j.at("classes").get<std::size_t>();
  s.dropout = j.at("dropout").get<double>();
  s.bn_epsilon = j.at("bn_epsilon").get<double>();
  s.bn_momentum = j.at("bn_momentum").get<double>();
  return s;
}

struct CheckpointInfo {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;
};

inline Bytes encode_checkpoint(const Network<float>& net, const CheckpointInfo& info) {
  if (!net.spec()) throw UsageError("checkpoint: network was not built from a NetworkSpec");
  nlohmann::json header;
  header["spec"] = spec_to_json(*net.spec());
  header["seed"] = info.seed;
  header["best_epoch"] = info.best_epoch;
  nlohmann::json tensors = nlohmann::json::array();
  const auto names = net.parameter_names();
  const auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) tensors.push_back({{"name", names[i]}, {"shape", params[i]->shape()}});
  for (const auto* b : net.buffers()) tensors.push_back({{"name", "buffer"}, {"shape", b->shape()}});
  header["tensors"] = tensors;
  const std::string text = header.dump();

  Bytes out(kCheckpointMagic, kCheckpointMagic + 8);
  put_le<std::uint16_t>(out, kCheckpointVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto* p : params) put_payload<float>(out, p->data());
  for (const auto* b : net.buffers()) put_payload<float>(out, b->data());
  return out;
}

inline std::pair<Network<float>, CheckpointInfo> decode_checkpoint(std::span<const std::uint8_t> bytes,
                                                                   const std::string& origin = "checkpoint") {
  auto fail = [&](const std::string& why) { throw FormatError(origin + ": " + why); };
  if (bytes.size() < 14 || !std::equal(kCheckpointMagic, kCheckpointMagic + 8, bytes.begin()))
    fail("bad magic (not a checkpoint)");
  const auto version = get_le<std::uint16_t>(bytes.data() + 8);
  if (version != kCheckpointVersion)
    fail("unsupported checkpoint version " + std::to_string(version) + " (expected " +
         std::to_string(kCheckpointVersion) + ")");
  const auto hlen = get_le<std::uint32_t>(bytes.data() + 10);
  if (bytes.size() < 14 + std::size_t{hlen}) fail("truncated header");
  nlohmann::json header;
  NetworkSpec spec;
  CheckpointInfo info;
  try {
    header = nlohmann::json::parse(bytes.begin() + 14, bytes.begin() + 14 + hlen);
    spec = spec_from_json(header.at("spec"));
    info.seed = header.at("seed").get<std::uint64_t>();
    info.best_epoch = header.at("best_epoch").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed header: ") + e.what());
  }
  Network<float> net = build_network<float>(spec, 0);
  std::vector<Tensor<float>*> all = net.parameters();
  for (auto* b : net.buffers()) all.push_back(b);
  const auto& listed = header.at("tensors");
  if (listed.size() != all.size())
    fail("tensor count " + std::to_string(listed.size()) + " does not match the spec (" + std::to_string(all.size()) +
         ")");
  std::size_t expected = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (listed[i].at("shape").get<Shape>() != all[i]->shape()) fail("tensor " + std::to_string(i) + " shape mismatch");
    expected += all[i]->size() * 4;
  }
  const std::size_t actual = bytes.size() - 14 - hlen;
  if (actual != expected)
    fail("payload size mismatch: expected " + std::to_string(expected) + " bytes, got " + std::to_string(actual));
  const std::uint8_t* p = bytes.data() + 14 + hlen;
  for (auto* t : all) {
    const auto v = get_payload<float>(p, t->size());
    std::copy(v.begin(), v.end(), t->data().begin());
    p += t->size() * 4;
  }
  return {std::move(net), info};
}

inline void save_checkpoint(const fs::path& path, const Network<float>& net, const CheckpointInfo& info) {
  write_file_atomic(path, encode_checkpoint(net, info));
}

inline std::pair<Network<float>, CheckpointInfo> load_checkpoint(const fs::path& path) {
  const Bytes b = read_file(path);
  return decode_checkpoint(b, path.string());
}

}  // namespace arob::io
