#ifndef MEMFCN_CONFIG_HPP
#define MEMFCN_CONFIG_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "memfcn/common.hpp"
#include "memfcn/memplan.hpp"
#include "memfcn/train.hpp"
#include "memfcn/unet.hpp"
#include "memfcn/volio.hpp"

namespace memfcn {

inline BufferPolicy buffer_policy_from_name(const std::string& s) {
  if (s == "standard") return BufferPolicy::Standard;
  if (s == "inplace-abn") return BufferPolicy::InplaceABN;
  throw ConfigError("config: buffers must be \"standard\" or \"inplace-abn\", got \"" + s + "\"");
}

inline PrecisionPolicy precision_policy_from_name(const std::string& s) {
  if (s == "f32") return PrecisionPolicy::F32;
  if (s == "mixed") return PrecisionPolicy::MixedPrecision;
  throw ConfigError("config: precision must be \"f32\" or \"mixed\", got \"" + s + "\"");
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const char* scope,
                                std::initializer_list<const char*> known) {
  check_config(j.is_object(), std::string(scope) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(std::string(scope) + ": unknown key \"" + key + "\"");
  }
}

}  // namespace detail

/* Run configuration, one strict JSON object: unknown keys are rejected by
   name so typos fail loudly instead of silently training the wrong thing.
   Network depth is the channel list length. */
inline TrainConfig train_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  detail::reject_unknown_keys(
      j, "config",
      {"block", "channels", "in_channels", "classes", "bottleneck_k", "slope", "bn_eps",
       "bn_momentum", "gamma_floor", "buffers", "precision", "epochs", "val_cases", "patch",
       "seed", "lr", "wce", "wd", "plateau"});
  TrainConfig tc;
  try {
    if (j.contains("block")) tc.net.block = block_kind_from_name(j.at("block").get<std::string>());
    if (j.contains("channels")) {
      tc.net.channels = j.at("channels").get<std::vector<std::int64_t>>();
      tc.net.levels = static_cast<int>(tc.net.channels.size());
    }
    tc.net.in_channels = detail::json_field(j, "in_channels", tc.net.in_channels);
    tc.net.classes = detail::json_field(j, "classes", tc.net.classes);
    tc.net.bottleneck_k = detail::json_field(j, "bottleneck_k", tc.net.bottleneck_k);
    tc.net.slope = detail::json_field(j, "slope", tc.net.slope);
    tc.net.bn_eps = detail::json_field(j, "bn_eps", tc.net.bn_eps);
    tc.net.bn_momentum = detail::json_field(j, "bn_momentum", tc.net.bn_momentum);
    tc.net.gamma_floor = detail::json_field(j, "gamma_floor", tc.net.gamma_floor);
    if (j.contains("buffers"))
      tc.buffers = buffer_policy_from_name(j.at("buffers").get<std::string>());
    if (j.contains("precision"))
      tc.precision = precision_policy_from_name(j.at("precision").get<std::string>());
    tc.epochs = detail::json_field(j, "epochs", tc.epochs);
    tc.val_cases = detail::json_field(j, "val_cases", tc.val_cases);
    if (j.contains("patch")) tc.patch = j.at("patch").get<std::array<std::int64_t, 3>>();
    tc.seed = detail::json_field(j, "seed", tc.seed);
    tc.lr = detail::json_field(j, "lr", tc.lr);
    tc.wce = detail::json_field(j, "wce", tc.wce);
    tc.wd = detail::json_field(j, "wd", tc.wd);
    if (j.contains("plateau")) {
      const nlohmann::json& p = j.at("plateau");
      detail::reject_unknown_keys(p, "config.plateau",
                                  {"factor", "patience", "min_delta", "min_lr"});
      tc.plateau.factor = detail::json_field(p, "factor", tc.plateau.factor);
      tc.plateau.patience = detail::json_field(p, "patience", tc.plateau.patience);
      tc.plateau.min_delta = detail::json_field(p, "min_delta", tc.plateau.min_delta);
      tc.plateau.min_lr = detail::json_field(p, "min_lr", tc.plateau.min_lr);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  tc.validate();
  return tc;
}

inline TrainConfig train_config_from_file(const std::string& path) {
  return train_config_from_json(detail::read_file(path));
}

}  // namespace memfcn

#endif  // MEMFCN_CONFIG_HPP
