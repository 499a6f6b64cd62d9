#pragma once

// ScenarioConfig <-> JSON. Sections: training, network, delay, channel,
// model, dataset. Unknown keys are rejected; missing keys keep defaults.

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "bvib/error.hpp"
#include "bvib/scenario.hpp"

namespace bvib::config {

using Json = nlohmann::ordered_json;

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) fail(Errc::config_error, where + " must be an object");
  const std::set<std::string> keys(allowed.begin(), allowed.end());
  for (const auto& [k, v] : obj.items())
    if (!keys.contains(k)) fail(Errc::config_error, "unknown key " + where + "." + k);
}

template <typename T>
void read(const Json& obj, const std::string& where, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    const Json& v = obj.at(key);
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw std::invalid_argument("not an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
          throw std::invalid_argument("negative");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw std::invalid_argument("not a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw std::invalid_argument("not a string");
    }
    out = v.get<T>();
  } catch (const std::exception&) {
    fail(Errc::config_error, where + "." + key + " has the wrong type");
  }
}

inline void read_widths(const Json& obj, const std::string& where, const char* key, std::vector<std::size_t>& out) {
  if (!obj.contains(key)) return;
  const Json& v = obj.at(key);
  if (!v.is_array()) fail(Errc::config_error, where + "." + key + " must be an array of widths");
  out.clear();
  for (const auto& w : v) {
    if (!w.is_number_unsigned()) fail(Errc::config_error, where + "." + key + " must hold positive integers");
    out.push_back(w.get<std::size_t>());
  }
}

}  // namespace detail

/// Parses and validates. An empty or whitespace-only document yields defaults.
inline ScenarioConfig parse(const std::string& text) {
  ScenarioConfig c;
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) {
    c.validate();
    return c;
  }
  Json root;
  try {
    root = Json::parse(text);
  } catch (const Json::parse_error& e) {
    fail(Errc::config_error, std::string("malformed config: ") + e.what());
  }
  using detail::read;
  detail::reject_unknown(root, "config", {"training", "network", "delay", "channel", "model", "dataset"});
  const Json empty = Json::object();
  auto section = [&](const char* name) -> const Json& { return root.contains(name) ? root.at(name) : empty; };

  const Json& t = section("training");
  detail::reject_unknown(t, "training", {"epochs", "batches", "test_epochs", "beta", "learning_rate", "reparam", "seed"});
  read(t, "training", "epochs", c.epochs);
  read(t, "training", "batches", c.batches);
  read(t, "training", "test_epochs", c.test_epochs);
  read(t, "training", "beta", c.beta);
  read(t, "training", "learning_rate", c.learning_rate);
  read(t, "training", "seed", c.seed);
  if (t.contains("reparam")) {
    std::string mode;
    read(t, "training", "reparam", mode);
    if (mode == "stddev") c.reparam = vib::Reparam::stddev;
    else if (mode == "literal") c.reparam = vib::Reparam::literal;
    else fail(Errc::config_error, "training.reparam must be \"stddev\" or \"literal\"");
  }

  const Json& n = section("network");
  detail::reject_unknown(n, "network", {"lambda", "vehicles_per_server", "servers", "attack_strength", "control_interval"});
  if (n.contains("lambda")) {
    const Json& l = n.at("lambda");
    if (l.is_string() && l.get<std::string>() == "auto") c.lambda.reset();
    else if (l.is_number()) c.lambda = l.get<double>();
    else fail(Errc::config_error, "network.lambda must be a number or \"auto\"");
  }
  read(n, "network", "vehicles_per_server", c.delay.vehicles_per_server);
  read(n, "network", "servers", c.delay.servers);
  read(n, "network", "attack_strength", c.delay.attack_strength);
  read(n, "network", "control_interval", c.control_interval);

  const Json& d = section("delay");
  detail::reject_unknown(d, "delay", {"encode_delay", "decode_delay", "follower_upload_delay", "block_broadcast_delay",
                                      "slot_interval", "collision_spacing", "term_length", "election_constant"});
  read(d, "delay", "encode_delay", c.delay.encode_delay);
  read(d, "delay", "decode_delay", c.delay.decode_delay);
  read(d, "delay", "follower_upload_delay", c.delay.follower_upload_delay);
  read(d, "delay", "block_broadcast_delay", c.delay.block_broadcast_delay);
  read(d, "delay", "slot_interval", c.delay.slot_interval);
  read(d, "delay", "collision_spacing", c.delay.collision_spacing);
  read(d, "delay", "term_length", c.delay.term_length);
  read(d, "delay", "election_constant", c.delay.election_constant);

  const Json& ch = section("channel");
  detail::reject_unknown(ch, "channel", {"fade_margin", "carrier_frequency", "velocity", "capacity", "frame_fail_poor",
                                         "frame_fail_ideal"});
  read(ch, "channel", "fade_margin", c.channel.fade_margin);
  read(ch, "channel", "carrier_frequency", c.channel.carrier_frequency);
  read(ch, "channel", "velocity", c.channel.velocity);
  read(ch, "channel", "capacity", c.channel.capacity);
  read(ch, "channel", "frame_fail_poor", c.channel.frame_fail_poor);
  read(ch, "channel", "frame_fail_ideal", c.channel.frame_fail_ideal);

  const Json& m = section("model");
  detail::reject_unknown(m, "model", {"encoder_hidden", "latent", "decoder_hidden"});
  detail::read_widths(m, "model", "encoder_hidden", c.model.encoder_hidden);
  read(m, "model", "latent", c.model.latent);
  detail::read_widths(m, "model", "decoder_hidden", c.model.decoder_hidden);

  const Json& ds = section("dataset");
  detail::reject_unknown(ds, "dataset", {"kind", "train_size", "test_size", "dim", "classes", "spread", "train_images",
                                         "train_labels", "test_images", "test_labels"});
  if (ds.contains("kind")) {
    std::string kind;
    read(ds, "dataset", "kind", kind);
    if (kind == "synthetic") c.dataset.kind = DatasetKind::synthetic;
    else if (kind == "mnist") c.dataset.kind = DatasetKind::mnist;
    else fail(Errc::config_error, "dataset.kind must be \"synthetic\" or \"mnist\"");
  }
  read(ds, "dataset", "train_size", c.dataset.train_size);
  read(ds, "dataset", "test_size", c.dataset.test_size);
  read(ds, "dataset", "dim", c.dataset.dim);
  read(ds, "dataset", "classes", c.dataset.classes);
  read(ds, "dataset", "spread", c.dataset.spread);
  read(ds, "dataset", "train_images", c.dataset.train_images);
  read(ds, "dataset", "train_labels", c.dataset.train_labels);
  read(ds, "dataset", "test_images", c.dataset.test_images);
  read(ds, "dataset", "test_labels", c.dataset.test_labels);

  c.validate();
  return c;
}

inline Json to_json(const ScenarioConfig& c) {
  Json j;
  j["training"] = {{"epochs", c.epochs},
                   {"batches", c.batches},
                   {"test_epochs", c.test_epochs},
                   {"beta", c.beta},
                   {"learning_rate", c.learning_rate},
                   {"reparam", c.reparam == vib::Reparam::stddev ? "stddev" : "literal"},
                   {"seed", c.seed}};
  j["network"] = {{"lambda", c.lambda ? Json(*c.lambda) : Json("auto")},
                  {"vehicles_per_server", c.delay.vehicles_per_server},
                  {"servers", c.delay.servers},
                  {"attack_strength", c.delay.attack_strength},
                  {"control_interval", c.control_interval}};
  j["delay"] = {{"encode_delay", c.delay.encode_delay},
                {"decode_delay", c.delay.decode_delay},
                {"follower_upload_delay", c.delay.follower_upload_delay},
                {"block_broadcast_delay", c.delay.block_broadcast_delay},
                {"slot_interval", c.delay.slot_interval},
                {"collision_spacing", c.delay.collision_spacing},
                {"term_length", c.delay.term_length},
                {"election_constant", c.delay.election_constant}};
  j["channel"] = {{"fade_margin", c.channel.fade_margin},
                  {"carrier_frequency", c.channel.carrier_frequency},
                  {"velocity", c.channel.velocity},
                  {"capacity", c.channel.capacity},
                  {"frame_fail_poor", c.channel.frame_fail_poor},
                  {"frame_fail_ideal", c.channel.frame_fail_ideal}};
  j["model"] = {{"encoder_hidden", c.model.encoder_hidden},
                {"latent", c.model.latent},
                {"decoder_hidden", c.model.decoder_hidden}};
  j["dataset"] = {{"kind", c.dataset.kind == DatasetKind::synthetic ? "synthetic" : "mnist"},
                  {"train_size", c.dataset.train_size},
                  {"test_size", c.dataset.test_size},
                  {"dim", c.dataset.dim},
                  {"classes", c.dataset.classes},
                  {"spread", c.dataset.spread},
                  {"train_images", c.dataset.train_images},
                  {"train_labels", c.dataset.train_labels},
                  {"test_images", c.dataset.test_images},
                  {"test_labels", c.dataset.test_labels}};
  return j;
}

/// Pretty-printed, trailing newline. Doubles print with round-trip precision.
inline std::string serialize(const ScenarioConfig& c) { return to_json(c).dump(2) + "\n"; }

inline ScenarioConfig load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::config_error, "cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace bvib::config
