#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bvib/channel.hpp"
#include "bvib/error.hpp"
#include "bvib/latency.hpp"
#include "bvib/rate_optimizer.hpp"
#include "bvib/vib.hpp"

namespace bvib {

enum class DatasetKind { synthetic, mnist };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  std::size_t train_size = 1024;
  std::size_t test_size = 256;
  std::size_t dim = 784;
  std::size_t classes = 10;
  double spread = 1.0;
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

/// Encoder: input, hidden..., then 2 * latent. Decoder: latent, hidden..., classes.
struct ModelConfig {
  std::vector<std::size_t> encoder_hidden{128};
  std::size_t latent = 32;
  std::vector<std::size_t> decoder_hidden{128};

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Everything one run needs.
struct ScenarioConfig {
  int epochs = 300;
  int batches = 200;
  int test_epochs = 1;
  std::optional<double> lambda;  ///< empty: use the delay-minimising rate
  double beta = 1e-3;
  double learning_rate = 1e-3;
  vib::Reparam reparam = vib::Reparam::stddev;
  std::uint64_t seed = 1;
  double control_interval = 0.0;  ///< 0: T_term / 100
  latency::DelayParams delay;     ///< lambda and drop_prob are filled in by resolved_delay()
  channel::ChannelParams channel;
  ModelConfig model;
  DatasetConfig dataset;

  friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;

  double resolved_lambda() const {
    if (lambda) return *lambda;
    return rate_optimizer::optimal_lambda(delay.vehicles_per_server, delay.collision_spacing, delay.encode_delay);
  }

  double resolved_control_interval() const { return control_interval > 0.0 ? control_interval : delay.term_length / 100.0; }

  /// Delay parameters with the extraction rate and channel drop probability filled in.
  latency::DelayParams resolved_delay() const {
    latency::DelayParams p = delay;
    p.lambda = resolved_lambda();
    p.drop_prob = channel::derive(channel).drop_prob;
    return p;
  }

  std::vector<std::size_t> encoder_widths() const {
    std::vector<std::size_t> w{dataset.dim};
    w.insert(w.end(), model.encoder_hidden.begin(), model.encoder_hidden.end());
    w.push_back(2 * model.latent);
    return w;
  }

  std::vector<std::size_t> decoder_widths() const {
    std::vector<std::size_t> w{model.latent};
    w.insert(w.end(), model.decoder_hidden.begin(), model.decoder_hidden.end());
    w.push_back(dataset.classes);
    return w;
  }

  /// Cross-checks every module precondition; failures name the field.
  void validate() const {
    auto check = [](bool ok, const std::string& what) {
      if (!ok) fail(Errc::config_error, what);
    };
    check(epochs >= 1, "training.epochs must be >= 1");
    check(batches >= 1, "training.batches must be >= 1");
    check(test_epochs >= 1, "training.test_epochs must be >= 1");
    check(beta > 0.0, "training.beta must be positive");
    check(learning_rate > 0.0, "training.learning_rate must be positive");
    check(!lambda || *lambda > 0.0, "network.lambda must be positive or \"auto\"");
    check(delay.vehicles_per_server >= 1, "network.vehicles_per_server must be >= 1");
    check(delay.servers >= 1, "network.servers must be >= 1");
    check(delay.attack_strength >= 0 && 2 * delay.attack_strength < delay.servers,
          "network.attack_strength must satisfy 0 <= a < N/2");
    check(control_interval >= 0.0, "network.control_interval must be non-negative");
    check(dataset.classes >= 2 && dataset.classes <= 256, "dataset.classes must be in [2, 256]");
    check(dataset.dim >= 1, "dataset.dim must be >= 1");
    check(dataset.spread >= 0.0, "dataset.spread must be non-negative");
    if (dataset.kind == DatasetKind::synthetic) {
      check(dataset.train_size >= static_cast<std::size_t>(batches), "dataset.train_size must be >= training.batches");
      check(dataset.test_size >= 1, "dataset.test_size must be >= 1");
    }
    check(model.latent >= 1, "model.latent must be >= 1");
    for (auto w : model.encoder_hidden) check(w >= 1, "model.encoder_hidden widths must be >= 1");
    for (auto w : model.decoder_hidden) check(w >= 1, "model.decoder_hidden widths must be >= 1");
    if (!lambda) check(delay.vehicles_per_server >= 2, "network.lambda = \"auto\" needs vehicles_per_server >= 2");
    try {
      delay.validate();
      channel.validate();
      const auto p = resolved_delay();
      latency::expected_total_delay(p);
    } catch (const Error& e) {
      fail(e.code() == Errc::divergent_delay ? Errc::divergent_delay : Errc::config_error, e.what());
    }
  }
};

}  // namespace bvib
