#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bvib {

/// Failure categories shared by every module. The CLI maps these to exit codes.
enum class Errc {
  invalid_parameter,
  invalid_intensity,
  degenerate_process,
  singular_channel,
  inconsistent_parameters,
  degenerate_chain,
  divergent_delay,
  no_interior_optimum,
  invalid_shape,
  invalid_state,
  network_dead,
  node_paralyzed,
  not_leader,
  invalid_attack_strength,
  format_error,
  config_error,
  dataset_error,
};

constexpr std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_parameter: return "invalid-parameter";
    case Errc::invalid_intensity: return "invalid-intensity";
    case Errc::degenerate_process: return "degenerate-process";
    case Errc::singular_channel: return "singular-channel";
    case Errc::inconsistent_parameters: return "inconsistent-parameters";
    case Errc::degenerate_chain: return "degenerate-chain";
    case Errc::divergent_delay: return "divergent-delay";
    case Errc::no_interior_optimum: return "no-interior-optimum";
    case Errc::invalid_shape: return "invalid-shape";
    case Errc::invalid_state: return "invalid-state";
    case Errc::network_dead: return "network-dead";
    case Errc::node_paralyzed: return "node-paralyzed";
    case Errc::not_leader: return "not-leader";
    case Errc::invalid_attack_strength: return "invalid-attack-strength";
    case Errc::format_error: return "format-error";
    case Errc::config_error: return "config-error";
    case Errc::dataset_error: return "dataset-error";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, Errc code, const char* what) {
  if (!condition) fail(code, what);
}

}  // namespace bvib
