#pragma once

// Closed-form expected end-to-end delay of one upload-decode-commit cycle.

#include <cmath>

#include "bvib/error.hpp"

namespace bvib::latency {

/// Constants of the delay model. All durations in seconds.
struct DelayParams {
  double lambda = 0.2;                 ///< extraction rate, events/s
  double encode_delay = 0.05;          ///< T_ec
  double decode_delay = 0.02;          ///< T_dc
  double follower_upload_delay = 0.01; ///< T_f
  double block_broadcast_delay = 0.01; ///< T_p
  double slot_interval = 0.001;        ///< tau_t
  double collision_spacing = 0.003;    ///< tau_c, three slots
  double term_length = 600.0;          ///< T_term
  double election_constant = 0.01 / std::log(10.0);  ///< tau_b; tau_ele = 10 ms at N = 10
  int vehicles_per_server = 5;         ///< M
  int servers = 10;                    ///< N
  int attack_strength = 0;             ///< a
  double drop_prob = 0.0;              ///< p_d

  /// Builds parameters with the collision spacing tied to three slots.
  static DelayParams with_slot(double slot_interval) {
    DelayParams p;
    p.slot_interval = slot_interval;
    p.collision_spacing = 3.0 * slot_interval;
    return p;
  }

  /// T_si: decode + follower upload + block broadcast.
  double consensus_delay() const { return decode_delay + follower_upload_delay + block_broadcast_delay; }

  void validate() const {
    require(std::isfinite(lambda) && lambda > 0.0, Errc::invalid_parameter, "lambda must be positive");
    for (double d : {encode_delay, decode_delay, follower_upload_delay, block_broadcast_delay, slot_interval,
                     collision_spacing, term_length, election_constant})
      require(std::isfinite(d) && d >= 0.0, Errc::invalid_parameter, "delays must be finite and non-negative");
    require(term_length > 0.0, Errc::invalid_parameter, "term length must be positive");
    require(vehicles_per_server >= 1, Errc::invalid_parameter, "M must be >= 1");
    require(servers >= 1, Errc::invalid_parameter, "N must be >= 1");
    require(attack_strength >= 0 && 2 * attack_strength < servers, Errc::invalid_attack_strength,
            "attack strength must satisfy 0 <= a < N/2");
    require(drop_prob >= 0.0 && drop_prob < 1.0, Errc::invalid_parameter, "p_d must be in [0,1)");
  }

  friend bool operator==(const DelayParams&, const DelayParams&) = default;
};

inline double expected_extraction_delay(double lambda) {
  require(std::isfinite(lambda) && lambda > 0.0, Errc::invalid_parameter, "lambda must be positive");
  return 1.0 / lambda;
}

/// Probability that some pair of the M vehicles' sends fall within tau_c.
inline double collision_probability(double lambda, int vehicles, double spacing) {
  require(lambda > 0.0, Errc::invalid_parameter, "lambda must be positive");
  require(vehicles >= 1, Errc::invalid_parameter, "M must be >= 1");
  require(spacing >= 0.0, Errc::invalid_parameter, "collision spacing must be non-negative");
  const double m = vehicles;
  return -std::expm1(-lambda * m * (m - 1.0) * spacing / 2.0);
}

/// Expected send delay with re-extraction after each collision.
inline double send_delay(double extraction, double encoding, double p_collision) {
  require(p_collision >= 0.0 && p_collision <= 1.0, Errc::invalid_parameter, "p_c must be in [0,1]");
  if (p_collision >= 1.0) fail(Errc::divergent_delay, "collision probability 1 never lets an upload through");
  return (extraction + encoding) / (1.0 - p_collision);
}

/// Expected arrival delay with retransmission after each channel drop.
inline double arrival_delay(double send, double p_drop) {
  require(p_drop >= 0.0 && p_drop <= 1.0, Errc::invalid_parameter, "p_d must be in [0,1]");
  if (p_drop >= 1.0) fail(Errc::divergent_delay, "drop probability 1 never lets an upload through");
  return send / (1.0 - p_drop);
}

/// tau_ele = tau_b ln N.
inline double election_time(int servers, double time_constant) {
  require(servers >= 1, Errc::invalid_parameter, "N must be >= 1");
  require(time_constant > 0.0, Errc::invalid_parameter, "tau_b must be positive");
  return time_constant * std::log(static_cast<double>(servers));
}

inline double election_time(const DelayParams& p) {
  return p.election_constant > 0.0 ? election_time(p.servers, p.election_constant) : 0.0;
}

/// Expected election overhead charged to a cycle of expected length E_T.
inline double election_overhead(double expected_total, double term_length, double tau_ele, int attack, int servers) {
  require(term_length > 0.0, Errc::invalid_parameter, "term length must be positive");
  require(servers >= 1, Errc::invalid_parameter, "N must be >= 1");
  require(attack >= 0 && 2 * attack < servers, Errc::invalid_attack_strength, "attack strength must satisfy 0 <= a < N/2");
  return expected_total / term_length * tau_ele * (1.0 + static_cast<double>(attack) / servers);
}

/// Delay of one cycle before election overhead:
/// (1/lambda + T_ec) / (1 - p_d) * e^{lambda M (M-1) tau_c / 2} + T_si.
inline double base_cycle_delay(const DelayParams& p) {
  const double m = p.vehicles_per_server;
  const double retries = std::exp(p.lambda * m * (m - 1.0) * p.collision_spacing / 2.0);
  return (1.0 / p.lambda + p.encode_delay) / (1.0 - p.drop_prob) * retries + p.consensus_delay();
}

/// N T_term / (N T_term - (N + a) tau_ele). Errors once elections eat the term.
inline double election_factor(const DelayParams& p) {
  const double n = p.servers;
  const double numerator = n * p.term_length;
  const double denominator = numerator - (n + p.attack_strength) * election_time(p);
  if (!(denominator > 0.0)) fail(Errc::divergent_delay, "election overhead consumes the whole term");
  return numerator / denominator;
}

/// Closed-form E[T], the solution of E = base + E / T_term * tau_ele (1 + a/N).
inline double expected_total_delay(const DelayParams& p) {
  p.validate();
  return election_factor(p) * base_cycle_delay(p);
}

}  // namespace bvib::latency
