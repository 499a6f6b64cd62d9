#pragma once

// Delay-minimising extraction rate and the online rate-adaptation loop.

#include <algorithm>
#include <cmath>
#include <optional>

#include "bvib/error.hpp"
#include "bvib/latency.hpp"

namespace bvib::rate_optimizer {

/// E[T] = A [(T_ec + 1/lambda) e^{B lambda} / (1 - p_d) + T_si]
struct Coefficients {
  double leading = 1.0;    ///< A, election factor
  double collision = 0.0;  ///< B = M (M-1) tau_c / 2, seconds
};

inline double collision_coefficient(int vehicles, double spacing) {
  const double m = vehicles;
  return m * (m - 1.0) * spacing / 2.0;
}

inline Coefficients coefficients(const latency::DelayParams& p) {
  return {latency::election_factor(p), collision_coefficient(p.vehicles_per_server, p.collision_spacing)};
}

/// dE[T]/dlambda = A e^{B lambda} / ((1 - p_d) lambda^2) (B T_ec lambda^2 + B lambda - 1).
inline double delay_derivative(double lambda, const Coefficients& c, double encode_delay, double drop_prob) {
  require(std::isfinite(lambda) && lambda > 0.0, Errc::invalid_parameter, "lambda must be positive");
  require(drop_prob >= 0.0 && drop_prob < 1.0, Errc::invalid_parameter, "p_d must be in [0,1)");
  const double b = c.collision;
  const double quadratic = b * encode_delay * lambda * lambda + b * lambda - 1.0;
  return c.leading * std::exp(b * lambda) / ((1.0 - drop_prob) * lambda * lambda) * quadratic;
}

/// Positive root of B T_ec lambda^2 + B lambda - 1 = 0.
inline double optimal_lambda(double collision_coeff, double encode_delay) {
  require(std::isfinite(collision_coeff) && collision_coeff >= 0.0, Errc::invalid_parameter, "B must be >= 0");
  require(std::isfinite(encode_delay) && encode_delay > 0.0, Errc::invalid_parameter, "T_ec must be positive");
  if (collision_coeff == 0.0) fail(Errc::no_interior_optimum, "without collisions the delay decreases in lambda");
  const double b = collision_coeff;
  // (-B + sqrt(B^2 + 4 B T_ec)) / (2 B T_ec), rationalised to avoid cancellation.
  return 2.0 / (b + std::sqrt(b * b + 4.0 * b * encode_delay));
}

inline double optimal_lambda(int vehicles, double spacing, double encode_delay) {
  require(spacing > 0.0, Errc::invalid_parameter, "collision spacing must be positive");
  if (vehicles < 2) fail(Errc::no_interior_optimum, "M < 2 has no collision term");
  return optimal_lambda(collision_coefficient(vehicles, spacing), encode_delay);
}

inline bool same_rate(double a, double b, double rel_tol = 1e-9) {
  return std::fabs(a - b) <= rel_tol * std::max(std::fabs(a), std::fabs(b));
}

struct Observation {
  double lambda = 0.0;
  int vehicles_per_server = 0;
  int servers = 0;
  int attack_strength = 0;
};

struct Adjustment {
  double lambda = 0.0;
  bool changed = false;
};

/// Online rate adaptation: a vehicle whose rate differs from the optimum, or
/// whose cell saw M or N change, moves to the recomputed optimum. N and a
/// never enter the optimum itself; they are watched only as change triggers.
class RateAdapter {
 public:
  explicit RateAdapter(latency::DelayParams base) : base_(base) {}

  Adjustment adapt(const Observation& obs) {
    const bool topology_changed =
        last_ && (last_->vehicles_per_server != obs.vehicles_per_server || last_->servers != obs.servers);
    latency::DelayParams p = base_;
    p.vehicles_per_server = obs.vehicles_per_server;
    p.servers = obs.servers;
    p.attack_strength = obs.attack_strength;
    if (topology_changed || !optimum_ || !last_) optimum_ = optimal_lambda(p.vehicles_per_server, p.collision_spacing, p.encode_delay);
    last_ = obs;
    if (same_rate(obs.lambda, *optimum_)) return {obs.lambda, false};
    last_->lambda = *optimum_;
    return {*optimum_, true};
  }

 private:
  latency::DelayParams base_;
  std::optional<Observation> last_;
  std::optional<double> optimum_;
};

}  // namespace bvib::rate_optimizer
