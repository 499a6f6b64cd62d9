#pragma once

// Homogeneous and non-homogeneous Poisson extraction processes.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "bvib/error.hpp"
#include "bvib/rng.hpp"

namespace bvib::arrivals {

/// Extraction intensity: either a constant rate or a bounded rate function.
class Intensity {
 public:
  using RateFn = std::function<double(double)>;

  static Intensity constant(double rate) {
    require(std::isfinite(rate) && rate > 0.0, Errc::invalid_parameter, "constant rate must be positive");
    Intensity in;
    in.rate_ = rate;
    in.max_rate_ = rate;
    return in;
  }

  /// rate_fn must stay within [0, max_rate] wherever it is queried.
  static Intensity time_varying(RateFn rate_fn, double max_rate) {
    require(static_cast<bool>(rate_fn), Errc::invalid_parameter, "rate function is empty");
    require(std::isfinite(max_rate) && max_rate > 0.0, Errc::invalid_parameter, "rate envelope must be positive");
    Intensity in;
    in.fn_ = std::move(rate_fn);
    in.max_rate_ = max_rate;
    return in;
  }

  bool is_constant() const noexcept { return !fn_; }
  double max_rate() const noexcept { return max_rate_; }

  double rate_at(double t) const {
    if (is_constant()) return rate_;
    const double r = fn_(t);
    if (!(r >= 0.0)) fail(Errc::invalid_intensity, "rate function returned a negative or NaN value");
    if (r > max_rate_ * (1.0 + 1e-12)) fail(Errc::invalid_intensity, "rate function exceeds its declared envelope");
    return r;
  }

 private:
  Intensity() = default;

  double rate_ = 0.0;
  double max_rate_ = 0.0;
  RateFn fn_;
};

/// Event times A_1 <= A_2 <= ... on [0, horizon).
struct ArrivalSequence {
  std::vector<double> times;
  double horizon = 0.0;

  std::size_t count() const noexcept { return times.size(); }

  /// Gaps A_i - A_{i-1}, with the first gap measured from 0.
  std::vector<double> gaps() const {
    std::vector<double> out;
    out.reserve(times.size());
    double prev = 0.0;
    for (double t : times) {
      out.push_back(t - prev);
      prev = t;
    }
    return out;
  }
};

/// Inverse-CDF exponential variate for a given uniform u in [0, 1).
inline double interarrival_from_uniform(double rate, double u) {
  require(std::isfinite(rate) && rate > 0.0, Errc::invalid_parameter, "rate must be positive");
  return -std::log1p(-u) / rate;
}

/// Exponential inter-arrival with mean 1/rate. Consumes exactly one uniform.
inline double sample_interarrival(double rate, RandomStream& rng) {
  require(std::isfinite(rate) && rate > 0.0, Errc::invalid_parameter, "rate must be positive");
  return interarrival_from_uniform(rate, rng.uniform());
}

inline double interarrival_cdf(double rate, double t) {
  require(std::isfinite(rate) && rate > 0.0, Errc::invalid_parameter, "rate must be positive");
  require(t >= 0.0, Errc::invalid_parameter, "time must be non-negative");
  return -std::expm1(-rate * t);
}

/// Expected event count on [0, t): integral of the rate function.
inline double cumulative_rate(const Intensity& intensity, double t) {
  require(t >= 0.0, Errc::invalid_parameter, "time must be non-negative");
  if (t == 0.0) return 0.0;
  if (intensity.is_constant()) return intensity.rate_at(0.0) * t;
  auto f = [&](double x) { return intensity.rate_at(x); };
  return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, 0.0, t, 20, 1e-10);
}

/// P(A_i <= a) for a point of the process conditioned on [0, t).
inline double conditional_point_cdf(const Intensity& intensity, double a, double t) {
  require(a >= 0.0 && a <= t, Errc::invalid_parameter, "need 0 <= a <= t");
  const double total = cumulative_rate(intensity, t);
  if (!(total > 0.0)) fail(Errc::degenerate_process, "cumulative rate is zero on [0, t)");
  return cumulative_rate(intensity, a) / total;
}

/// Samples event times on [0, horizon).
///
/// Constant intensity accumulates exponential gaps. A time-varying intensity
/// is thinned against its envelope (Lewis-Shedler): candidates arrive at the
/// envelope rate and each is kept with probability rate(t)/max_rate, so every
/// candidate costs two uniforms.
inline ArrivalSequence sample_process(const Intensity& intensity, double horizon, RandomStream& rng) {
  require(std::isfinite(horizon) && horizon > 0.0, Errc::invalid_parameter, "horizon must be positive");
  ArrivalSequence seq;
  seq.horizon = horizon;
  const double envelope = intensity.max_rate();
  double t = 0.0;
  for (;;) {
    t += sample_interarrival(envelope, rng);
    if (t >= horizon) break;
    if (intensity.is_constant()) {
      seq.times.push_back(t);
      continue;
    }
    if (rng.uniform() * envelope < intensity.rate_at(t)) seq.times.push_back(t);
  }
  return seq;
}

}  // namespace bvib::arrivals
