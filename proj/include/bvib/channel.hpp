#pragma once

// Two-state (Gilbert-Elliott) cellular channel: physical parameters to
// persistence probabilities, update-discard probability, and slot simulation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "bvib/error.hpp"
#include "bvib/rng.hpp"

namespace bvib::channel {

inline constexpr double kSpeedOfLight = 3.0e8;  // m/s

// ---------------------------------------------------------------------------
// Special functions

namespace detail {

/// Magnitude below which the ascending series of J0 is used.
inline constexpr double kJ0SeriesLimit = 12.0;

inline double j0_series(double x) {
  const long double q = -0.25L * static_cast<long double>(x) * x;
  long double term = 1.0L;
  long double sum = 1.0L;
  for (int k = 1; k < 200; ++k) {
    term *= q / (static_cast<long double>(k) * k);
    sum += term;
    if (std::fabs(term) < 1e-22L * std::fabs(sum) + 1e-30L) break;
  }
  return static_cast<double>(sum);
}

/// Hankel asymptotic expansion, truncated at the smallest term.
inline double j0_asymptotic(double x) {
  // c_k = prod_{j<=k} (2j-1)^2 / (k! 8^k); P and Q alternate over even/odd k.
  double p = 1.0;
  double q = 0.0;
  double c = 1.0;        // c_k / x^k
  double last = 1.0;
  for (int k = 1; k < 60; ++k) {
    const double next = c * (2.0 * k - 1.0) * (2.0 * k - 1.0) / (8.0 * k * x);
    if (next > last) break;
    c = next;
    last = next;
    const int half = k / 2;
    const double sign = (half % 2 == 0) ? 1.0 : -1.0;
    if (k % 2 == 0) {
      p += sign * c;
    } else {
      q -= sign * c;
    }
    if (c < 1e-17) break;
  }
  const double chi = x - 0.25 * std::numbers::pi;
  return std::sqrt(2.0 / (std::numbers::pi * x)) * (p * std::cos(chi) - q * std::sin(chi));
}

/// e^{-x} I_k(x) for k = 0..kmax, x >= 0, by Miller's backward recurrence
/// normalised with e^x = I_0(x) + 2 sum_{k>=1} I_k(x).
inline std::vector<double> scaled_bessel_i(double x, std::size_t kmax) {
  std::vector<double> out(kmax + 1, 0.0);
  if (x == 0.0) {
    out[0] = 1.0;
    return out;
  }
  const double hi = std::max(static_cast<double>(kmax), x);
  const auto start = static_cast<std::size_t>(hi + 50.0 + 10.0 * std::sqrt(hi));
  double above = 0.0;  // I_{k+1}
  double cur = 1e-280;  // I_k
  double norm = 0.0;
  for (std::size_t k = start; k > 0; --k) {
    const double below = (2.0 * static_cast<double>(k) / x) * cur + above;  // I_{k-1}
    above = cur;
    cur = below;
    if (k - 1 <= kmax) out[k - 1] = cur;
    norm += (k - 1 == 0 ? 1.0 : 2.0) * cur;
    if (cur > 1e250) {
      const double s = 1e-250;
      cur *= s;
      above *= s;
      norm *= s;
      for (double& v : out) v *= s;
    }
  }
  for (double& v : out) v /= norm;
  return out;
}

/// sum_{k>=first} ratio^k e^{-x} I_k(x), truncated at a relative tail of 1e-12.
inline double weighted_bessel_sum(double ratio, double x, std::size_t first) {
  std::size_t kmax = static_cast<std::size_t>(x + 40.0 + 12.0 * std::sqrt(x));
  for (;;) {
    const auto scaled = scaled_bessel_i(x, kmax);
    double sum = 0.0;
    double weight = std::pow(ratio, static_cast<double>(first));
    bool converged = false;
    for (std::size_t k = first; k <= kmax; ++k) {
      const double term = weight * scaled[k];
      sum += term;
      weight *= ratio;
      if (static_cast<double>(k) > x && term <= 1e-13 * sum) {
        converged = true;
        break;
      }
    }
    if (converged || sum == 0.0) return sum;
    kmax *= 2;
  }
}

}  // namespace detail

/// Zeroth-order Bessel function of the first kind.
inline double bessel_j0(double x) {
  require(std::isfinite(x), Errc::invalid_parameter, "bessel_j0 argument must be finite");
  const double ax = std::fabs(x);
  return ax <= detail::kJ0SeriesLimit ? detail::j0_series(ax) : detail::j0_asymptotic(ax);
}

/// First-order Marcum Q function Q_1(a, b).
///
/// Uses Q_1 = e^{-(a^2+b^2)/2} sum_k (a/b)^k I_k(ab) for a < b and the
/// complementary form 1 - e^{-(a^2+b^2)/2} sum_{k>=1} (b/a)^k I_k(ab)
/// otherwise, both with exponentially scaled Bessel terms.
inline double marcum_q1(double a, double b) {
  require(std::isfinite(a) && std::isfinite(b), Errc::invalid_parameter, "marcum_q1 arguments must be finite");
  require(a >= 0.0 && b >= 0.0, Errc::invalid_parameter, "marcum_q1 arguments must be non-negative");
  if (b == 0.0) return 1.0;
  if (a == 0.0) return std::exp(-0.5 * b * b);
  const double x = a * b;
  const double gauss = std::exp(-0.5 * (a - b) * (a - b));
  if (a < b) return std::clamp(gauss * detail::weighted_bessel_sum(a / b, x, 0), 0.0, 1.0);
  return std::clamp(1.0 - gauss * detail::weighted_bessel_sum(b / a, x, 1), 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Channel parameterisation

struct ChannelParams {
  double fade_margin = 10.0;          ///< F, dimensionless
  double carrier_frequency = 7.0e8;   ///< f_c, Hz
  double velocity = 20.0;             ///< v, m/s
  double capacity = 1000.0;           ///< theta, frames per second
  double frame_fail_poor = 0.1;       ///< v_L
  double frame_fail_ideal = 0.01;     ///< l_L

  void validate() const {
    require(std::isfinite(fade_margin) && fade_margin > 0.0, Errc::invalid_parameter, "fade margin must be positive");
    require(std::isfinite(carrier_frequency) && carrier_frequency >= 0.0, Errc::invalid_parameter,
            "carrier frequency must be non-negative");
    require(std::isfinite(velocity) && velocity >= 0.0, Errc::invalid_parameter, "velocity must be non-negative");
    require(std::isfinite(capacity) && capacity > 0.0, Errc::invalid_parameter, "capacity must be positive");
    require(frame_fail_poor >= 0.0 && frame_fail_poor <= 1.0, Errc::invalid_parameter, "v_L must be in [0,1]");
    require(frame_fail_ideal >= 0.0 && frame_fail_ideal <= 1.0, Errc::invalid_parameter, "l_L must be in [0,1]");
  }

  friend bool operator==(const ChannelParams&, const ChannelParams&) = default;
};

struct ChannelDerived {
  double doppler = 0.0;         ///< f_d, Hz
  double correlation = 0.0;     ///< rho
  double eta = 0.0;
  double mean_fail = 0.0;       ///< mean frame failure probability
  double persist_poor = 0.0;    ///< P_p
  double persist_ideal = 0.0;   ///< P_i
  double frame_fail_poor = 1.0;
  double frame_fail_ideal = 0.0;
  double drop_prob = 0.0;       ///< p_d

  /// Long-run fraction of Poor slots.
  double steady_state_poor() const {
    const double leave = (1.0 - persist_ideal) + (1.0 - persist_poor);
    if (leave == 0.0) return 0.0;
    return (1.0 - persist_ideal) / leave;
  }
};

namespace detail {

inline double checked_probability(double raw, const char* what) {
  constexpr double slack = 1e-9;
  if (!(raw >= -slack && raw <= 1.0 + slack)) fail(Errc::inconsistent_parameters, what);
  return std::clamp(raw, 0.0, 1.0);
}

}  // namespace detail

/// Probability that a single update is discarded by the two-state channel.
inline double drop_probability(double persist_poor, double persist_ideal, double fail_poor, double fail_ideal) {
  for (double p : {persist_poor, persist_ideal, fail_poor, fail_ideal})
    require(p >= 0.0 && p <= 1.0, Errc::invalid_parameter, "drop_probability inputs must be in [0,1]");
  if (persist_poor == 1.0) fail(Errc::degenerate_chain, "P_p = 1 leaves the chain without a stationary mix");
  const double leave_ideal = 1.0 - persist_ideal;
  const double poor_term = fail_poor * leave_ideal / (2.0 - persist_poor - persist_ideal);
  const double ideal_term = fail_ideal / (1.0 + leave_ideal / (1.0 - persist_poor));
  return poor_term + ideal_term;
}

/// Persistence probabilities from fade margin and fading correlation.
///
/// The persistence numerator is Q1(eta, |rho| eta) - Q1(|rho| eta, eta), the
/// standard Gilbert-Elliott form. The Ideal line follows the printed
/// expression 1 - (1 - pe (2 - P_p)) / (1 - pe) as-is.
inline std::pair<double, double> persistence(double fade_margin, double correlation) {
  require(std::isfinite(fade_margin) && fade_margin > 0.0, Errc::invalid_parameter, "fade margin must be positive");
  require(std::fabs(correlation) <= 1.0, Errc::invalid_parameter, "correlation must be in [-1,1]");
  const double one_minus_rho2 = 1.0 - correlation * correlation;
  if (one_minus_rho2 < 1e-10) fail(Errc::singular_channel, "|rho| = 1 makes eta singular (zero Doppler?)");
  const double eta = std::sqrt(2.0 / (fade_margin * one_minus_rho2));
  const double rho_eta = std::fabs(correlation) * eta;
  const double numerator = marcum_q1(eta, rho_eta) - marcum_q1(rho_eta, eta);
  const double mean_fail = -std::expm1(-1.0 / fade_margin);
  const double persist_poor = detail::checked_probability(1.0 - numerator / std::expm1(1.0 / fade_margin), "P_p outside [0,1]");
  const double persist_ideal = detail::checked_probability(
      1.0 - (1.0 - mean_fail * (2.0 - persist_poor)) / (1.0 - mean_fail), "P_i outside [0,1]");
  return {persist_poor, persist_ideal};
}

inline ChannelDerived derive(const ChannelParams& params) {
  params.validate();
  ChannelDerived d;
  d.doppler = params.carrier_frequency * params.velocity / kSpeedOfLight;
  d.correlation = bessel_j0(2.0 * std::numbers::pi * d.doppler / params.capacity);
  const double one_minus_rho2 = 1.0 - d.correlation * d.correlation;
  if (one_minus_rho2 < 1e-10) fail(Errc::singular_channel, "|rho| = 1 makes eta singular (zero Doppler?)");
  d.eta = std::sqrt(2.0 / (params.fade_margin * one_minus_rho2));
  d.mean_fail = -std::expm1(-1.0 / params.fade_margin);
  std::tie(d.persist_poor, d.persist_ideal) = persistence(params.fade_margin, d.correlation);
  d.frame_fail_poor = params.frame_fail_poor;
  d.frame_fail_ideal = params.frame_fail_ideal;
  try {
    d.drop_prob = drop_probability(d.persist_poor, d.persist_ideal, d.frame_fail_poor, d.frame_fail_ideal);
  } catch (const Error& e) {
    fail(Errc::inconsistent_parameters, e.what());
  }
  return d;
}

// ---------------------------------------------------------------------------
// Slot simulation

enum class ChannelState : std::uint8_t { ideal, poor };

enum class SlotOutcome : std::uint8_t { delivered, lost };

/// Draws the next state and that slot's frame outcome; two uniforms.
inline std::pair<ChannelState, SlotOutcome> step(ChannelState state, const ChannelDerived& d, RandomStream& rng) {
  const double stay = state == ChannelState::poor ? d.persist_poor : d.persist_ideal;
  const bool stays = rng.uniform() < stay;
  const ChannelState next = stays ? state : (state == ChannelState::poor ? ChannelState::ideal : ChannelState::poor);
  const double loss = next == ChannelState::poor ? d.frame_fail_poor : d.frame_fail_ideal;
  return {next, rng.uniform() < loss ? SlotOutcome::lost : SlotOutcome::delivered};
}

/// One vehicle's uplink: a channel state that evolves in slot time.
class ChannelLink {
 public:
  ChannelLink(const ChannelDerived& derived, RandomStream rng) : d_(derived), rng_(std::move(rng)) {
    state_ = rng_.uniform() < d_.steady_state_poor() ? ChannelState::poor : ChannelState::ideal;
  }

  ChannelState state() const noexcept { return state_; }
  std::uint64_t slot() const noexcept { return slot_; }

  /// Advance to an absolute slot and transmit one frame there. Intermediate
  /// slots are skipped with the closed-form n-step transition law.
  SlotOutcome transmit_at(std::uint64_t slot) {
    if (slot > slot_ + 1) jump(slot - slot_ - 1);
    const auto [next, outcome] = step(state_, d_, rng_);
    state_ = next;
    slot_ = std::max(slot, slot_ + 1);
    return outcome;
  }

 private:
  void jump(std::uint64_t n) {
    const double leave = (1.0 - d_.persist_ideal) + (1.0 - d_.persist_poor);
    if (leave == 0.0) return;  // both states absorbing
    const double pi_poor = (1.0 - d_.persist_ideal) / leave;
    const double decay = std::pow(d_.persist_poor + d_.persist_ideal - 1.0, static_cast<double>(n));
    const double p_poor = state_ == ChannelState::poor ? pi_poor + (1.0 - pi_poor) * decay : pi_poor * (1.0 - decay);
    state_ = rng_.uniform() < p_poor ? ChannelState::poor : ChannelState::ideal;
  }

  ChannelDerived d_;
  RandomStream rng_;
  ChannelState state_ = ChannelState::ideal;
  std::uint64_t slot_ = 0;
};

/// Fraction of single-frame updates lost over consecutive slots, starting
/// from the stationary distribution.
inline double update_discard_monte_carlo(const ChannelDerived& d, std::uint64_t n_updates, RandomStream& rng) {
  require(n_updates >= 1, Errc::invalid_parameter, "n_updates must be >= 1");
  ChannelState state = rng.uniform() < d.steady_state_poor() ? ChannelState::poor : ChannelState::ideal;
  std::uint64_t lost = 0;
  for (std::uint64_t i = 0; i < n_updates; ++i) {
    const auto [next, outcome] = step(state, d, rng);
    state = next;
    lost += outcome == SlotOutcome::lost ? 1 : 0;
  }
  return static_cast<double>(lost) / static_cast<double>(n_updates);
}

}  // namespace bvib::channel
