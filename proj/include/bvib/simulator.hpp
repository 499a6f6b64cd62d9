#pragma once

// Deterministic orchestration of split VIB training over the modelled network.
//
// Per batch: every vehicle extracts (Poisson), encodes and contends with the
// other vehicles of its server; a contention round in which any two sends fall
// within tau_c is lost and everyone in it re-extracts. Collision-free sends
// cross the vehicle's two-state channel; a dropped upload is re-extracted.
// Servers then reparameterise, decode, evaluate the bounds and record them;
// alive followers report to the leader, which commits or aborts the batch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <limits>
#include <numeric>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "bvib/arrivals.hpp"
#include "bvib/channel.hpp"
#include "bvib/consensus.hpp"
#include "bvib/dataset.hpp"
#include "bvib/error.hpp"
#include "bvib/latency.hpp"
#include "bvib/rate_optimizer.hpp"
#include "bvib/rng.hpp"
#include "bvib/scenario.hpp"
#include "bvib/vib.hpp"

namespace bvib::sim {

// ---------------------------------------------------------------------------
// Event ordering

/// Simultaneous events are ordered by node id, then by insertion sequence.
struct Event {
  double time = 0.0;
  int node = 0;
  std::uint64_t seq = 0;

  friend bool operator>(const Event& a, const Event& b) {
    if (a.time != b.time) return a.time > b.time;
    if (a.node != b.node) return a.node > b.node;
    return a.seq > b.seq;
  }
};

class EventQueue {
 public:
  void push(double time, int node) { heap_.push(Event{time, node, seq_++}); }
  bool empty() const { return heap_.empty(); }
  Event pop() {
    Event e = heap_.top();
    heap_.pop();
    return e;
  }

 private:
  std::priority_queue<Event, std::vector<Event>, std::greater<>> heap_;
  std::uint64_t seq_ = 0;
};

// ---------------------------------------------------------------------------
// Network timing

struct BatchTiming {
  double delay = 0.0;                ///< mean upload arrival delay + T_si
  std::vector<double> arrivals;      ///< per vehicle, relative to batch start
  std::vector<int> arrival_order;    ///< vehicles in event order
  std::uint64_t collision_rounds = 0;
  std::uint64_t channel_drops = 0;
};

/// Vehicle v belongs to server v mod N.
inline int server_of(int vehicle, int servers) { return vehicle % servers; }

/// Upload timing for all N * M vehicles; one arrival stream and one channel per vehicle.
class NetworkTimeline {
 public:
  NetworkTimeline(const latency::DelayParams& delay, const channel::ChannelDerived& ch, const RandomStream& root)
      : p_(delay) {
    const int vehicles = p_.servers * p_.vehicles_per_server;
    const RandomStream arrivals = root.split(StreamTag::arrivals);
    const RandomStream channels = root.split(StreamTag::channel);
    for (int v = 0; v < vehicles; ++v) {
      extract_rng_.push_back(arrivals.split(static_cast<std::uint64_t>(v)));
      links_.emplace_back(ch, channels.split(static_cast<std::uint64_t>(v)));
    }
    for (int s = 0; s < p_.servers; ++s) groups_.emplace_back();
    for (int v = 0; v < vehicles; ++v) groups_[static_cast<std::size_t>(server_of(v, p_.servers))].push_back(v);
  }

  int vehicles() const noexcept { return static_cast<int>(links_.size()); }

  BatchTiming run_batch(double start_time) {
    BatchTiming t;
    t.arrivals.assign(links_.size(), 0.0);
    std::vector<double> clock(links_.size(), 0.0);
    std::vector<double> extraction;
    for (const auto& group : groups_) {
      std::vector<int> pending = group;
      while (!pending.empty()) {
        extraction.resize(pending.size());
        for (std::size_t k = 0; k < pending.size(); ++k)
          extraction[k] = arrivals::sample_interarrival(p_.lambda, extract_rng_[static_cast<std::size_t>(pending[k])]);
        for (std::size_t k = 0; k < pending.size(); ++k)
          clock[static_cast<std::size_t>(pending[k])] += extraction[k] + p_.encode_delay;
        if (collides(extraction)) {
          ++t.collision_rounds;
          continue;
        }
        std::vector<int> lost;
        for (int v : pending) {
          const double at = start_time + clock[static_cast<std::size_t>(v)];
          const auto slot = static_cast<std::uint64_t>(at / p_.slot_interval);
          if (links_[static_cast<std::size_t>(v)].transmit_at(slot) == channel::SlotOutcome::lost) {
            ++t.channel_drops;
            lost.push_back(v);
          }
        }
        pending = std::move(lost);
      }
    }
    EventQueue queue;
    for (std::size_t v = 0; v < links_.size(); ++v) {
      t.arrivals[v] = clock[v];
      queue.push(clock[v], static_cast<int>(v));
    }
    while (!queue.empty()) t.arrival_order.push_back(queue.pop().node);
    const double mean = std::accumulate(t.arrivals.begin(), t.arrivals.end(), 0.0) / static_cast<double>(t.arrivals.size());
    t.delay = mean + p_.consensus_delay();
    return t;
  }

 private:
  /// Any two sends closer than tau_c. Encoding is a constant shift, so the
  /// extraction offsets decide.
  bool collides(std::vector<double> offsets) const {
    if (offsets.size() < 2) return false;
    std::sort(offsets.begin(), offsets.end());
    for (std::size_t k = 1; k < offsets.size(); ++k)
      if (offsets[k] - offsets[k - 1] < p_.collision_spacing) return true;
    return false;
  }

  latency::DelayParams p_;
  std::vector<RandomStream> extract_rng_;
  std::vector<channel::ChannelLink> links_;
  std::vector<std::vector<int>> groups_;
};

// ---------------------------------------------------------------------------
// Metrics

struct EpochMetrics {
  int epoch = 0;
  double i_zx_max = std::numeric_limits<double>::quiet_NaN();
  double i_zy_min = std::numeric_limits<double>::quiet_NaN();
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t committed_blocks = 0;
  std::uint64_t aborted_batches = 0;
  std::uint64_t skipped_batches = 0;
  std::uint64_t collision_rounds = 0;
  std::uint64_t channel_drops = 0;
  std::uint64_t elections = 0;
  double mean_batch_delay = 0.0;
  double sim_time = 0.0;  ///< simulated clock at the end of the epoch
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::vector<double> batch_delays;
  std::uint64_t collision_rounds = 0;
  std::uint64_t channel_drops = 0;
  std::uint64_t aborted_batches = 0;
  std::uint64_t skipped_batches = 0;
  std::uint64_t elections = 0;
  std::uint64_t leader_hits = 0;
  std::uint64_t committed_blocks = 0;
  double election_time = 0.0;
  double total_time = 0.0;
};

// ---------------------------------------------------------------------------
// Run context shared by training, testing and delay measurement

namespace detail {

class Network {
 public:
  Network(const ScenarioConfig& config, const RandomStream& root)
      : delay_(config.resolved_delay()),
        timeline_(delay_, channel::derive(config.channel), root),
        cluster_(consensus::ClusterConfig{delay_.servers, delay_.attack_strength, delay_.term_length,
                                          latency::election_time(delay_), config.resolved_control_interval()},
                 root) {}

  void start(RunMetrics& m) { account(cluster_.start(now_), m); }

  /// Upload timing for one batch. Channel slots advance with upload time
  /// only; election pauses do not move the fading process.
  BatchTiming upload(RunMetrics& m) {
    BatchTiming t = timeline_.run_batch(upload_clock_);
    upload_clock_ += t.delay;
    now_ += t.delay;
    m.batch_delays.push_back(t.delay);
    m.collision_rounds += t.collision_rounds;
    m.channel_drops += t.channel_drops;
    return t;
  }

  void tick(double dt, RunMetrics& m) { account(cluster_.tick(dt), m); }

  consensus::Cluster& cluster() noexcept { return cluster_; }
  const latency::DelayParams& delay() const noexcept { return delay_; }
  double now() const noexcept { return now_; }

 private:
  void account(const consensus::TickEvents& ev, RunMetrics& m) {
    now_ += ev.election_time;
    m.election_time += ev.election_time;
    m.elections += static_cast<std::uint64_t>(ev.elections);
    m.leader_hits += static_cast<std::uint64_t>(ev.leader_losses);
  }

  latency::DelayParams delay_;
  NetworkTimeline timeline_;
  consensus::Cluster cluster_;
  double now_ = 0.0;
  double upload_clock_ = 0.0;
};

/// Column ranges of an n-sample set cut into `batches` near-equal parts.
inline std::pair<std::size_t, std::size_t> batch_range(std::size_t n, std::size_t batches, std::size_t b) {
  return {b * n / batches, (b + 1) * n / batches};
}

inline std::vector<std::size_t> permutation(std::size_t n, RandomStream rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// Which samples of a batch each server handles: position j goes to vehicle
/// j mod (N M), hence to server (j mod (N M)) mod N.
inline std::vector<std::vector<std::size_t>> shard_by_server(std::size_t batch_size, int servers, int vehicles) {
  std::vector<std::vector<std::size_t>> shards(static_cast<std::size_t>(servers));
  for (std::size_t j = 0; j < batch_size; ++j)
    shards[static_cast<std::size_t>(server_of(static_cast<int>(j % static_cast<std::size_t>(vehicles)), servers))].push_back(j);
  return shards;
}

inline double mean_over(const vib::Vector& v, std::span<const std::size_t> idx) {
  if (idx.empty()) return 0.0;
  double s = 0.0;
  for (auto i : idx) s += v(static_cast<Eigen::Index>(i));
  return s / static_cast<double>(idx.size());
}

/// Follower reports from every alive non-leader.
inline std::vector<consensus::FollowerMessage> follower_reports(const consensus::Cluster& cluster) {
  std::vector<consensus::FollowerMessage> out;
  for (const auto& n : cluster.nodes()) {
    if (!n.alive || n.role == consensus::Role::leader) continue;
    const auto pending = n.pending();
    out.push_back({n.id, {pending.begin(), pending.end()}});
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training

struct TrainingResult {
  RunMetrics metrics;
  consensus::Chain chain;
  vib::SplitModel model;
};

inline TrainingResult run_training(const ScenarioConfig& config, const data::Dataset& train) {
  config.validate();
  if (train.dim() != config.dataset.dim) fail(Errc::invalid_shape, "dataset dimension differs from the model input");
  if (train.size() < static_cast<std::size_t>(config.batches)) fail(Errc::config_error, "fewer samples than batches");
  const RandomStream root(config.seed);
  RandomStream init_rng = root.split(StreamTag::init);
  TrainingResult out;
  out.model = {vib::DenseNet::glorot(config.encoder_widths(), init_rng), vib::DenseNet::glorot(config.decoder_widths(), init_rng)};
  vib::AdamState enc_adam(out.model.encoder.parameter_count(), {config.learning_rate});
  vib::AdamState dec_adam(out.model.decoder.parameter_count(), {config.learning_rate});

  detail::Network net(config, root);
  RunMetrics& m = out.metrics;
  net.start(m);
  const int servers = net.delay().servers;
  const int vehicles = servers * net.delay().vehicles_per_server;
  const auto batches = static_cast<std::size_t>(config.batches);

  for (int e = 0; e < config.epochs; ++e) {
    EpochMetrics em;
    em.epoch = e + 1;
    const RunMetrics before = m;
    const auto order = detail::permutation(train.size(), root.split(StreamTag::shuffle).split(static_cast<std::uint64_t>(e)));
    std::vector<vib::BatchBounds> bounds;
    std::vector<double> epoch_delays;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto [lo, hi] = detail::batch_range(train.size(), batches, b);
      const auto shards = detail::shard_by_server(hi - lo, servers, vehicles);
      for (int attempt = 0; attempt < 2; ++attempt) {
        const BatchTiming timing = net.upload(m);
        epoch_delays.push_back(timing.delay);
        auto& cluster = net.cluster();

        // Samples reach only servers that can still compute.
        std::vector<std::size_t> cols;
        std::vector<std::pair<int, std::vector<std::size_t>>> served;  // server, positions in cols
        for (int s = 0; s < servers; ++s) {
          if (!cluster.nodes()[static_cast<std::size_t>(s)].alive) continue;
          std::vector<std::size_t> pos;
          for (auto j : shards[static_cast<std::size_t>(s)]) {
            pos.push_back(cols.size());
            cols.push_back(order[lo + j]);
          }
          served.emplace_back(s, std::move(pos));
        }
        vib::Matrix x(train.features.rows(), static_cast<Eigen::Index>(cols.size()));
        std::vector<std::uint8_t> y(cols.size());
        for (std::size_t k = 0; k < cols.size(); ++k) {
          x.col(static_cast<Eigen::Index>(k)) = train.features.col(static_cast<Eigen::Index>(cols[k]));
          y[k] = train.labels[cols[k]];
        }

        std::optional<vib::SplitStep> step;
        if (!cols.empty()) {
          RandomStream eps_rng = root.split(StreamTag::reparameterize)
                                     .split({static_cast<std::uint64_t>(e), b, static_cast<std::uint64_t>(attempt)});
          const vib::Matrix eps = vib::standard_normal(static_cast<Eigen::Index>(out.model.latent()), x.cols(), eps_rng);
          step = vib::split_forward(out.model, x, y, eps, config.beta, config.reparam);
        }
        for (const auto& [s, pos] : served) {
          consensus::LedgerEntry entry;
          entry.epoch = static_cast<std::uint64_t>(e);
          entry.batch = b;
          entry.samples = pos.size();
          if (step) {
            entry.i_zx_max = detail::mean_over(step->server.kl, pos);
            entry.i_zy_min = detail::mean_over(step->server.log_lik, pos);
          }
          consensus::record_entry(cluster.nodes()[static_cast<std::size_t>(s)], entry);
        }
        const auto reports = detail::follower_reports(cluster);
        const auto result = consensus::collect_and_commit(cluster.nodes(), cluster.leader_index(), reports,
                                                          cluster.chain(), net.now());
        if (result.committed) {
          ++m.committed_blocks;
          if (step) {
            const auto grads = vib::split_backward(out.model, *step);
            vib::adam_step(out.model.decoder, grads.decoder, dec_adam);
            vib::adam_step(out.model.encoder, grads.encoder, enc_adam);
            bounds.push_back({step->server.loss.i_zx_max, step->server.loss.i_zy_min});
          }
        } else {
          consensus::discard_pending(cluster.nodes());
          ++m.aborted_batches;
        }
        net.tick(timing.delay, m);
        if (result.committed) break;
        if (attempt == 1) ++m.skipped_batches;
      }
    }
    if (!bounds.empty()) {
      const auto mean = vib::epoch_mutual_info(bounds);
      em.i_zx_max = mean.i_zx_max;
      em.i_zy_min = mean.i_zy_min;
    }
    em.committed_blocks = m.committed_blocks - before.committed_blocks;
    em.aborted_batches = m.aborted_batches - before.aborted_batches;
    em.skipped_batches = m.skipped_batches - before.skipped_batches;
    em.collision_rounds = m.collision_rounds - before.collision_rounds;
    em.channel_drops = m.channel_drops - before.channel_drops;
    em.elections = m.elections - before.elections;
    em.mean_batch_delay = std::accumulate(epoch_delays.begin(), epoch_delays.end(), 0.0) / static_cast<double>(epoch_delays.size());
    em.sim_time = net.now();
    m.epochs.push_back(em);
  }
  m.total_time = net.now();
  out.chain = net.cluster().chain();
  if (consensus::verify_chain(out.chain)) fail(Errc::invalid_state, "training produced an inconsistent chain");
  return out;
}

// ---------------------------------------------------------------------------
// Testing

struct TestResult {
  double accuracy = 0.0;               ///< mean over test epochs, percent
  std::vector<double> epoch_accuracy;
  RunMetrics metrics;
  consensus::Chain chain;
};

/// Forward-only pass: each server decodes the posterior means of its shard
/// and records a digest of its predicted labels. Parameters are untouched.
inline TestResult run_test(const ScenarioConfig& config, const vib::SplitModel& model, const data::Dataset& test) {
  config.validate();
  model.validate();
  if (model.encoder.input_width() != test.dim()) fail(Errc::invalid_shape, "model input width differs from the data");
  if (model.classes() != test.classes) fail(Errc::invalid_shape, "model class count differs from the data");
  require(test.size() >= 1, Errc::invalid_parameter, "empty test set");
  const RandomStream root = RandomStream(config.seed).split(0x7e57);
  detail::Network net(config, root);
  TestResult out;
  RunMetrics& m = out.metrics;
  net.start(m);
  const int servers = net.delay().servers;
  const int vehicles = servers * net.delay().vehicles_per_server;
  const std::size_t batches = std::min<std::size_t>(static_cast<std::size_t>(config.batches), test.size());

  for (int e = 0; e < config.test_epochs; ++e) {
    EpochMetrics em;
    em.epoch = e + 1;
    const RunMetrics before = m;
    std::vector<std::uint8_t> predicted;
    std::vector<std::uint8_t> truth;
    std::vector<double> delays;
    for (std::size_t b = 0; b < batches; ++b) {
      const auto [lo, hi] = detail::batch_range(test.size(), batches, b);
      const auto shards = detail::shard_by_server(hi - lo, servers, vehicles);
      const BatchTiming timing = net.upload(m);
      delays.push_back(timing.delay);
      auto& cluster = net.cluster();
      for (int s = 0; s < servers; ++s) {
        auto& node = cluster.nodes()[static_cast<std::size_t>(s)];
        if (!node.alive) continue;
        const auto& shard = shards[static_cast<std::size_t>(s)];
        consensus::LedgerEntry entry;
        entry.kind = consensus::EntryKind::test;
        entry.epoch = static_cast<std::uint64_t>(e);
        entry.batch = b;
        entry.samples = shard.size();
        if (!shard.empty()) {
          vib::Matrix x(test.features.rows(), static_cast<Eigen::Index>(shard.size()));
          for (std::size_t k = 0; k < shard.size(); ++k)
            x.col(static_cast<Eigen::Index>(k)) = test.features.col(static_cast<Eigen::Index>(lo + shard[k]));
          const auto enc = vib::encode(x, model.encoder);
          const auto labels = vib::predict(vib::decode(enc.mu, model.decoder));
          entry.predictions = sha256(labels);
          for (std::size_t k = 0; k < shard.size(); ++k) {
            predicted.push_back(labels[k]);
            truth.push_back(test.labels[lo + shard[k]]);
          }
        }
        consensus::record_entry(node, entry);
      }
      const auto reports = detail::follower_reports(cluster);
      const auto result =
          consensus::collect_and_commit(cluster.nodes(), cluster.leader_index(), reports, cluster.chain(), net.now());
      if (result.committed) {
        ++m.committed_blocks;
      } else {
        consensus::discard_pending(cluster.nodes());
        ++m.aborted_batches;
      }
      net.tick(timing.delay, m);
    }
    em.accuracy = truth.empty() ? 0.0 : vib::accuracy(predicted, truth);
    out.epoch_accuracy.push_back(em.accuracy);
    em.committed_blocks = m.committed_blocks - before.committed_blocks;
    em.aborted_batches = m.aborted_batches - before.aborted_batches;
    em.collision_rounds = m.collision_rounds - before.collision_rounds;
    em.channel_drops = m.channel_drops - before.channel_drops;
    em.elections = m.elections - before.elections;
    em.mean_batch_delay = std::accumulate(delays.begin(), delays.end(), 0.0) / static_cast<double>(delays.size());
    em.sim_time = net.now();
    m.epochs.push_back(em);
  }
  out.accuracy = std::accumulate(out.epoch_accuracy.begin(), out.epoch_accuracy.end(), 0.0) /
                 static_cast<double>(out.epoch_accuracy.size());
  m.total_time = net.now();
  out.chain = net.cluster().chain();
  return out;
}

// ---------------------------------------------------------------------------
// Delay measurement

struct DelayMeasurement {
  double mean = 0.0;            ///< (sum of batch delays + election time) / batches
  double batch_stderr = 0.0;    ///< standard error of the batch-delay mean
  RunMetrics metrics;
};

/// Network-only run: uploads, consensus and elections without training.
inline DelayMeasurement measure_delay(const ScenarioConfig& config, std::uint64_t n_batches) {
  require(n_batches >= 1, Errc::invalid_parameter, "n_batches must be >= 1");
  config.validate();
  const RandomStream root(config.seed);
  detail::Network net(config, root);
  DelayMeasurement out;
  RunMetrics& m = out.metrics;
  net.start(m);
  for (std::uint64_t b = 0; b < n_batches; ++b) {
    const BatchTiming t = net.upload(m);
    net.tick(t.delay, m);
  }
  m.total_time = net.now();
  const double n = static_cast<double>(n_batches);
  out.mean = m.total_time / n;
  const double mean_batch = std::accumulate(m.batch_delays.begin(), m.batch_delays.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : m.batch_delays) ss += (d - mean_batch) * (d - mean_batch);
  out.batch_stderr = n > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { lambda, attack, topology };

struct SweepPoint {
  double lambda = 0.0;
  int attack = 0;
  int vehicles = 0;
  int servers = 0;
};

struct SweepRow {
  std::string axis;
  std::string series;
  SweepPoint point;
  double analytic_delay = 0.0;
  std::optional<double> simulated_delay;
  std::optional<double> optimal_lambda;
};

/// One row per grid point, in grid order. Simulated points run share-nothing
/// in parallel, each seeded from the template.
inline std::vector<SweepRow> sweep(const ScenarioConfig& tmpl, SweepAxis axis, std::span<const SweepPoint> grid,
                                   std::uint64_t simulate_batches = 0) {
  require(!grid.empty(), Errc::invalid_parameter, "empty sweep grid");
  auto evaluate = [&](const SweepPoint& pt) {
    ScenarioConfig c = tmpl;
    SweepRow row;
    switch (axis) {
      case SweepAxis::lambda:
        row.axis = "lambda";
        c.lambda = pt.lambda;
        if (pt.vehicles > 0) c.delay.vehicles_per_server = pt.vehicles;
        row.series = "M=" + std::to_string(c.delay.vehicles_per_server);
        break;
      case SweepAxis::attack:
        row.axis = "a";
        c.delay.attack_strength = pt.attack;
        row.series = "N=" + std::to_string(c.delay.servers);
        break;
      case SweepAxis::topology:
        row.axis = "mn";
        c.delay.vehicles_per_server = pt.vehicles;
        c.delay.servers = pt.servers;
        row.series = "N=" + std::to_string(pt.servers);
        break;
    }
    if (axis != SweepAxis::lambda && !c.lambda) c.lambda = tmpl.resolved_lambda();
    const auto p = c.resolved_delay();
    row.point = {p.lambda, p.attack_strength, p.vehicles_per_server, p.servers};
    row.analytic_delay = latency::expected_total_delay(p);
    if (p.vehicles_per_server >= 2)
      row.optimal_lambda = rate_optimizer::optimal_lambda(p.vehicles_per_server, p.collision_spacing, p.encode_delay);
    if (simulate_batches > 0) row.simulated_delay = measure_delay(c, simulate_batches).mean;
    return row;
  };
  std::vector<SweepRow> rows(grid.size());
  if (simulate_batches == 0) {
    for (std::size_t i = 0; i < grid.size(); ++i) rows[i] = evaluate(grid[i]);
    return rows;
  }
  const std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  for (std::size_t start = 0; start < grid.size(); start += workers) {
    std::vector<std::future<SweepRow>> jobs;
    for (std::size_t i = start; i < std::min(grid.size(), start + workers); ++i)
      jobs.push_back(std::async(std::launch::async, evaluate, std::cref(grid[i])));
    for (std::size_t i = 0; i < jobs.size(); ++i) rows[start + i] = jobs[i].get();
  }
  return rows;
}

}  // namespace bvib::sim
