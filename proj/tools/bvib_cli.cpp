// bvib command-line front end.

#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bvib/config.hpp"
#include "bvib/harness.hpp"
#include "bvib/latency.hpp"
#include "bvib/rate_optimizer.hpp"
#include "bvib/simulator.hpp"

using namespace bvib;

namespace {

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

ScenarioConfig load_config(const Common& o) {
  ScenarioConfig c = o.config.empty() ? config::parse("") : config::load(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.epochs) c.epochs = *o.epochs;
  c.validate();
  return c;
}

void print_totals(const sim::RunMetrics& m) {
  std::printf("batches %zu, committed blocks %llu, aborted %llu, skipped %llu\n", m.batch_delays.size(),
              static_cast<unsigned long long>(m.committed_blocks), static_cast<unsigned long long>(m.aborted_batches),
              static_cast<unsigned long long>(m.skipped_batches));
  std::printf("collision rounds %llu, channel drops %llu, elections %llu, leader hits %llu\n",
              static_cast<unsigned long long>(m.collision_rounds), static_cast<unsigned long long>(m.channel_drops),
              static_cast<unsigned long long>(m.elections), static_cast<unsigned long long>(m.leader_hits));
  std::printf("simulated time %.6g s\n", m.total_time);
}

int cmd_train(const Common& o) {
  const auto c = load_config(o);
  const auto data = harness::load_data(c);
  const auto r = sim::run_training(c, data.train);
  const auto dir = harness::output_dir(o.out);
  harness::atomic_write(dir / "metrics.csv", harness::metrics_csv(r.metrics));
  harness::atomic_write(dir / "chain.txt", consensus::export_chain(r.chain));
  harness::atomic_write(dir / "model.ckpt", vib::serialize(r.model));
  const auto summary = harness::summary_json(
      c, r.metrics, r.chain, {{"metrics", "metrics.csv"}, {"chain", "chain.txt"}, {"model", "model.ckpt"}});
  harness::atomic_write(dir / "summary.json", summary.dump(2) + "\n");

  const auto& first = r.metrics.epochs.front();
  const auto& last = r.metrics.epochs.back();
  std::printf("trained %d epochs x %d batches, lambda %.6g\n", c.epochs, c.batches, c.resolved_lambda());
  std::printf("I(Z,X)_max %.6g -> %.6g, I(Z,Y)_min %.6g -> %.6g\n", first.i_zx_max, last.i_zx_max, first.i_zy_min,
              last.i_zy_min);
  print_totals(r.metrics);
  std::printf("chain %zu blocks, digest %s\n", r.chain.size(), to_hex(harness::chain_digest(r.chain)).c_str());
  std::printf("wrote %s\n", dir.string().c_str());
  return 0;
}

int cmd_test(const Common& o, const std::string& model_path) {
  const auto c = load_config(o);
  const auto bytes = data::read_file(model_path);
  const auto model = vib::deserialize(bytes);
  const auto data = harness::load_data(c);
  const auto t = sim::run_test(c, model, data.test);
  const auto dir = harness::output_dir(o.out);
  harness::atomic_write(dir / "test_metrics.csv", harness::metrics_csv(t.metrics));
  harness::atomic_write(dir / "test_chain.txt", consensus::export_chain(t.chain));
  auto summary = harness::summary_json(c, t.metrics, t.chain, {{"metrics", "test_metrics.csv"}, {"chain", "test_chain.txt"}});
  summary["accuracy"] = t.accuracy;
  summary["model_digest"] = to_hex(vib::checkpoint_digest(model));
  harness::atomic_write(dir / "test_summary.json", summary.dump(2) + "\n");
  std::printf("test accuracy %.4g%% over %d epoch(s), %zu samples\n", t.accuracy, c.test_epochs, data.test.size());
  print_totals(t.metrics);
  std::printf("wrote %s\n", dir.string().c_str());
  return 0;
}

struct LatencyFlags {
  std::optional<double> lambda;
  std::optional<int> vehicles, servers, attack;
};

int cmd_latency(const Common& o, const LatencyFlags& f) {
  auto c = load_config(o);
  if (f.lambda) c.lambda = *f.lambda;
  if (f.vehicles) c.delay.vehicles_per_server = *f.vehicles;
  if (f.servers) c.delay.servers = *f.servers;
  if (f.attack) c.delay.attack_strength = *f.attack;
  c.validate();
  const auto p = c.resolved_delay();
  const double t_ex = latency::expected_extraction_delay(p.lambda);
  const double p_c = latency::collision_probability(p.lambda, p.vehicles_per_server, p.collision_spacing);
  const double t_m = latency::send_delay(t_ex, p.encode_delay, p_c);
  const double t_n = latency::arrival_delay(t_m, p.drop_prob);
  const double t_si = p.decode_delay + p.follower_upload_delay + p.block_broadcast_delay;
  const double total = latency::expected_total_delay(p);

  nlohmann::ordered_json j;
  j["lambda"] = p.lambda;
  j["vehicles_per_server"] = p.vehicles_per_server;
  j["servers"] = p.servers;
  j["attack_strength"] = p.attack_strength;
  j["extraction_delay"] = t_ex;
  j["collision_probability"] = p_c;
  j["send_delay"] = t_m;
  j["drop_probability"] = p.drop_prob;
  j["arrival_delay"] = t_n;
  j["server_delay"] = t_si;
  j["election_time"] = latency::election_time(p);
  j["election_factor"] = latency::election_factor(p);
  j["expected_total_delay"] = total;
  for (const auto& [k, v] : j.items()) std::cout << k << " " << harness::format_number(v.get<double>()) << "\n";
  if (!o.out.empty()) harness::atomic_write(harness::output_dir(o.out) / "latency.json", j.dump(2) + "\n");
  return 0;
}

struct OptimizeFlags {
  std::optional<int> vehicles;
  std::optional<double> spacing, encode, coefficient;
};

int cmd_optimize(const Common& o, const OptimizeFlags& f) {
  auto c = load_config(o);
  auto p = c.resolved_delay();
  if (f.vehicles) p.vehicles_per_server = *f.vehicles;
  if (f.spacing) p.collision_spacing = *f.spacing;
  if (f.encode) p.encode_delay = *f.encode;
  double b = rate_optimizer::collision_coefficient(p.vehicles_per_server, p.collision_spacing);
  double star = 0.0;
  if (f.coefficient) {
    b = *f.coefficient;
    star = rate_optimizer::optimal_lambda(b, p.encode_delay);
  } else {
    star = rate_optimizer::optimal_lambda(p.vehicles_per_server, p.collision_spacing, p.encode_delay);
  }
  rate_optimizer::Coefficients coeffs = rate_optimizer::coefficients(p);
  coeffs.collision = b;
  const double slope = rate_optimizer::delay_derivative(star, coeffs, p.encode_delay, p.drop_prob);
  std::printf("B %s\n", harness::format_number(b).c_str());
  std::printf("T_ec %s\n", harness::format_number(p.encode_delay).c_str());
  std::printf("lambda* %.6f\n", star);
  std::printf("derivative_at_optimum %.3e\n", slope);
  std::printf("stationary %s\n", std::fabs(slope) < 1e-10 ? "yes" : "no");
  return 0;
}

std::vector<sim::SweepRow> run_preset(const ScenarioConfig& c, const std::string& preset, std::uint64_t simulate) {
  std::vector<sim::SweepRow> rows;
  auto append = [&](std::vector<sim::SweepRow> part) { rows.insert(rows.end(), part.begin(), part.end()); };
  if (preset == "fig6") {
    // lambda sweep for M = 2, 3, 4 around the M = 2 optimum
    const double hi = 4.0 * rate_optimizer::optimal_lambda(2, c.delay.collision_spacing, c.delay.encode_delay);
    for (int m : {2, 3, 4}) {
      std::vector<sim::SweepPoint> grid;
      for (int i = 1; i <= 40; ++i) grid.push_back({hi * i / 40.0, 0, m, 0});
      append(sim::sweep(c, sim::SweepAxis::lambda, grid, simulate));
    }
  } else if (preset == "fig9") {
    for (int n : {6, 10, 14}) {
      auto t = c;
      t.delay.servers = n;
      std::vector<sim::SweepPoint> grid;
      for (int a = 0; 2 * a < n; ++a) grid.push_back({0, a, 0, 0});
      append(sim::sweep(t, sim::SweepAxis::attack, grid, simulate));
    }
  } else if (preset == "fig10") {
    for (int n : {5, 10, 15}) {
      std::vector<sim::SweepPoint> grid;
      for (int m = 2; m <= 8; ++m) grid.push_back({0, 0, m, n});
      append(sim::sweep(c, sim::SweepAxis::topology, grid, simulate));
    }
  } else {
    fail(Errc::config_error, "unknown preset " + preset);
  }
  return rows;
}

int cmd_sweep(const Common& o, std::string preset, const std::string& axis, std::uint64_t simulate) {
  const auto c = load_config(o);
  if (!axis.empty()) preset = axis == "lambda" ? "fig6" : axis == "a" ? "fig9" : "fig10";
  const auto rows = run_preset(c, preset, simulate);
  const std::string csv = harness::sweep_csv(rows);
  std::cout << csv;
  if (!o.out.empty() || std::getenv("BVIB_OUT_DIR")) {
    const auto path = harness::output_dir(o.out) / ("sweep_" + preset + ".csv");
    harness::atomic_write(path, csv);
    std::fprintf(stderr, "wrote %s\n", path.string().c_str());
  }
  return 0;
}

int cmd_verify(const std::string& path) {
  const auto bytes = data::read_file(path);
  consensus::Chain chain;
  try {
    chain = consensus::import_chain(std::string(bytes.begin(), bytes.end()));
  } catch (const Error& e) {
    std::printf("invalid: unreadable chain (%s)\n", e.what());
    return harness::exit_chain_invalid;
  }
  if (chain.empty()) {
    std::printf("invalid: empty chain\n");
    return harness::exit_chain_invalid;
  }
  if (const auto bad = consensus::verify_chain(chain)) {
    std::printf("invalid: first bad block at height %llu\n", static_cast<unsigned long long>(*bad));
    return harness::exit_chain_invalid;
  }
  std::printf("valid: %zu blocks, head %s, digest %s\n", chain.size(), to_hex(chain.back().hash).c_str(),
              to_hex(harness::chain_digest(chain)).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split-VIB training over a lossy vehicular network with Raft-lite consensus"};
  app.require_subcommand(1);

  auto add_common = [](CLI::App* sub, Common& o) {
    sub->add_option("-c,--config", o.config, "JSON scenario file (defaults when omitted)");
    sub->add_option("-o,--out", o.out, "output directory (default $BVIB_OUT_DIR, else .)");
    sub->add_option("--seed", o.seed, "override training.seed");
    sub->add_option("--epochs", o.epochs, "override training.epochs")->check(CLI::PositiveNumber);
  };

  Common train_o, test_o, lat_o, opt_o, sweep_o;
  auto* train = app.add_subcommand("train", "run split training and write metrics, chain and checkpoint");
  add_common(train, train_o);

  std::string model_path = "model.ckpt";
  auto* test = app.add_subcommand("test", "evaluate a checkpoint without updating it");
  add_common(test, test_o);
  test->add_option("-m,--model", model_path, "checkpoint written by train");

  LatencyFlags lat_f;
  auto* lat = app.add_subcommand("latency", "closed-form expected delay and its components");
  add_common(lat, lat_o);
  lat->add_option("--lambda", lat_f.lambda, "extraction rate");
  lat->add_option("--M", lat_f.vehicles, "vehicles per server");
  lat->add_option("--N", lat_f.servers, "servers");
  lat->add_option("--a", lat_f.attack, "attack strength");

  OptimizeFlags opt_f;
  auto* opt = app.add_subcommand("optimize-lambda", "delay-minimising extraction rate");
  add_common(opt, opt_o);
  opt->add_option("--M", opt_f.vehicles, "vehicles per server");
  opt->add_option("--tau-c", opt_f.spacing, "collision spacing, s");
  opt->add_option("--t-ec", opt_f.encode, "encoding delay, s");
  opt->add_option("--B", opt_f.coefficient, "collision coefficient, overrides --M and --tau-c");

  std::string preset = "fig9", axis;
  std::uint64_t simulate = 0;
  auto* sw = app.add_subcommand("sweep", "delay tables for the lambda, attack and topology presets");
  add_common(sw, sweep_o);
  sw->add_option("--preset", preset, "fig6 (lambda), fig9 (attack) or fig10 (M,N)")
      ->check(CLI::IsMember({"fig6", "fig9", "fig10"}));
  sw->add_option("--axis", axis, "lambda, a or mn; shorthand for the matching preset")
      ->check(CLI::IsMember({"lambda", "a", "mn"}));
  sw->add_option("--simulate", simulate, "also simulate each point for this many batches");

  std::string chain_path;
  auto* verify = app.add_subcommand("verify-chain", "audit an exported chain");
  verify->add_option("chain", chain_path, "chain.txt written by train or test")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : harness::exit_usage;
  }

  try {
    if (*train) return cmd_train(train_o);
    if (*test) return cmd_test(test_o, model_path);
    if (*lat) return cmd_latency(lat_o, lat_f);
    if (*opt) return cmd_optimize(opt_o, opt_f);
    if (*sw) return cmd_sweep(sweep_o, preset, axis, simulate);
    if (*verify) return cmd_verify(chain_path);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return harness::exit_code(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return harness::exit_other;
  }
  return harness::exit_usage;
}
