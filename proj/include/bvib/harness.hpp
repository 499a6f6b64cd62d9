#pragma once

// Dataset selection, result emission and exit-status mapping for the CLI.
//
// metrics CSV: header line, then one row per epoch. Numbers use the shortest
// round-trip decimal form; undefined values (accuracy in training, bounds in
// testing) are empty fields. Lines end in "\n".

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <system_error>
#include <unistd.h>

#include <json.hpp>

#include "bvib/config.hpp"
#include "bvib/consensus.hpp"
#include "bvib/dataset.hpp"
#include "bvib/digest.hpp"
#include "bvib/error.hpp"
#include "bvib/scenario.hpp"
#include "bvib/simulator.hpp"

namespace bvib::harness {

enum ExitCode : int {
  exit_ok = 0,
  exit_other = 1,
  exit_usage = 2,
  exit_config = 3,
  exit_dataset = 4,
  exit_format = 5,
  exit_shape = 6,
  exit_divergent = 7,
  exit_chain_invalid = 8,
};

inline int exit_code(Errc e) {
  switch (e) {
    case Errc::config_error:
    case Errc::invalid_parameter:
    case Errc::invalid_intensity:
    case Errc::invalid_attack_strength:
    case Errc::inconsistent_parameters:
    case Errc::singular_channel:
    case Errc::degenerate_chain:
    case Errc::degenerate_process:
    case Errc::no_interior_optimum:
      return exit_config;
    case Errc::dataset_error:
      return exit_dataset;
    case Errc::format_error:
      return exit_format;
    case Errc::invalid_shape:
      return exit_shape;
    case Errc::divergent_delay:
      return exit_divergent;
    default:
      return exit_other;
  }
}

// ---------------------------------------------------------------------------
// Datasets

struct DataSplit {
  data::Dataset train;
  data::Dataset test;
};

/// Synthetic: ceil((train+test)/classes) samples per class, shuffled, the
/// first train_size for training and the next test_size for testing.
/// MNIST: the four IDX paths, truncated to the configured sizes.
inline DataSplit load_data(const ScenarioConfig& c) {
  if (c.dataset.kind == DatasetKind::mnist) {
    for (const auto* p : {&c.dataset.train_images, &c.dataset.train_labels, &c.dataset.test_images, &c.dataset.test_labels})
      if (p->empty()) fail(Errc::dataset_error, "MNIST selector needs all four IDX paths");
    DataSplit s{data::load_idx(c.dataset.train_images, c.dataset.train_labels, c.dataset.train_size),
                data::load_idx(c.dataset.test_images, c.dataset.test_labels, c.dataset.test_size)};
    for (const auto* d : {&s.train, &s.test}) {
      if (d->dim() != c.dataset.dim) fail(Errc::dataset_error, "IDX image size differs from dataset.dim");
    }
    s.train.classes = s.test.classes = c.dataset.classes;
    return s;
  }
  const std::size_t total = c.dataset.train_size + c.dataset.test_size;
  const std::size_t per_class = (total + c.dataset.classes - 1) / c.dataset.classes;
  const auto all = data::synth_dataset(c.dataset.classes, per_class, c.dataset.dim, c.dataset.spread, c.seed);
  auto [train, rest] = data::shuffle_split(all, c.dataset.train_size, c.seed);
  rest.features.conservativeResize(Eigen::NoChange, static_cast<Eigen::Index>(c.dataset.test_size));
  rest.labels.resize(c.dataset.test_size);
  return {std::move(train), std::move(rest)};
}

// ---------------------------------------------------------------------------
// Formatting

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline std::string format_number(std::uint64_t v) { return std::to_string(v); }

inline std::string metrics_csv(const sim::RunMetrics& m) {
  std::string out =
      "epoch,i_zx_max,i_zy_min,accuracy,committed_blocks,aborted_batches,skipped_batches,collision_rounds,"
      "channel_drops,elections,mean_batch_delay,sim_time\n";
  for (const auto& e : m.epochs) {
    out += std::to_string(e.epoch) + ',' + format_number(e.i_zx_max) + ',' + format_number(e.i_zy_min) + ',' +
           format_number(e.accuracy) + ',' + format_number(e.committed_blocks) + ',' + format_number(e.aborted_batches) +
           ',' + format_number(e.skipped_batches) + ',' + format_number(e.collision_rounds) + ',' +
           format_number(e.channel_drops) + ',' + format_number(e.elections) + ',' + format_number(e.mean_batch_delay) +
           ',' + format_number(e.sim_time) + '\n';
  }
  return out;
}

inline std::string sweep_csv(std::span<const sim::SweepRow> rows) {
  std::string out = "axis,series,lambda,a,M,N,analytic_delay,simulated_delay,optimal_lambda\n";
  for (const auto& r : rows) {
    out += r.axis + ',' + r.series + ',' + format_number(r.point.lambda) + ',' + std::to_string(r.point.attack) + ',' +
           std::to_string(r.point.vehicles) + ',' + std::to_string(r.point.servers) + ',' +
           format_number(r.analytic_delay) + ',' + (r.simulated_delay ? format_number(*r.simulated_delay) : "") + ',' +
           (r.optimal_lambda ? format_number(*r.optimal_lambda) : "") + '\n';
  }
  return out;
}

/// Digest of the exported chain text, i.e. of the exact bytes in chain.txt.
inline Digest chain_digest(std::span<const consensus::Block> chain) {
  const std::string text = consensus::export_chain(chain);
  return sha256(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Run summary: config echo, seed, totals, chain digest and artifact names.
inline nlohmann::ordered_json summary_json(const ScenarioConfig& c, const sim::RunMetrics& m,
                                           std::span<const consensus::Block> chain,
                                           const std::vector<std::pair<std::string, std::string>>& files) {
  nlohmann::ordered_json j;
  j["config"] = config::to_json(c);
  j["seed"] = c.seed;
  j["totals"] = {{"epochs", m.epochs.size()},
                 {"batches_simulated", m.batch_delays.size()},
                 {"committed_blocks", m.committed_blocks},
                 {"aborted_batches", m.aborted_batches},
                 {"skipped_batches", m.skipped_batches},
                 {"collision_rounds", m.collision_rounds},
                 {"channel_drops", m.channel_drops},
                 {"elections", m.elections},
                 {"leader_hits", m.leader_hits},
                 {"election_time", m.election_time},
                 {"total_time", m.total_time}};
  j["chain"] = {{"blocks", chain.size()},
                {"head", chain.empty() ? std::string() : to_hex(chain.back().hash)},
                {"digest", to_hex(chain_digest(chain))}};
  nlohmann::ordered_json f = nlohmann::ordered_json::object();
  for (const auto& [k, v] : files) f[k] = v;
  j["files"] = f;
  return j;
}

// ---------------------------------------------------------------------------
// Output

/// Writes to a sibling temporary file and renames it over the target, so a
/// reader sees either the old file or the complete new one.
inline void atomic_write(const std::filesystem::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::invalid_state, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out.flush()) fail(Errc::invalid_state, "write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    fail(Errc::invalid_state, "cannot move output into place: " + path.string());
  }
}

inline void atomic_write(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, std::span<const char>(text.data(), text.size()));
}

inline void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  atomic_write(path, std::span<const char>(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

/// --out if given, else $BVIB_OUT_DIR, else the working directory.
inline std::filesystem::path output_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("BVIB_OUT_DIR"); env && *env) return env;
  return ".";
}

}  // namespace bvib::harness
