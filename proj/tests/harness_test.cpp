#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "bvib/config.hpp"
#include "bvib/dataset.hpp"
#include "bvib/harness.hpp"

using namespace bvib;

namespace {

template <typename F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::invalid_state;
}

void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<std::uint8_t> out;
  put_be32(out, data::kIdxImagesMagic);
  put_be32(out, n);
  put_be32(out, rows);
  put_be32(out, cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) out.push_back(static_cast<std::uint8_t>(i * 37));
  return out;
}

std::vector<std::uint8_t> idx_labels(std::initializer_list<std::uint8_t> labels) {
  std::vector<std::uint8_t> out;
  put_be32(out, data::kIdxLabelsMagic);
  put_be32(out, static_cast<std::uint32_t>(labels.size()));
  out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("bvib_harness_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Idx, TwoByTwoByTwoFixture) {
  const auto a = data::parse_idx(idx_images(2, 2, 2));
  EXPECT_EQ(a.dims, (std::vector<std::uint32_t>{2, 2, 2}));
  EXPECT_EQ(a.payload.size(), 8u);
  const auto d = data::from_idx(a, data::parse_idx(idx_labels({3, 7})));
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.dim(), 4u);
  EXPECT_EQ(d.labels, (std::vector<std::uint8_t>{3, 7}));
  EXPECT_DOUBLE_EQ(d.features(1, 0), 37.0 / 255.0);
  EXPECT_DOUBLE_EQ(d.features(0, 1), (4 * 37 % 256) / 255.0);
}

TEST(Idx, Rejections) {
  auto bad_magic = idx_images(2, 2, 2);
  bad_magic[3] = 0x02;
  EXPECT_EQ(code_of([&] { data::parse_idx(bad_magic); }), Errc::format_error);
  auto short_payload = idx_images(2, 2, 2);
  short_payload.pop_back();
  EXPECT_EQ(code_of([&] { data::parse_idx(short_payload); }), Errc::format_error);
  auto long_payload = idx_images(2, 2, 2);
  long_payload.push_back(0);
  EXPECT_EQ(code_of([&] { data::parse_idx(long_payload); }), Errc::format_error);
  EXPECT_EQ(code_of([] { data::parse_idx(std::vector<std::uint8_t>{0, 0, 8}); }), Errc::format_error);
  const auto images = data::parse_idx(idx_images(2, 2, 2));
  EXPECT_EQ(code_of([&] { data::from_idx(images, data::parse_idx(idx_labels({1, 2, 3}))); }), Errc::format_error);
  EXPECT_EQ(code_of([&] { data::from_idx(images, data::parse_idx(idx_labels({1, 10}))); }), Errc::format_error);
  EXPECT_EQ(code_of([] { data::read_file("/nonexistent/bvib.idx"); }), Errc::dataset_error);
}

TEST(Idx, EverySingleByteHeaderCorruptionRejected) {
  const auto good = idx_images(2, 2, 2);
  for (std::size_t at = 0; at < 16; ++at) {
    for (int v = 0; v < 256; ++v) {
      if (v == good[at]) continue;
      auto bad = good;
      bad[at] = static_cast<std::uint8_t>(v);
      EXPECT_EQ(code_of([&] { data::parse_idx(bad); }), Errc::format_error) << at << " " << v;
    }
  }
}

TEST(Idx, LoadFromFilesWithLimit) {
  const auto dir = scratch_dir("idx");
  harness::atomic_write(dir / "img", idx_images(3, 2, 2));
  const auto labels = idx_labels({0, 1, 2});
  harness::atomic_write(dir / "lbl", labels);
  const auto d = data::load_idx((dir / "img").string(), (dir / "lbl").string(), 2);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.features.cols(), 2);
  std::filesystem::remove_all(dir);
}

TEST(Synthetic, SpreadZeroGivesClassMeans) {
  const auto d = data::synth_dataset(3, 4, 5, 0.0, 9);
  EXPECT_EQ(d.size(), 12u);
  for (Eigen::Index j = 1; j < 4; ++j) EXPECT_EQ(d.features.col(j), d.features.col(0));
  EXPECT_NE(d.features.col(0), d.features.col(4));
  EXPECT_GE(d.features.minCoeff(), 0.0);
  EXPECT_LE(d.features.maxCoeff(), 1.0);
}

TEST(Synthetic, SeededAndSeparable) {
  const auto a = data::synth_dataset(10, 50, 784, 0.1, 3);
  const auto b = data::synth_dataset(10, 50, 784, 0.1, 3);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  // nearest class mean separates every sample
  const auto means = data::synth_dataset(10, 1, 784, 0.0, 3);
  int correct = 0;
  for (Eigen::Index j = 0; j < a.features.cols(); ++j) {
    Eigen::Index best = 0;
    (means.features.colwise() - a.features.col(j)).colwise().squaredNorm().minCoeff(&best);
    correct += static_cast<std::uint8_t>(best) == a.labels[static_cast<std::size_t>(j)];
  }
  EXPECT_EQ(correct, 500);
  const auto [train, test] = data::shuffle_split(a, 400, 3);
  EXPECT_EQ(train.size(), 400u);
  EXPECT_EQ(test.size(), 100u);
}

TEST(LoadData, SyntheticSplitSizes) {
  ScenarioConfig c;
  c.dataset.train_size = 100;
  c.dataset.test_size = 30;
  c.batches = 10;
  const auto s = harness::load_data(c);
  EXPECT_EQ(s.train.size(), 100u);
  EXPECT_EQ(s.test.size(), 30u);
  EXPECT_EQ(s.train.dim(), 784u);
}

TEST(LoadData, MnistNeedsAllPaths) {
  ScenarioConfig c;
  c.dataset.kind = DatasetKind::mnist;
  c.dataset.train_images = "x";
  EXPECT_EQ(code_of([&] { harness::load_data(c); }), Errc::dataset_error);
  EXPECT_EQ(harness::exit_code(Errc::dataset_error), 4);
}

TEST(Config, EmptyGivesDefaults) {
  const auto c = config::parse("  \n");
  EXPECT_EQ(c, ScenarioConfig{});
  EXPECT_EQ(c.epochs, 300);
  EXPECT_EQ(c.batches, 200);
  EXPECT_EQ(c.delay.vehicles_per_server, 5);
  EXPECT_EQ(c.delay.servers, 10);
  EXPECT_FALSE(c.lambda.has_value());
  EXPECT_EQ(config::parse("{}"), c);
}

TEST(Config, RejectsInvalid) {
  auto expect_config_error = [](const std::string& text, const std::string& field) {
    try {
      config::parse(text);
      ADD_FAILURE() << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::config_error) << text;
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  expect_config_error(R"({"network": {"attack_strength": 5}})", "network.attack_strength");
  expect_config_error(R"({"network": {"vehicles_per_server": 0}})", "network.vehicles_per_server");
  expect_config_error(R"({"network": {"speed": 3}})", "network.speed");
  expect_config_error(R"({"training": {"epochs": "many"}})", "training.epochs");
  expect_config_error(R"({"training": {"reparam": "other"}})", "training.reparam");
  expect_config_error(R"({"network": {"lambda": "fast"}})", "network.lambda");
  expect_config_error(R"({"extra": {}})", "extra");
  expect_config_error("{", "malformed");
  EXPECT_EQ(code_of([] { config::load("/nonexistent/config.json"); }), Errc::config_error);
}

TEST(Config, RoundTrip) {
  const auto c = config::parse(R"({
    "training": {"epochs": 7, "batches": 4, "beta": 0.01, "reparam": "literal", "seed": 99},
    "network": {"lambda": 0.3, "vehicles_per_server": 3, "servers": 7, "attack_strength": 3},
    "delay": {"term_length": 120.5},
    "channel": {"velocity": 33.3},
    "model": {"encoder_hidden": [64, 32], "latent": 8, "decoder_hidden": []},
    "dataset": {"train_size": 64, "test_size": 16, "dim": 20, "classes": 4, "spread": 0.5}
  })");
  EXPECT_EQ(c.epochs, 7);
  EXPECT_EQ(c.reparam, vib::Reparam::literal);
  EXPECT_EQ(c.lambda, 0.3);
  EXPECT_EQ(c.model.encoder_hidden, (std::vector<std::size_t>{64, 32}));
  EXPECT_TRUE(c.model.decoder_hidden.empty());
  const std::string text = config::serialize(c);
  EXPECT_EQ(config::parse(text), c);
  EXPECT_EQ(config::serialize(config::parse(text)), text);
  const auto automatic = config::parse(R"({"network": {"lambda": "auto"}})");
  EXPECT_FALSE(automatic.lambda.has_value());
  EXPECT_NEAR(automatic.resolved_lambda(), 17.69, 0.01);
}

TEST(Output, NumberFormatting) {
  EXPECT_EQ(harness::format_number(0.1), "0.1");
  EXPECT_EQ(harness::format_number(std::nan("")), "");
  EXPECT_EQ(harness::format_number(std::uint64_t{42}), "42");
  const double x = 1.0 / 3.0;
  EXPECT_EQ(std::stod(harness::format_number(x)), x);
}

TEST(Output, MetricsCsvShape) {
  sim::RunMetrics m;
  sim::EpochMetrics e;
  e.epoch = 1;
  e.i_zx_max = 2.5;
  e.i_zy_min = -0.5;
  e.committed_blocks = 3;
  m.epochs.push_back(e);
  const auto csv = harness::metrics_csv(m);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "epoch,i_zx_max,i_zy_min,accuracy,committed_blocks,aborted_batches,skipped_batches,collision_rounds,"
            "channel_drops,elections,mean_batch_delay,sim_time");
  EXPECT_NE(csv.find("\n1,2.5,-0.5,,3,0,0,0,0,0,0,0\n"), std::string::npos);
}

TEST(Output, SweepCsvFieldCount) {
  ScenarioConfig c;
  const std::vector<sim::SweepPoint> lambdas{{5.0, 0, 0, 0}};
  const std::vector<sim::SweepPoint> attacks{{0, 1, 0, 0}};
  const std::vector<sim::SweepPoint> topo{{0, 0, 3, 5}};
  std::vector<sim::SweepRow> rows;
  for (auto [axis, grid] : {std::pair{sim::SweepAxis::lambda, std::span<const sim::SweepPoint>(lambdas)},
                            std::pair{sim::SweepAxis::attack, std::span<const sim::SweepPoint>(attacks)},
                            std::pair{sim::SweepAxis::topology, std::span<const sim::SweepPoint>(topo)}}) {
    const auto r = sim::sweep(c, axis, grid);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  std::istringstream in(harness::sweep_csv(rows));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8) << line;
    ++n;
  }
  EXPECT_EQ(n, 4);
  EXPECT_EQ(rows[2].axis, "mn");
}

TEST(Output, AtomicWriteReplaces) {
  const auto dir = scratch_dir("write");
  const auto path = dir / "sub" / "out.txt";
  harness::atomic_write(path, std::string("first"));
  harness::atomic_write(path, std::string("second"));
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text, "second");
  int files = 0;
  for ([[maybe_unused]] const auto& entry : std::filesystem::directory_iterator(dir / "sub")) ++files;
  EXPECT_EQ(files, 1);
  std::filesystem::remove_all(dir);
}

TEST(Output, OutputDirPrecedence) {
  ::setenv("BVIB_OUT_DIR", "/tmp/from_env", 1);
  EXPECT_EQ(harness::output_dir("flag"), "flag");
  EXPECT_EQ(harness::output_dir(""), "/tmp/from_env");
  ::unsetenv("BVIB_OUT_DIR");
  EXPECT_EQ(harness::output_dir(""), ".");
}

TEST(Output, SummaryJson) {
  const ScenarioConfig c;
  sim::RunMetrics m;
  m.committed_blocks = 2;
  const consensus::Chain chain{consensus::make_genesis(1, 0.0)};
  const auto j = harness::summary_json(c, m, chain, {{"metrics", "metrics.csv"}});
  EXPECT_EQ(j["seed"], 1);
  EXPECT_EQ(j["totals"]["committed_blocks"], 2);
  EXPECT_EQ(j["chain"]["blocks"], 1);
  EXPECT_EQ(j["chain"]["digest"], to_hex(harness::chain_digest(chain)));
  EXPECT_EQ(j["files"]["metrics"], "metrics.csv");
  EXPECT_EQ(config::parse(j["config"].dump()), c);
}

TEST(ExitCodes, Mapping) {
  EXPECT_EQ(harness::exit_code(Errc::config_error), 3);
  EXPECT_EQ(harness::exit_code(Errc::invalid_attack_strength), 3);
  EXPECT_EQ(harness::exit_code(Errc::format_error), 5);
  EXPECT_EQ(harness::exit_code(Errc::invalid_shape), 6);
  EXPECT_EQ(harness::exit_code(Errc::divergent_delay), 7);
  EXPECT_EQ(harness::exit_code(Errc::network_dead), 1);
}
