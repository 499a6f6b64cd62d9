#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "bvib/consensus.hpp"

using namespace bvib;
using namespace bvib::consensus;

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

std::vector<ServerNode> make_nodes(int n) {
  std::vector<ServerNode> nodes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) nodes[static_cast<std::size_t>(i)].id = i;
  return nodes;
}

LedgerEntry entry(std::uint64_t epoch, std::uint64_t batch, double zx = 0.5, double zy = -0.25) {
  LedgerEntry e;
  e.epoch = epoch;
  e.batch = batch;
  e.samples = 3;
  e.i_zx_max = zx;
  e.i_zy_min = zy;
  return e;
}

FollowerMessage report(const ServerNode& n) {
  const auto p = n.pending();
  return {n.id, {p.begin(), p.end()}};
}

// Chain of `blocks` committed batches on a 4-node cluster.
Chain sample_chain(int blocks) {
  auto nodes = make_nodes(4);
  RandomStream rng(1);
  const auto r = elect_leader(nodes, rng);
  Chain chain{make_genesis(r.term, 0.0)};
  for (int b = 0; b < blocks; ++b) {
    std::vector<FollowerMessage> msgs;
    for (auto& n : nodes) {
      record_entry(n, entry(0, static_cast<std::uint64_t>(b), 0.1 * b, -0.01 * b));
      if (n.id != r.leader) msgs.push_back(report(n));
    }
    EXPECT_TRUE(collect_and_commit(nodes, static_cast<std::size_t>(r.leader), msgs, chain, 1.0 + b).committed);
  }
  return chain;
}

}  // namespace

TEST(Chain, GenesisIsValid) {
  const Chain c{make_genesis(1, 0.0)};
  EXPECT_EQ(c[0].height, 0u);
  EXPECT_EQ(c[0].prev_hash, Digest{});
  EXPECT_FALSE(verify_chain(c).has_value());
}

TEST(Chain, TamperingReportsFirstBadHeight) {
  const Chain good = sample_chain(5);
  ASSERT_EQ(good.size(), 6u);
  EXPECT_FALSE(verify_chain(good).has_value());

  Chain flipped = good;
  flipped[3].entries[0].entries[0].i_zx_max += 1e-12;
  EXPECT_EQ(verify_chain(flipped), 3u);

  Chain relinked = good;
  relinked[4].prev_hash[7] ^= 1;
  EXPECT_EQ(verify_chain(relinked), 4u);

  Chain swapped = good;
  std::swap(swapped[2], swapped[4]);
  EXPECT_EQ(verify_chain(swapped), 2u);

  Chain truncated(good.begin() + 1, good.end());
  EXPECT_EQ(verify_chain(truncated), 0u);
}

TEST(Chain, ByteLevelCorruptionOfExport) {
  const Chain good = sample_chain(3);
  const std::string text = export_chain(good);
  EXPECT_EQ(import_chain(text), good);
  // flip one hex digit inside the body of the block at height 2
  std::size_t line_start = 0;
  for (int i = 0; i < 2; ++i) line_start = text.find('\n', line_start) + 1;
  std::string bad = text;
  const std::size_t pos = text.find(' ', line_start) + 40;
  bad[pos] = bad[pos] == '0' ? '1' : '0';
  try {
    const Chain parsed = import_chain(bad);
    EXPECT_EQ(verify_chain(parsed), 2u);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::format_error);
  }
  EXPECT_THROW(import_chain("zz 00\n"), Error);
}

TEST(Election, SingleNodeLeads) {
  auto nodes = make_nodes(1);
  RandomStream rng(2);
  const auto r = elect_leader(nodes, rng);
  EXPECT_EQ(r.leader, 0);
  EXPECT_EQ(r.term, 1u);
  EXPECT_EQ(nodes[0].role, Role::leader);
}

TEST(Election, DeterministicAndPlurality) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    auto a = make_nodes(10), b = make_nodes(10);
    RandomStream ra(seed), rb(seed);
    const auto x = elect_leader(a, ra);
    const auto y = elect_leader(b, rb);
    EXPECT_EQ(x.leader, y.leader);
    int votes = 0, best = 0;
    for (int v : x.votes) {
      votes += v;
      best = std::max(best, v);
    }
    EXPECT_EQ(votes, 10);
    EXPECT_EQ(x.votes[static_cast<std::size_t>(x.leader)], best);
    // ties go to the lowest id
    for (int i = 0; i < x.leader; ++i) EXPECT_LT(x.votes[static_cast<std::size_t>(i)], best);
    int leaders = 0;
    for (const auto& n : a) leaders += n.role == Role::leader;
    EXPECT_EQ(leaders, 1);
  }
}

TEST(Election, DeadNodesNeverWin) {
  auto nodes = make_nodes(6);
  for (int i : {0, 1, 2}) nodes[static_cast<std::size_t>(i)].alive = false;
  RandomStream rng(3);
  for (int k = 0; k < 100; ++k) {
    const auto r = elect_leader(nodes, rng);
    EXPECT_GE(r.leader, 3);
    EXPECT_EQ(r.term, static_cast<std::uint64_t>(k + 1));
  }
  for (auto& n : nodes) n.alive = false;
  EXPECT_EQ(code_of([&] { elect_leader(nodes, rng); }), Errc::network_dead);
}

TEST(Ledger, RecordEntry) {
  auto nodes = make_nodes(2);
  record_entry(nodes[0], entry(0, 0));
  record_entry(nodes[0], entry(0, 1));
  ASSERT_EQ(nodes[0].ledger.size(), 2u);
  EXPECT_EQ(nodes[0].ledger[1].batch, 1u);
  nodes[1].alive = false;
  EXPECT_EQ(code_of([&] { record_entry(nodes[1], entry(0, 0)); }), Errc::node_paralyzed);
}

TEST(Commit, QuorumBoundary) {
  EXPECT_EQ(commit_quorum(10), 5u);
  EXPECT_EQ(commit_quorum(3), 1u);
  EXPECT_EQ(commit_quorum(1), 0u);
  for (int reports : {9, 5, 4}) {
    auto nodes = make_nodes(10);
    RandomStream rng(4);
    const auto r = elect_leader(nodes, rng);
    const auto leader = static_cast<std::size_t>(r.leader);
    Chain chain{make_genesis(r.term, 0.0)};
    std::vector<FollowerMessage> msgs;
    for (auto& n : nodes) {
      record_entry(n, entry(0, 0));
      if (n.id != r.leader && static_cast<int>(msgs.size()) < reports) msgs.push_back(report(n));
    }
    const auto res = collect_and_commit(nodes, leader, msgs, chain, 1.0);
    EXPECT_EQ(res.committed, reports >= 5) << reports;
    EXPECT_EQ(chain.size(), reports >= 5 ? 2u : 1u);
    if (res.committed) {
      EXPECT_EQ(res.block->entries.size(), static_cast<std::size_t>(reports + 1));
      EXPECT_EQ(res.block->entries[0].server, r.leader);
      for (const auto& n : nodes) EXPECT_TRUE(n.pending().empty());
    } else {
      discard_pending(nodes);
      for (const auto& n : nodes) EXPECT_TRUE(n.ledger.empty());
    }
  }
}

TEST(Commit, OnlyAliveLeaderCommits) {
  auto nodes = make_nodes(4);
  RandomStream rng(5);
  const auto r = elect_leader(nodes, rng);
  Chain chain{make_genesis(r.term, 0.0)};
  const std::size_t other = r.leader == 0 ? 1 : 0;
  EXPECT_EQ(code_of([&] { collect_and_commit(nodes, other, {}, chain, 0.0); }), Errc::not_leader);
  nodes[static_cast<std::size_t>(r.leader)].alive = false;
  EXPECT_EQ(code_of([&] { collect_and_commit(nodes, static_cast<std::size_t>(r.leader), {}, chain, 0.0); }),
            Errc::node_paralyzed);
}

TEST(Attack, StrengthAndNesting) {
  auto nodes = make_nodes(10);
  RandomStream rng(6);
  EXPECT_TRUE(inject_attack(nodes, 0, rng).empty());
  EXPECT_EQ(code_of([&] { inject_attack(nodes, 5, rng); }), Errc::invalid_attack_strength);
  EXPECT_EQ(code_of([&] { inject_attack(nodes, -1, rng); }), Errc::invalid_attack_strength);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::vector<int> prev;
    for (int a = 0; a <= 4; ++a) {
      auto fresh = make_nodes(10);
      RandomStream r(seed);
      const auto victims = inject_attack(fresh, a, r);
      EXPECT_EQ(victims.size(), static_cast<std::size_t>(a));
      EXPECT_TRUE(std::includes(victims.begin(), victims.end(), prev.begin(), prev.end()));
      int dead = 0;
      for (const auto& n : fresh) dead += !n.alive;
      EXPECT_EQ(dead, a);
      prev = victims;
    }
  }
}

TEST(Attack, VictimsUniform) {
  // each node hit with probability a/N
  const int trials = 20000, n = 10, a = 3;
  std::vector<int> hits(n, 0);
  RandomStream rng(7);
  for (int t = 0; t < trials; ++t) {
    auto nodes = make_nodes(n);
    for (int v : inject_attack(nodes, a, rng)) ++hits[static_cast<std::size_t>(v)];
  }
  const double p = static_cast<double>(a) / n;
  for (int h : hits) EXPECT_NEAR(static_cast<double>(h) / trials, p, 3.0 * std::sqrt(p * (1 - p) / trials));
}

TEST(Cluster, HealthyLeaderKeepsTerm) {
  ClusterConfig cfg;
  cfg.term_length = 10.0;
  cfg.control_interval = 1.0;
  Cluster c(cfg, RandomStream(8));
  c.start(0.0);
  EXPECT_EQ(c.elections(), 1u);
  EXPECT_EQ(c.chain().size(), 1u);
  const auto ev = c.tick(5.5);
  EXPECT_EQ(ev.elections, 0);
  EXPECT_EQ(ev.control_messages, 5u);
  EXPECT_EQ(c.alive_leaders(), 1);
  const auto expiry = c.tick(5.0);
  EXPECT_EQ(expiry.term_expiries, 1);
  EXPECT_GE(expiry.elections, 1);
  EXPECT_NEAR(expiry.election_time, expiry.elections * cfg.election_time, 1e-15);
}

TEST(Cluster, ParalyzedLeaderTriggersReelection) {
  ClusterConfig cfg;
  cfg.attack_strength = 4;
  cfg.term_length = 1.0;
  Cluster c(cfg, RandomStream(9));
  c.start(0.0);
  for (int i = 0; i < 500; ++i) {
    c.tick(1.0);
    EXPECT_TRUE(c.leader().alive);
    EXPECT_EQ(c.alive_leaders(), 1);
  }
  EXPECT_GT(c.leader_hits(), 0u);
  EXPECT_EQ(c.elections(), c.terms_started() + c.leader_hits());
  // one leader per term, recorded once
  std::set<std::uint64_t> terms;
  for (const auto& [term, leader] : c.term_leaders()) EXPECT_TRUE(terms.insert(term).second);
  EXPECT_EQ(terms.size(), c.elections());
}

TEST(Cluster, LeaderHitFrequency) {
  const int trials = 10000;
  for (int a = 0; a <= 4; ++a) {
    ClusterConfig cfg;
    cfg.attack_strength = a;
    cfg.term_length = 1.0;
    Cluster c(cfg, RandomStream(10));
    c.start(0.0);
    while (c.terms_started() < static_cast<std::uint64_t>(trials)) c.tick(1.0);
    const double p = a / 10.0;
    const double freq = static_cast<double>(c.leader_hits()) / trials;
    EXPECT_NEAR(freq, p, 3.0 * std::sqrt(p * (1 - p) / trials) + 1e-12) << "a=" << a;
  }
}

TEST(Cluster, AttackStrengthValidated) {
  ClusterConfig cfg;
  cfg.attack_strength = 5;
  EXPECT_EQ(code_of([&] { Cluster(cfg, RandomStream(1)); }), Errc::invalid_attack_strength);
  cfg.attack_strength = 0;
  Cluster c(cfg, RandomStream(1));
  EXPECT_EQ(code_of([&] { c.tick(1.0); }), Errc::invalid_state);
}
