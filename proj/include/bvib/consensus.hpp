#pragma once

// Raft-lite consensus among servers: single-round plurality elections, term
// timers, per-batch ledger entries and majority-gated hash-linked blocks.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bvib/digest.hpp"
#include "bvib/error.hpp"
#include "bvib/rng.hpp"

namespace bvib::consensus {

enum class Role : std::uint8_t { follower, candidate, leader };

enum class EntryKind : std::uint8_t { training = 0, test = 1 };

/// One server's record for one batch: the mutual-information bounds during
/// training, or a digest of the predicted labels during testing.
struct LedgerEntry {
  EntryKind kind = EntryKind::training;
  std::uint64_t epoch = 0;
  std::uint64_t batch = 0;
  std::uint64_t samples = 0;
  double i_zx_max = 0.0;
  double i_zy_min = 0.0;
  Digest predictions{};

  friend bool operator==(const LedgerEntry&, const LedgerEntry&) = default;
};

struct ServerNode {
  int id = 0;
  Role role = Role::follower;
  std::uint64_t term = 0;
  bool alive = true;
  std::vector<LedgerEntry> ledger;
  std::size_t committed = 0;       ///< ledger prefix already in the chain
  std::uint64_t synced_height = 0; ///< latest block this node has received
  double reward = 0.0;             ///< assigned at election, otherwise unused

  std::span<const LedgerEntry> pending() const { return std::span(ledger).subspan(committed); }
};

/// Records one server contributed to a block.
struct EntrySet {
  int server = 0;
  std::vector<LedgerEntry> entries;

  friend bool operator==(const EntrySet&, const EntrySet&) = default;
};

struct Block {
  std::uint64_t height = 0;
  std::uint64_t term = 0;
  Digest prev_hash{};
  std::vector<EntrySet> entries;
  double timestamp = 0.0;
  Digest hash{};

  /// Canonical encoding of every field except the hash:
  /// u64 height, u64 term, 32-byte prev_hash, f64 timestamp, u32 set count,
  /// then per set u64 server id, u32 entry count and per entry
  /// u8 kind, u64 epoch, u64 batch, u64 samples, f64 i_zx_max, f64 i_zy_min,
  /// 32-byte predictions digest. Little-endian throughout.
  std::vector<std::uint8_t> body() const {
    ByteWriter w;
    w.u64(height);
    w.u64(term);
    w.raw(prev_hash);
    w.f64(timestamp);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& set : entries) {
      w.u64(static_cast<std::uint64_t>(set.server));
      w.u32(static_cast<std::uint32_t>(set.entries.size()));
      for (const auto& e : set.entries) {
        w.u8(static_cast<std::uint8_t>(e.kind));
        w.u64(e.epoch);
        w.u64(e.batch);
        w.u64(e.samples);
        w.f64(e.i_zx_max);
        w.f64(e.i_zy_min);
        w.raw(e.predictions);
      }
    }
    return w.take();
  }

  Digest compute_hash() const { return sha256(body()); }

  static Block parse_body(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    Block b;
    b.height = r.u64();
    b.term = r.u64();
    auto prev = r.raw(32);
    std::copy(prev.begin(), prev.end(), b.prev_hash.begin());
    b.timestamp = r.f64();
    const auto sets = r.u32();
    if (sets > r.remaining()) fail(Errc::format_error, "entry-set count exceeds record");
    for (std::uint32_t s = 0; s < sets; ++s) {
      EntrySet set;
      set.server = static_cast<int>(r.u64());
      const auto n = r.u32();
      if (n > r.remaining()) fail(Errc::format_error, "entry count exceeds record");
      for (std::uint32_t i = 0; i < n; ++i) {
        LedgerEntry e;
        const auto kind = r.u8();
        if (kind > 1) fail(Errc::format_error, "unknown entry kind");
        e.kind = static_cast<EntryKind>(kind);
        e.epoch = r.u64();
        e.batch = r.u64();
        e.samples = r.u64();
        e.i_zx_max = r.f64();
        e.i_zy_min = r.f64();
        auto digest = r.raw(32);
        std::copy(digest.begin(), digest.end(), e.predictions.begin());
        set.entries.push_back(e);
      }
      b.entries.push_back(std::move(set));
    }
    if (r.remaining() != 0) fail(Errc::format_error, "trailing bytes in block record");
    return b;
  }

  friend bool operator==(const Block&, const Block&) = default;
};

using Chain = std::vector<Block>;

inline Block make_genesis(std::uint64_t term, double timestamp) {
  Block g;
  g.term = term;
  g.timestamp = timestamp;
  g.hash = g.compute_hash();
  return g;
}

/// Position of the first block whose height, link or hash is inconsistent.
inline std::optional<std::uint64_t> verify_chain(std::span<const Block> chain) {
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const Block& b = chain[i];
    const Digest expected_prev = i == 0 ? Digest{} : chain[i - 1].hash;
    if (b.height != i || b.prev_hash != expected_prev || b.compute_hash() != b.hash) return i;
  }
  return std::nullopt;
}

/// Chain export: one block per line, "<hash hex> <body hex>".
inline std::string export_chain(std::span<const Block> chain) {
  std::string out;
  for (const auto& b : chain) {
    out += to_hex(b.hash);
    out += ' ';
    out += to_hex(b.body());
    out += '\n';
  }
  return out;
}

inline Chain import_chain(const std::string& text) {
  Chain chain;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto space = line.find(' ');
    if (space != 64 || line.find(' ', space + 1) != std::string::npos) fail(Errc::format_error, "malformed chain line");
    const auto hash = from_hex(std::string_view(line).substr(0, space));
    Block b = Block::parse_body(from_hex(std::string_view(line).substr(space + 1)));
    std::copy(hash.begin(), hash.end(), b.hash.begin());
    chain.push_back(std::move(b));
  }
  return chain;
}

// ---------------------------------------------------------------------------
// Protocol steps

struct ElectionResult {
  int leader = -1;
  std::uint64_t term = 0;
  std::vector<int> votes;  ///< votes received, indexed by node position
};

/// All alive nodes stand; each casts one uniform vote among them; the
/// plurality wins with ties going to the lowest id.
inline ElectionResult elect_leader(std::vector<ServerNode>& nodes, RandomStream& rng) {
  std::vector<std::size_t> alive;
  std::uint64_t top_term = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    top_term = std::max(top_term, nodes[i].term);
    if (nodes[i].alive) alive.push_back(i);
  }
  if (alive.empty()) fail(Errc::network_dead, "no alive server can stand for election");
  ElectionResult r;
  r.term = top_term + 1;
  r.votes.assign(nodes.size(), 0);
  for (auto i : alive) nodes[i].role = Role::candidate;
  for (std::size_t v = 0; v < alive.size(); ++v) ++r.votes[alive[rng.below(alive.size())]];
  std::size_t winner = alive.front();
  for (auto i : alive) {
    const bool more = r.votes[i] > r.votes[winner];
    const bool tie_lower_id = r.votes[i] == r.votes[winner] && nodes[i].id < nodes[winner].id;
    if (more || tie_lower_id) winner = i;
  }
  for (auto i : alive) {
    nodes[i].term = r.term;
    nodes[i].role = i == winner ? Role::leader : Role::follower;
    if (i != winner) nodes[i].reward = rng.uniform();
  }
  for (auto& n : nodes)
    if (!n.alive) n.role = Role::follower;
  r.leader = nodes[winner].id;
  return r;
}

inline void record_entry(ServerNode& node, const LedgerEntry& entry) {
  if (!node.alive) fail(Errc::node_paralyzed, "a paralyzed server cannot record");
  node.ledger.push_back(entry);
}

/// Paralyzes `strength` distinct alive nodes chosen uniformly: a shuffled
/// order of the alive nodes is drawn and its prefix taken, so with the same
/// stream a larger strength always paralyzes a superset.
inline std::vector<int> inject_attack(std::vector<ServerNode>& nodes, int strength, RandomStream& rng) {
  const int n = static_cast<int>(nodes.size());
  if (strength < 0 || 2 * strength >= n) fail(Errc::invalid_attack_strength, "attack strength must satisfy 0 <= a < N/2");
  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].alive) alive.push_back(i);
  if (static_cast<std::size_t>(strength) > alive.size()) fail(Errc::invalid_attack_strength, "not enough alive servers");
  for (std::size_t i = alive.size(); i > 1; --i) std::swap(alive[i - 1], alive[rng.below(i)]);
  std::vector<int> victims;
  for (int k = 0; k < strength; ++k) {
    nodes[alive[k]].alive = false;
    victims.push_back(nodes[alive[k]].id);
  }
  std::sort(victims.begin(), victims.end());
  return victims;
}

/// A follower's report: its uncommitted ledger records.
struct FollowerMessage {
  int server = 0;
  std::vector<LedgerEntry> entries;
};

/// ceil((N-1)/2) follower reports.
inline std::size_t commit_quorum(std::size_t servers) {
  const std::size_t followers = servers == 0 ? 0 : servers - 1;
  return (followers + 1) / 2;
}

struct CommitResult {
  bool committed = false;
  std::optional<Block> block;
};

/// The leader bundles its own pending records with the followers' reports.
/// Fewer than ceil((N-1)/2) reports aborts the batch.
inline CommitResult collect_and_commit(std::vector<ServerNode>& nodes, std::size_t leader,
                                       std::span<const FollowerMessage> messages, Chain& chain, double timestamp) {
  if (leader >= nodes.size() || nodes[leader].role != Role::leader) fail(Errc::not_leader, "only the leader commits");
  if (!nodes[leader].alive) fail(Errc::node_paralyzed, "the leader is paralyzed");
  if (chain.empty()) fail(Errc::invalid_state, "chain has no genesis block");
  if (messages.size() < commit_quorum(nodes.size())) return {};
  Block b;
  b.height = chain.back().height + 1;
  b.term = nodes[leader].term;
  b.prev_hash = chain.back().hash;
  b.timestamp = timestamp;
  const auto own = nodes[leader].pending();
  b.entries.push_back({nodes[leader].id, {own.begin(), own.end()}});
  for (const auto& m : messages) b.entries.push_back({m.server, m.entries});
  b.hash = b.compute_hash();
  chain.push_back(b);
  for (auto& n : nodes) {
    if (!n.alive) continue;
    n.committed = n.ledger.size();
    n.synced_height = b.height;
  }
  return {true, std::move(b)};
}

/// Drops records of an aborted batch from every ledger.
inline void discard_pending(std::vector<ServerNode>& nodes) {
  for (auto& n : nodes) n.ledger.resize(n.committed);
}

// ---------------------------------------------------------------------------
// Cluster driver

struct ClusterConfig {
  int servers = 10;
  int attack_strength = 0;
  double term_length = 600.0;       ///< T_term, s
  double election_time = 0.01;      ///< tau_ele, s
  double control_interval = 6.0;    ///< leader heartbeat spacing, s
};

struct TickEvents {
  std::uint64_t control_messages = 0;
  int elections = 0;
  int leader_losses = 0;
  int term_expiries = 0;
  double election_time = 0.0;
};

/// Server cluster advanced by the simulator's clock. The adversary re-targets
/// at the start of every term: last term's victims recover and `a` fresh
/// servers are paralyzed. A paralyzed leader goes silent and the followers
/// elect a replacement at once.
class Cluster {
 public:
  Cluster(ClusterConfig config, RandomStream rng)
      : config_(config), election_rng_(rng.split(StreamTag::election)), attack_rng_(rng.split(StreamTag::attack)) {
    require(config_.servers >= 1, Errc::invalid_parameter, "need at least one server");
    require(config_.term_length > 0.0, Errc::invalid_parameter, "term length must be positive");
    require(config_.control_interval > 0.0, Errc::invalid_parameter, "control interval must be positive");
    if (config_.attack_strength < 0 || 2 * config_.attack_strength >= config_.servers)
      fail(Errc::invalid_attack_strength, "attack strength must satisfy 0 <= a < N/2");
    for (int i = 0; i < config_.servers; ++i) {
      ServerNode node;
      node.id = i;
      nodes_.push_back(std::move(node));
    }
  }

  /// Initial election, the first term's attack and the genesis block.
  TickEvents start(double now) {
    TickEvents ev;
    begin_term(ev);
    chain_.push_back(make_genesis(nodes_[leader_].term, now));
    for (auto& n : nodes_) n.synced_height = 0;
    return ev;
  }

  /// Advance the term timer by dt and react to silence or expiry.
  TickEvents tick(double dt) {
    if (chain_.empty()) fail(Errc::invalid_state, "cluster not started");
    TickEvents ev;
    const double before = in_term_;
    in_term_ += dt;
    const double interval = config_.control_interval;
    if (nodes_[leader_].alive)
      ev.control_messages = static_cast<std::uint64_t>(std::floor(std::min(in_term_, config_.term_length) / interval)) -
                            static_cast<std::uint64_t>(std::floor(std::min(before, config_.term_length) / interval));
    if (in_term_ >= config_.term_length) {
      ++ev.term_expiries;
      begin_term(ev);
    }
    settle(ev);
    control_messages_ += ev.control_messages;
    return ev;
  }

  std::size_t leader_index() const noexcept { return leader_; }
  const ServerNode& leader() const { return nodes_[leader_]; }
  std::vector<ServerNode>& nodes() noexcept { return nodes_; }
  const std::vector<ServerNode>& nodes() const noexcept { return nodes_; }
  Chain& chain() noexcept { return chain_; }
  const Chain& chain() const noexcept { return chain_; }
  const ClusterConfig& config() const noexcept { return config_; }

  /// Leader of every term so far.
  const std::map<std::uint64_t, int>& term_leaders() const noexcept { return term_leaders_; }
  std::uint64_t elections() const noexcept { return elections_; }
  std::uint64_t leader_hits() const noexcept { return leader_hits_; }
  std::uint64_t control_messages() const noexcept { return control_messages_; }
  std::uint64_t terms_started() const noexcept { return windows_; }

  /// Alive leaders right now; the protocol keeps this at exactly one.
  int alive_leaders() const {
    return static_cast<int>(std::count_if(nodes_.begin(), nodes_.end(),
                                          [](const ServerNode& n) { return n.alive && n.role == Role::leader; }));
  }

 private:
  void run_election(TickEvents& ev) {
    RandomStream rng = election_rng_.split({windows_, window_elections_++});
    const auto r = elect_leader(nodes_, rng);
    ++elections_;
    leader_ = static_cast<std::size_t>(r.leader);
    if (!term_leaders_.emplace(r.term, r.leader).second) fail(Errc::invalid_state, "two leaders in one term");
    in_term_ = 0.0;
    ++ev.elections;
    ev.election_time += config_.election_time;
  }

  /// Last term's victims recover and stand, then the adversary strikes.
  /// Streams are keyed by term window so runs differing only in the attack
  /// strength see the same first leader and nested victim sets.
  void begin_term(TickEvents& ev) {
    for (auto& n : nodes_) {
      if (n.alive) continue;
      n.alive = true;
      n.synced_height = chain_.empty() ? 0 : chain_.back().height;
    }
    window_elections_ = 0;
    run_election(ev);
    RandomStream rng = attack_rng_.split(windows_);
    inject_attack(nodes_, config_.attack_strength, rng);
    settle(ev);
    ++windows_;
  }

  /// A silent leader is replaced before anything else happens.
  void settle(TickEvents& ev) {
    if (nodes_[leader_].alive) return;
    ++ev.leader_losses;
    ++leader_hits_;
    nodes_[leader_].role = Role::follower;
    run_election(ev);
  }

  ClusterConfig config_;
  RandomStream election_rng_;
  RandomStream attack_rng_;
  std::vector<ServerNode> nodes_;
  Chain chain_;
  std::size_t leader_ = 0;
  double in_term_ = 0.0;
  std::uint64_t elections_ = 0;
  std::uint64_t windows_ = 0;
  std::uint64_t window_elections_ = 0;
  std::uint64_t leader_hits_ = 0;
  std::uint64_t control_messages_ = 0;
  std::map<std::uint64_t, int> term_leaders_;
};

}  // namespace bvib::consensus
