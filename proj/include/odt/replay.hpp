#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "odt/error.hpp"
#include "odt/rng.hpp"
#include "odt/trajectory.hpp"

namespace odt {

/// Trajectory-level FIFO replay buffer.
///
/// Phase contract: a single writer (the finetuning loop) inserts; readers
/// may sample concurrently only while no insert is in progress. There is no
/// internal locking.
class ReplayBuffer {
 public:
  struct Entry {
    Trajectory trajectory;
    RtgSequence rtgs;
    std::uint64_t counter = 0;
  };

  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw Error("replay buffer capacity must be positive");
  }

  /// The N highest-return trajectories, inserted in dataset order. Ties keep
  /// the earlier dataset index.
  static ReplayBuffer init_top_n(std::span<const Trajectory> offline, int n) {
    check_init_args(offline, n);
    std::vector<std::size_t> order(offline.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> returns(offline.size());
    for (std::size_t i = 0; i < offline.size(); ++i) returns[i] = offline[i].total_return();
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return returns[a] > returns[b]; });
    order.resize(std::min(order.size(), static_cast<std::size_t>(n)));
    std::sort(order.begin(), order.end());
    ReplayBuffer buf(static_cast<std::size_t>(n));
    for (std::size_t i : order) buf.insert_fifo(offline[i]);
    return buf;
  }

  /// A uniform subset of N trajectories without replacement, inserted in
  /// dataset order.
  static ReplayBuffer init_random(std::span<const Trajectory> offline, int n, Rng& rng) {
    check_init_args(offline, n);
    std::vector<std::size_t> order(offline.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t keep = std::min(order.size(), static_cast<std::size_t>(n));
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < keep; ++i) {
      const std::size_t j = i + rng.index(order.size() - i);
      std::swap(order[i], order[j]);
    }
    order.resize(keep);
    std::sort(order.begin(), order.end());
    ReplayBuffer buf(static_cast<std::size_t>(n));
    for (std::size_t i : order) buf.insert_fifo(offline[i]);
    return buf;
  }

  /// Relabels with hindsight RTGs, evicting the oldest entry first when full.
  void insert_fifo(Trajectory traj) {
    RtgSequence rtgs = relabel_hindsight(traj);
    insert_with_rtgs(std::move(traj), std::move(rtgs));
  }

  /// Stores `rtgs` as given. Used when hindsight relabeling is disabled.
  void insert_with_rtgs(Trajectory traj, RtgSequence rtgs) {
    traj.validate();
    if (rtgs.size() != traj.length()) throw Error("rtg sequence does not match trajectory length");
    if (entries_.size() >= capacity_) {
      total_timesteps_ -= static_cast<std::size_t>(entries_.front().trajectory.length());
      entries_.pop_front();
    }
    total_timesteps_ += static_cast<std::size_t>(traj.length());
    entries_.push_back(Entry{std::move(traj), std::move(rtgs), next_counter_++});
  }

  /// Index of a trajectory drawn with probability |tau| / total_timesteps.
  std::size_t sample_index(Rng& rng) const {
    if (entries_.empty()) throw Error("cannot sample from an empty replay buffer");
    std::size_t u = rng.index(total_timesteps_);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto len = static_cast<std::size_t>(entries_[i].trajectory.length());
      if (u < len) return i;
      u -= len;
    }
    return entries_.size() - 1;
  }

  const Entry& sample_trajectory(Rng& rng) const { return entries_[sample_index(rng)]; }

  /// Draws with probability return / sum of returns. All-zero returns fall
  /// back to a uniform draw.
  std::size_t sample_index_return_weighted(Rng& rng) const {
    if (entries_.empty()) throw Error("cannot sample from an empty replay buffer");
    const auto p = return_weighted_probabilities();
    double u = rng.uniform();
    for (std::size_t i = 0; i + 1 < p.size(); ++i) {
      if (u < p[i]) return i;
      u -= p[i];
    }
    return p.size() - 1;
  }

  const Entry& sample_trajectory_return_weighted(Rng& rng) const {
    return entries_[sample_index_return_weighted(rng)];
  }

  std::vector<double> length_weighted_probabilities() const {
    std::vector<double> p;
    for (const auto& e : entries_)
      p.push_back(static_cast<double>(e.trajectory.length()) / static_cast<double>(total_timesteps_));
    return p;
  }

  std::vector<double> return_weighted_probabilities() const {
    std::vector<double> r = returns();
    double total = 0.0;
    for (double x : r) {
      if (x < 0.0) throw Error("return-weighted sampling requires non-negative returns");
      total += x;
    }
    for (double& x : r) x = total > 0.0 ? x / total : 1.0 / static_cast<double>(r.size());
    return r;
  }

  std::vector<double> returns() const {
    std::vector<double> r;
    r.reserve(entries_.size());
    for (const auto& e : entries_) r.push_back(e.trajectory.total_return());
    return r;
  }

  /// Recomputes the stored-length sum; true when it matches the running total.
  bool verify() const {
    std::size_t total = 0;
    for (const auto& e : entries_) total += static_cast<std::size_t>(e.trajectory.length());
    bool counters_ok = true;
    for (std::size_t i = 1; i < entries_.size(); ++i)
      counters_ok = counters_ok && entries_[i - 1].counter < entries_[i].counter;
    return total == total_timesteps_ && entries_.size() <= capacity_ && counters_ok;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t total_timesteps() const { return total_timesteps_; }
  std::uint64_t next_counter() const { return next_counter_; }
  const std::deque<Entry>& entries() const { return entries_; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }

  // -------------------------------------------------------------------------
  // Snapshot: `<prefix>.jsonl` holds the trajectories, `<prefix>.json` the
  // header with capacity, counters and stored RTGs.

  void save_snapshot(const std::string& prefix) const {
    std::vector<Trajectory> trajs;
    nlohmann::json header;
    header["format"] = "odt-replay-v1";
    header["capacity"] = capacity_;
    header["next_counter"] = next_counter_;
    header["total_timesteps"] = total_timesteps_;
    header["counters"] = nlohmann::json::array();
    header["rtgs"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      trajs.push_back(e.trajectory);
      header["counters"].push_back(e.counter);
      header["rtgs"].push_back(std::vector<double>(e.rtgs.values.data(), e.rtgs.values.data() + e.rtgs.size()));
    }
    save_jsonl(prefix + ".jsonl", trajs);
    std::ofstream os(prefix + ".json");
    if (!os) throw Error("cannot write replay snapshot header '" + prefix + ".json'");
    os << header.dump(2) << '\n';
  }

  static ReplayBuffer load_snapshot(const std::string& prefix) {
    std::ifstream is(prefix + ".json");
    if (!is) throw Error("cannot read replay snapshot header '" + prefix + ".json'");
    const auto header = nlohmann::json::parse(is);
    auto trajs = load_jsonl(prefix + ".jsonl");
    const auto& counters = header.at("counters");
    const auto& rtgs = header.at("rtgs");
    if (counters.size() != trajs.size() || rtgs.size() != trajs.size())
      throw Error("replay snapshot header does not match its trajectories");
    ReplayBuffer buf(header.at("capacity").get<std::size_t>());
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      const auto values = rtgs[i].get<std::vector<double>>();
      RtgSequence seq{Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()))};
      buf.total_timesteps_ += static_cast<std::size_t>(trajs[i].length());
      buf.entries_.push_back(Entry{std::move(trajs[i]), std::move(seq), counters[i].get<std::uint64_t>()});
    }
    buf.next_counter_ = header.at("next_counter").get<std::uint64_t>();
    if (!buf.verify()) throw Error("replay snapshot violates buffer invariants");
    return buf;
  }

 private:
  static void check_init_args(std::span<const Trajectory> offline, int n) {
    if (n <= 0) throw Error("buffer size N must be positive");
    if (offline.empty()) throw Error("offline dataset is empty");
  }

  std::size_t capacity_;
  std::deque<Entry> entries_;
  std::size_t total_timesteps_ = 0;
  std::uint64_t next_counter_ = 0;
};

/// Two-stage draw: a length-proportional trajectory, then a uniform start.
inline TrainingWindow sample_window(const ReplayBuffer& buf, int K, Rng& rng) {
  const std::size_t idx = buf.sample_index(rng);
  const auto& e = buf[idx];
  return sample_subsequence(e.trajectory, e.rtgs, K, rng, e.counter);
}

}  // namespace odt
