#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "r3l/envsim.hpp"
#include "r3l/nn/param_set.hpp"

namespace r3l {

using nn::MatrixF;
using nn::VectorF;

/// One environment step. There is deliberately no reward: rewards are
/// recomputed from the current reward networks every time a batch is drawn.
struct Transition {
  env::Observation obs;
  env::Action action;
  env::Observation next_obs;
  std::int64_t step_index = 0;
  /// Fixed encodings of obs/next_obs for agents that read a frozen
  /// representation; empty when the agent reads the raw observation.
  VectorF obs_features;
  VectorF next_obs_features;
  /// Simulator state behind next_obs. Only ground-truth reward cells and
  /// training metrics read it; learned-reward agents never see it.
  env::EnvState next_state;
};

/// Fixed-capacity FIFO ring of transitions with uniform sampling.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 200000);

  void add(Transition t);

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  /// Total number of insertions so far, including evicted ones.
  std::uint64_t total_added() const { return total_added_; }

  /// Slots are positions in [0, size()); eviction overwrites the oldest slot.
  const Transition& operator[](std::size_t slot) const { return items_[slot]; }
  /// Insertion serial of the transition currently held in `slot`. Caches
  /// keyed by slot use it to notice eviction.
  std::uint64_t serial(std::size_t slot) const { return serials_[slot]; }
  /// Slot of the most recent insertion.
  std::size_t newest_slot() const;

  /// `n` slots drawn uniformly with replacement.
  std::vector<std::size_t> sample(std::size_t n, std::mt19937_64& rng) const;

  /// Hash over every stored byte that defines the contents (observations,
  /// actions, features, step indices).
  std::uint64_t content_hash() const;

  void clear();

  /// Next slot to be written once the buffer is full.
  std::size_t cursor() const { return cursor_; }
  /// Rebuilds a buffer from the slot contents of a saved one.
  static ReplayBuffer from_slots(std::size_t capacity, std::size_t cursor, std::uint64_t total_added,
                                 std::vector<Transition> items, std::vector<std::uint64_t> serials);

 private:
  std::size_t capacity_;
  std::size_t cursor_ = 0;
  std::uint64_t total_added_ = 0;
  std::vector<Transition> items_;
  std::vector<std::uint64_t> serials_;
};

/// Column-stacked core channels (state vector or image) of `obs`, with the
/// proprio vector appended when `with_proprio` is set.
MatrixF stack_observations(std::span<const env::Observation* const> obs, bool with_proprio);
MatrixF stack_observations(const std::vector<env::Observation>& obs, bool with_proprio);

}  // namespace r3l
