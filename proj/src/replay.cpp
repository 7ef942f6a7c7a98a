#include "r3l/replay.hpp"

#include <cstring>
#include <stdexcept>

namespace r3l {

namespace {

struct Fnv {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= c[i];
      h *= 1099511628211ULL;
    }
  }
  void vec(const VectorF& v) {
    const auto n = static_cast<std::uint64_t>(v.size());
    bytes(&n, sizeof n);
    bytes(v.data(), sizeof(float) * static_cast<std::size_t>(v.size()));
  }
  void obs(const env::Observation& o) {
    vec(o.state);
    vec(o.proprio);
    const std::uint8_t has = o.image ? 1 : 0;
    bytes(&has, 1);
    if (o.image) bytes(o.image->pixels.data(), o.image->pixels.size());
  }
};

}  // namespace

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
}

void ReplayBuffer::add(Transition t) {
  if (items_.size() < capacity_) {
    items_.push_back(std::move(t));
    serials_.push_back(total_added_);
  } else {
    items_[cursor_] = std::move(t);
    serials_[cursor_] = total_added_;
  }
  cursor_ = (cursor_ + 1) % capacity_;
  ++total_added_;
}

ReplayBuffer ReplayBuffer::from_slots(std::size_t capacity, std::size_t cursor, std::uint64_t total_added,
                                      std::vector<Transition> items, std::vector<std::uint64_t> serials) {
  ReplayBuffer b(capacity);
  if (items.size() > capacity || serials.size() != items.size() || cursor >= capacity ||
      total_added < items.size() || (items.size() < capacity && cursor != items.size() % capacity))
    throw std::invalid_argument("inconsistent replay buffer layout");
  b.cursor_ = cursor;
  b.total_added_ = total_added;
  b.items_ = std::move(items);
  b.serials_ = std::move(serials);
  return b;
}

std::size_t ReplayBuffer::newest_slot() const {
  if (items_.empty()) throw std::logic_error("replay buffer is empty");
  return (cursor_ + capacity_ - 1) % capacity_;
}

std::vector<std::size_t> ReplayBuffer::sample(std::size_t n, std::mt19937_64& rng) const {
  if (items_.empty()) throw std::logic_error("cannot sample from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
  std::vector<std::size_t> out(n);
  for (auto& s : out) s = pick(rng);
  return out;
}

std::uint64_t ReplayBuffer::content_hash() const {
  Fnv f;
  for (const auto& t : items_) {
    f.obs(t.obs);
    f.vec(t.action);
    f.obs(t.next_obs);
    f.bytes(&t.step_index, sizeof t.step_index);
    f.vec(t.obs_features);
    f.vec(t.next_obs_features);
  }
  return f.h;
}

void ReplayBuffer::clear() {
  items_.clear();
  serials_.clear();
  cursor_ = 0;
  total_added_ = 0;
}

MatrixF stack_observations(std::span<const env::Observation* const> obs, bool with_proprio) {
  if (obs.empty()) return {};
  const int core = obs.front()->core_size();
  const int extra = with_proprio ? static_cast<int>(obs.front()->proprio.size()) : 0;
  MatrixF out(core + extra, static_cast<Eigen::Index>(obs.size()));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    float* col = out.col(static_cast<Eigen::Index>(i)).data();
    obs[i]->write_core(col);
    if (extra > 0) std::memcpy(col + core, obs[i]->proprio.data(), sizeof(float) * static_cast<std::size_t>(extra));
  }
  return out;
}

MatrixF stack_observations(const std::vector<env::Observation>& obs, bool with_proprio) {
  std::vector<const env::Observation*> ptrs;
  ptrs.reserve(obs.size());
  for (const auto& o : obs) ptrs.push_back(&o);
  return stack_observations(ptrs, with_proprio);
}

}  // namespace r3l
