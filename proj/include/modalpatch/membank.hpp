#pragma once

// Per-modality rolling history of the most recent feature maps.  The bank
// keeps at most `capacity` entries with strictly consecutive time indexes;
// pushing a non-consecutive frame is a caller bug and throws.  history()
// returns exactly `capacity` maps (oldest first) by repeating the oldest
// stored entry while the bank is still warming up.

#include <deque>
#include <vector>

#include "modalpatch/streams.hpp"

namespace modalpatch::membank {

class MemoryBank {
 public:
  explicit MemoryBank(int capacity);

  // Appends one frame; evicts the oldest once full.  The first push accepts
  // any time index; afterwards time_index must be latest()+1.
  void push(const streams::FeatureMap& fm);

  // Oldest-first window of exactly `capacity` entries.  Until the bank has
  // seen that many frames the oldest entry is repeated at the front.
  // Throws when the bank is empty.
  std::vector<const streams::FeatureMap*> history() const;

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }

  // Time index of the newest entry; throws when empty.
  int latest() const;

  // Newest entry; throws when empty.
  const streams::FeatureMap& back() const;

  void clear() { entries_.clear(); }

 private:
  int capacity_;
  std::deque<streams::FeatureMap> entries_;
};

}  // namespace modalpatch::membank
