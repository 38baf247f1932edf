#include "modalpatch/membank.hpp"

#include <stdexcept>

namespace modalpatch::membank {

MemoryBank::MemoryBank(int capacity) : capacity_(capacity) {
  if (capacity < 1) throw std::runtime_error("MemoryBank: capacity must be >= 1");
}

void MemoryBank::push(const streams::FeatureMap& fm) {
  if (!entries_.empty() && fm.time_index != entries_.back().time_index + 1)
    throw std::runtime_error("MemoryBank: non-consecutive time_index push");
  entries_.push_back(fm);
  if (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
}

std::vector<const streams::FeatureMap*> MemoryBank::history() const {
  if (entries_.empty()) throw std::runtime_error("MemoryBank: history on empty bank");
  std::vector<const streams::FeatureMap*> out;
  out.reserve(static_cast<size_t>(capacity_));
  const int pad = capacity_ - static_cast<int>(entries_.size());
  for (int i = 0; i < pad; ++i) out.push_back(&entries_.front());
  for (const auto& e : entries_) out.push_back(&e);
  return out;
}

int MemoryBank::latest() const {
  if (entries_.empty()) throw std::runtime_error("MemoryBank: latest on empty bank");
  return entries_.back().time_index;
}

const streams::FeatureMap& MemoryBank::back() const {
  if (entries_.empty()) throw std::runtime_error("MemoryBank: back on empty bank");
  return entries_.back();
}

}  // namespace modalpatch::membank
