#pragma once

#include <functional>

namespace modalpatch {

// Worker count: MODALPATCH_THREADS caps it, default is all cores.
int worker_count();

// Runs fn(i) for i in [0, n). Work is split across worker_count() threads;
// results must be written to disjoint slots so the caller can reduce them
// in index order afterwards (keeps every aggregate bitwise deterministic).
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace modalpatch
