#pragma once

#include <cstddef>
#include <functional>

namespace ntklab {

/// Worker count: LAB_THREADS if set to a positive integer, else the hardware count.
std::size_t worker_count();

/// Runs body(i) for i in [0, n). Each index must write only its own output
/// slot; callers reduce those slots in index order afterwards, so results do
/// not depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace ntklab
