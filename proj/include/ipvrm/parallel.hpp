#ifndef IPVRM_PARALLEL_HPP_
#define IPVRM_PARALLEL_HPP_

#include <functional>

namespace ipvrm {

// Splits [0, n) into at most `workers` contiguous chunks and runs fn(begin,
// end) on each, the first chunk on the calling thread. The first exception
// thrown by any chunk is rethrown after all chunks finish.
void parallel_for(int n, int workers, const std::function<void(int begin, int end)>& fn);

}  // namespace ipvrm

#endif  // IPVRM_PARALLEL_HPP_
