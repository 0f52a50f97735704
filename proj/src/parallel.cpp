#include "ipvrm/parallel.hpp"

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ipvrm {

void parallel_for(int n, int workers, const std::function<void(int begin, int end)>& fn) {
  if (n <= 0) return;
  const int chunks = std::clamp(workers, 1, n);
  if (chunks == 1) {
    fn(0, n);
    return;
  }
  std::exception_ptr first;
  std::mutex mu;
  auto run = [&](int begin, int end) {
    try {
      fn(begin, end);
    } catch (...) {
      std::lock_guard<std::mutex> lock(mu);
      if (!first) first = std::current_exception();
    }
  };
  std::vector<std::thread> threads;
  const int base = n / chunks, extra = n % chunks;
  int begin = 0;
  std::pair<int, int> own{0, 0};
  for (int c = 0; c < chunks; ++c) {
    const int end = begin + base + (c < extra ? 1 : 0);
    if (c == 0) {
      own = {begin, end};
    } else {
      threads.emplace_back(run, begin, end);
    }
    begin = end;
  }
  run(own.first, own.second);
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace ipvrm
