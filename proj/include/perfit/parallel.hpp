#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace perfit {

// Runs independent tasks on up to `threads` workers. Tasks write to their own
// output slots; callers reduce afterwards in a fixed order, so results do not
// depend on the thread count.
struct Executor {
  std::size_t threads = 1;

  template <typename F>
  void for_each(std::size_t n, F&& fn) const {
    const std::size_t workers = std::min(threads, n);
    if (workers <= 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mu;
    auto loop = [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mu);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    {
      std::vector<std::jthread> pool;
      pool.reserve(workers - 1);
      for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(loop);
      loop();
    }
    if (failure) std::rethrow_exception(failure);
  }
};

}  // namespace perfit
