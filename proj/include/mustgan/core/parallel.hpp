#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace mustgan {

namespace detail {

inline std::size_t default_thread_count() {
  if (const char* env = std::getenv("MUSTGAN_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n >= 1) return static_cast<std::size_t>(n);
    } catch (const std::exception&) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

inline std::atomic<std::size_t>& thread_count_slot() {
  static std::atomic<std::size_t> slot{default_thread_count()};
  return slot;
}

}  // namespace detail

/// Upper bound on worker threads used inside a single kernel call.
inline std::size_t num_threads() { return detail::thread_count_slot().load(); }

inline void set_num_threads(std::size_t n) { detail::thread_count_slot().store(std::max<std::size_t>(1, n)); }

/// Scoped override of the kernel thread count; `SequentialScope{}` forces one thread.
class ThreadCountScope {
 public:
  explicit ThreadCountScope(std::size_t n) : previous_(num_threads()) { set_num_threads(n); }
  ~ThreadCountScope() { set_num_threads(previous_); }
  ThreadCountScope(const ThreadCountScope&) = delete;
  ThreadCountScope& operator=(const ThreadCountScope&) = delete;

 private:
  std::size_t previous_;
};

struct SequentialScope : ThreadCountScope {
  SequentialScope() : ThreadCountScope(1) {}
};

/// Runs fn(lo, hi) over disjoint chunks of [begin, end). Each index is owned by exactly
/// one chunk, so kernels that write per-index results stay bit-identical for any thread count.
template <class Fn>
void parallel_for(std::size_t begin, std::size_t end, std::size_t min_chunk, Fn&& fn) {
  if (end <= begin) return;
  const std::size_t n = end - begin;
  const std::size_t workers = std::min(num_threads(), std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
  if (workers <= 1) {
    fn(begin, end);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const std::size_t step = (n + workers - 1) / workers;
  auto run = [&](std::size_t lo, std::size_t hi) {
    try {
      fn(lo, hi);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t lo = begin + w * step;
    const std::size_t hi = std::min(end, lo + step);
    if (lo < hi) pool.emplace_back(run, lo, hi);
  }
  run(begin, std::min(end, begin + step));
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace mustgan
