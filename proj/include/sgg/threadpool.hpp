#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace sgg {

// Static-partition worker pool. Every parallel_for splits [0, n) into one
// contiguous chunk per worker, so each output index is computed by exactly
// one thread with a fixed iteration order inside the chunk. Results are
// therefore bitwise identical for any thread count, which is what lets
// training and evaluation stay reproducible while still using all cores.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  void set_threads(int n) {
    if (n < 1) n = 1;
    std::lock_guard<std::mutex> outer(api_mutex_);
    stop_workers();
    threads_ = n;
    start_workers();
  }

  int threads() const { return threads_; }

  // fn(begin, end) is invoked on disjoint ranges covering [0, n).
  // Nested calls (from inside a worker chunk) run inline; nesting would
  // deadlock on the region lock and inline execution is equally
  // deterministic.
  void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
    if (n == 0) return;
    if (tl_in_region()) {
      fn(0, n);
      return;
    }
    std::lock_guard<std::mutex> outer(api_mutex_);
    const int workers = threads_;
    if (workers <= 1 || n == 1) {
      RegionGuard guard;
      fn(0, n);
      return;
    }
    const size_t chunk = (n + workers - 1) / workers;
    {
      std::unique_lock<std::mutex> lk(mutex_);
      job_fn_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      pending_ = 0;
      for (int t = 1; t < workers; ++t) {
        if (size_t(t) * chunk >= n) break;
        ++pending_;
      }
      generation_++;
      cv_.notify_all();
    }
    {
      RegionGuard guard;
      fn(0, std::min(chunk, n));
    }
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() { start_workers(); }

  static bool& tl_in_region() {
    thread_local bool flag = false;
    return flag;
  }

  struct RegionGuard {
    RegionGuard() { tl_in_region() = true; }
    ~RegionGuard() { tl_in_region() = false; }
  };

  void start_workers() {
    stopping_ = false;
    for (int t = 1; t < threads_; ++t) {
      workers_.emplace_back([this, t] { worker_loop(t); });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      stopping_ = true;
      generation_++;
      cv_.notify_all();
    }
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void worker_loop(int id) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(size_t, size_t)>* fn = nullptr;
      size_t begin = 0, end = 0;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
        if (stopping_) return;
        begin = size_t(id) * job_chunk_;
        if (!job_fn_ || begin >= job_n_) continue;
        end = std::min(begin + job_chunk_, job_n_);
        fn = job_fn_;
      }
      {
        RegionGuard guard;
        (*fn)(begin, end);
      }
      {
        std::lock_guard<std::mutex> lk(mutex_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex api_mutex_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> workers_;
  const std::function<void(size_t, size_t)>* job_fn_ = nullptr;
  size_t job_n_ = 0;
  size_t job_chunk_ = 0;
  int pending_ = 0;
  uint64_t generation_ = 0;
  bool stopping_ = false;
  int threads_ = 1;
};

inline void set_num_threads(int n) { ThreadPool::instance().set_threads(n); }

inline void parallel_for(size_t n, const std::function<void(size_t, size_t)>& fn) {
  ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace sgg
