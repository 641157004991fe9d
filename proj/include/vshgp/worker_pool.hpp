#pragma once

#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "vshgp/error.hpp"

namespace vshgp {

/// Fixed set of threads that run index-parallel loops. The calling thread
/// takes part, so a pool of size 1 runs everything inline.
class WorkerPool {
public:
  explicit WorkerPool(std::size_t workers = default_workers()) {
    if (workers == 0) {
      throw ConfigError("worker pool: need at least one worker");
    }
    for (std::size_t k = 1; k < workers; ++k) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  WorkerPool(const WorkerPool &) = delete;
  WorkerPool &operator=(const WorkerPool &) = delete;

  ~WorkerPool() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      stop_ = true;
    }
    wake_.notify_all();
    for (auto &t : threads_) t.join();
  }

  std::size_t size() const { return threads_.size() + 1; }

  static std::size_t default_workers() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : hc;
  }

  /// Runs body(i) for i in [0, count). If any call throws, the exception of
  /// the lowest failing index is rethrown after all calls have finished.
  void parallel_for(std::size_t count, const std::function<void(std::size_t)> &body) {
    if (count == 0) return;
    std::vector<std::exception_ptr> errors(count);
    if (threads_.empty() || count == 1) {
      for (std::size_t i = 0; i < count; ++i) {
        try {
          body(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    } else {
      std::unique_lock<std::mutex> lock(mutex_);
      job_ = {&body, &errors, count};
      next_.store(0);
      pending_ = threads_.size();
      ++generation_;
      lock.unlock();
      wake_.notify_all();
      run_items();
      lock.lock();
      done_.wait(lock, [this] { return pending_ == 0; });
      job_ = {};
    }
    for (auto &e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

private:
  struct Job {
    const std::function<void(std::size_t)> *body = nullptr;
    std::vector<std::exception_ptr> *errors = nullptr;
    std::size_t count = 0;
  };

  void run_items() {
    while (true) {
      const std::size_t i = next_.fetch_add(1);
      if (i >= job_.count) break;
      try {
        (*job_.body)(i);
      } catch (...) {
        (*job_.errors)[i] = std::current_exception();
      }
    }
  }

  void worker_loop() {
    std::size_t seen = 0;
    while (true) {
      {
        std::unique_lock<std::mutex> lock(mutex_);
        wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
      }
      run_items();
      {
        std::lock_guard<std::mutex> lock(mutex_);
        if (--pending_ == 0) done_.notify_one();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  Job job_;
  std::atomic<std::size_t> next_{0};
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
};

} // namespace vshgp
