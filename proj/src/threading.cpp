#include "gtsa/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace gtsa {

int thread_count() {
  static int cached = [] {
    const char* env = std::getenv("GTSA_THREADS");
    long n = 0;
    if (env && *env) n = std::strtol(env, nullptr, 10);
    if (n <= 0) n = static_cast<long>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    return static_cast<int>(n);
  }();
  return cached;
}

namespace {

// Persistent pool; work items are (range, fn) pairs claimed by atomic chunks.
class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i)
      threads_.emplace_back([this] { worker_loop(); });
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(int64_t begin, int64_t end, int64_t chunk,
           const std::function<void(int64_t, int64_t)>& fn) {
    std::unique_lock<std::mutex> lk(mu_);
    fn_ = &fn;
    next_.store(begin, std::memory_order_relaxed);
    end_ = end;
    chunk_ = chunk;
    pending_ = static_cast<int>(threads_.size());
    generation_++;
    cv_.notify_all();
    int64_t my_gen = generation_;
    lk.unlock();

    drain();  // caller participates

    lk.lock();
    done_cv_.wait(lk, [&] { return generation_ == my_gen && pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  void drain() {
    const auto* fn = fn_;
    for (;;) {
      int64_t lo = next_.fetch_add(chunk_, std::memory_order_relaxed);
      if (lo >= end_) break;
      int64_t hi = std::min(lo + chunk_, end_);
      (*fn)(lo, hi);
    }
  }

  void worker_loop() {
    int64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      lk.unlock();

      drain();

      lk.lock();
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  const std::function<void(int64_t, int64_t)>* fn_ = nullptr;
  std::atomic<int64_t> next_{0};
  int64_t end_ = 0, chunk_ = 1, generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
};

Pool* pool_instance() {
  static Pool* pool = new Pool(thread_count() - 1);
  return pool;
}

}  // namespace

void parallel_for_chunks(int64_t begin, int64_t end,
                         const std::function<void(int64_t, int64_t)>& fn) {
  if (begin >= end) return;
  int workers = thread_count();
  int64_t n = end - begin;
  if (workers <= 1 || n < 2) {
    fn(begin, end);
    return;
  }
  int64_t chunk = std::max<int64_t>(1, n / (4 * workers));
  pool_instance()->run(begin, end, chunk, fn);
}

void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t)>& fn) {
  parallel_for_chunks(begin, end, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace gtsa
