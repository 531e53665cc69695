#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace memaudit {

// Persistent thread pool with deterministic static partitioning. Work items
// never share output locations, so results are independent of the thread
// count; parallel_for from inside a worker runs inline to avoid deadlock.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    // Global knob wired to the CLI --threads flag. 0 = hardware default.
    static void set_max_threads(int n) { max_threads_override() = n; }
    static int max_threads() {
        int n = max_threads_override();
        if (n > 0) return n;
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : static_cast<int>(hw);
    }

    // Runs fn(i) for i in [begin, end). Chunks are contiguous index ranges.
    void parallel_for(std::int64_t begin, std::int64_t end,
                      const std::function<void(std::int64_t)>& fn) {
        const std::int64_t n = end - begin;
        if (n <= 0) return;
        int workers = max_threads();
        if (workers <= 1 || n == 1 || in_worker_) {
            for (std::int64_t i = begin; i < end; ++i) fn(i);
            return;
        }
        ensure_started(workers - 1);
        if (threads_.empty()) {
            for (std::int64_t i = begin; i < end; ++i) fn(i);
            return;
        }

        const int parts = static_cast<int>(
            std::min<std::int64_t>(n, static_cast<std::int64_t>(threads_.size()) + 1));
        std::unique_lock<std::mutex> lock(mu_);
        job_fn_ = &fn;
        job_begin_ = begin;
        job_end_ = end;
        job_parts_ = parts;
        job_next_part_ = 0;
        job_done_parts_ = 0;
        ++job_id_;
        cv_work_.notify_all();

        // The caller also works: claim parts until none remain.
        while (true) {
            int part = job_next_part_;
            if (part >= job_parts_) break;
            job_next_part_ = part + 1;
            lock.unlock();
            run_part(begin, end, part, parts, fn);
            lock.lock();
            ++job_done_parts_;
        }
        cv_done_.wait(lock, [&] { return job_done_parts_ == job_parts_; });
        job_fn_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
            cv_work_.notify_all();
        }
        for (auto& t : threads_) t.join();
    }

private:
    ThreadPool() = default;

    static int& max_threads_override() {
        static int v = 0;
        return v;
    }

    void ensure_started(int n_workers) {
        std::lock_guard<std::mutex> lock(mu_);
        while (static_cast<int>(threads_.size()) < n_workers) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    void run_part(std::int64_t begin, std::int64_t end, int part, int parts,
                  const std::function<void(std::int64_t)>& fn) {
        const std::int64_t n = end - begin;
        const std::int64_t lo = begin + n * part / parts;
        const std::int64_t hi = begin + n * (part + 1) / parts;
        in_worker_ = true;
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
        in_worker_ = false;
    }

    void worker_loop() {
        std::uint64_t seen_job = 0;
        std::unique_lock<std::mutex> lock(mu_);
        while (true) {
            cv_work_.wait(lock, [&] { return stop_ || (job_fn_ && job_id_ != seen_job); });
            if (stop_) return;
            seen_job = job_id_;
            while (job_fn_ && job_next_part_ < job_parts_) {
                int part = job_next_part_++;
                auto* fn = job_fn_;
                std::int64_t b = job_begin_, e = job_end_;
                int parts = job_parts_;
                lock.unlock();
                run_part(b, e, part, parts, *fn);
                lock.lock();
                if (++job_done_parts_ == job_parts_) cv_done_.notify_all();
            }
        }
    }

    std::mutex mu_;
    std::condition_variable cv_work_;
    std::condition_variable cv_done_;
    std::vector<std::thread> threads_;
    bool stop_ = false;

    const std::function<void(std::int64_t)>* job_fn_ = nullptr;
    std::int64_t job_begin_ = 0, job_end_ = 0;
    int job_parts_ = 0;
    int job_next_part_ = 0;
    int job_done_parts_ = 0;
    std::uint64_t job_id_ = 0;

    static thread_local bool in_worker_;
};

inline thread_local bool ThreadPool::in_worker_ = false;

inline void parallel_for(std::int64_t begin, std::int64_t end,
                         const std::function<void(std::int64_t)>& fn) {
    ThreadPool::instance().parallel_for(begin, end, fn);
}

}  // namespace memaudit
