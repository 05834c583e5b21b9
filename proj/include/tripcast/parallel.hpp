#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace tripcast {

/// Worker parallelism cap: TRIPCAST_THREADS if set, else hardware concurrency.
inline int effective_threads() {
    if (const char* env = std::getenv("TRIPCAST_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
}

/// Runs fn(begin, end, thread_index) over a static contiguous partition of
/// [0, n). The partition depends only on n and the thread count, so results
/// reduced in thread order are reproducible run to run. The first worker
/// exception (by thread index) is rethrown after all threads joined.
template <class F>
void parallel_chunks(int n, int threads, F&& fn) {
    threads = std::clamp(threads, 1, std::max(n, 1));
    if (threads == 1 || n <= 1) {
        fn(0, n, 0);
        return;
    }
    const int chunk = (n + threads - 1) / threads;
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    auto run = [&](int begin, int end, int tid) {
        try {
            fn(begin, end, tid);
        } catch (...) {
            errors[tid] = std::current_exception();
        }
    };
    for (int tid = 1; tid < threads; ++tid) {
        const int begin = tid * chunk, end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(run, begin, end, tid);
    }
    run(0, std::min(chunk, n), 0);
    for (auto& t : pool) t.join();
    for (auto& err : errors) {
        if (err) std::rethrow_exception(err);
    }
}

}  // namespace tripcast
