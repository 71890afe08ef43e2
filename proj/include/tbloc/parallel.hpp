#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace tbloc {

// Thread count from TBLOC_THREADS, else 1.
inline int default_threads() {
    if (const char* s = std::getenv("TBLOC_THREADS")) {
        try {
            const int n = std::stoi(s);
            if (n >= 1) return n;
        } catch (...) {
        }
    }
    return 1;
}

// Runs f(i) for i in [0, n). Tasks are strided over workers, so each index is
// handled by exactly one thread; callers write results into slot i and reduce
// afterwards in index order. The first exception thrown by any task is
// rethrown on the calling thread.
template <class F>
void parallel_for(std::size_t n, int threads, F&& f) {
    const std::size_t t = std::min<std::size_t>(std::max(threads, 1), n);
    if (t <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::exception_ptr err;
    std::mutex m;
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (std::size_t w = 0; w < t; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += t) {
                {
                    std::lock_guard<std::mutex> lock(m);
                    if (err) return;
                }
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(m);
                    if (!err) err = std::current_exception();
                    return;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace tbloc
