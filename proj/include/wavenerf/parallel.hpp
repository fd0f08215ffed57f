#pragma once

#include <cstdint>
#include <thread>
#include <utility>
#include <vector>

namespace wavenerf {

// Global worker count used by parallel_for. Defaults to
// hardware_concurrency; the CLI pins it via --threads.
int num_threads();
void set_num_threads(int n);

// Splits [0, n) into one contiguous chunk per worker and runs
// fn(begin, end) on each. Chunk boundaries depend only on (n, worker
// count), so any computation whose elements are independent is
// bit-deterministic regardless of scheduling. `grain` is the element
// count below which spawning threads is not worth it; pass a small value
// when each element is expensive.
template <typename F>
void parallel_for(int64_t n, F&& fn, int64_t grain = 4096) {
    if (n <= 0) return;
    int workers = num_threads();
    if (workers <= 1 || n < grain) {
        fn(int64_t{0}, n);
        return;
    }
    if (workers > n) workers = static_cast<int>(n);
    const int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers - 1));
    for (int t = 1; t < workers; ++t) {
        const int64_t begin = t * chunk;
        if (begin >= n) break;
        const int64_t end = std::min(n, begin + chunk);
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    fn(int64_t{0}, std::min(n, chunk));
    for (auto& th : pool) th.join();
}

}  // namespace wavenerf
