#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

#include "oodguard/errors.hpp"

namespace oodguard {

// Worker threads default to the hardware count; the OODGUARD_THREADS
// environment variable caps them. Invalid values are a configuration error.
inline unsigned worker_count() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    const char* env = std::getenv("OODGUARD_THREADS");
    if (env == nullptr || *env == '\0') return hw;
    char* end = nullptr;
    const long requested = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || requested < 1) {
        raise(Errc::bad_config, "OODGUARD_THREADS must be a positive integer");
    }
    return static_cast<unsigned>(std::min<long>(requested, hw));
}

// Runs body(i) for i in [0, n) across worker threads in disjoint contiguous
// chunks. The body must write only to its own index and must not throw;
// validate inputs before entering the loop.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& body) {
    const std::size_t workers = std::min<std::size_t>(worker_count(), n == 0 ? 1 : n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace oodguard
