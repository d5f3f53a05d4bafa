#pragma once

#include <omp.h>

#include <cstddef>
#include <cstdlib>
#include <string>

namespace splatpatch {

/// Worker count used by all parallel loops. Defaults to SPLATPATCH_THREADS,
/// then to the number of logical cores.
inline int& thread_count_slot() {
  static int count = [] {
    if (const char* env = std::getenv("SPLATPATCH_THREADS")) {
      try {
        int n = std::stoi(env);
        if (n > 0) return n;
      } catch (...) {
      }
    }
    return omp_get_num_procs();
  }();
  return count;
}

inline int thread_count() { return thread_count_slot(); }

inline void set_thread_count(int n) { thread_count_slot() = n > 0 ? n : omp_get_num_procs(); }

/// Runs body(i) for i in [0, n). Each index must write disjoint outputs so the
/// result does not depend on scheduling.
template <class Body>
void parallel_for(std::ptrdiff_t n, Body&& body) {
  const int threads = thread_count();
  if (threads <= 1 || n <= 1) {
    for (std::ptrdiff_t i = 0; i < n; ++i) body(i);
    return;
  }
#pragma omp parallel for schedule(dynamic, 1) num_threads(threads)
  for (std::ptrdiff_t i = 0; i < n; ++i) body(i);
}

}  // namespace splatpatch
