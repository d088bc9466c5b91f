#pragma once

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stfusion {

// Process-wide worker count for the parallel kernels; 0 = library default.
void set_num_threads(int n);
int num_threads();

// Runs f(0..n-1). Results must be written to per-index slots so the
// outcome is identical for any thread count.
template <class F>
void parallel_for(int n, F&& f) {
  const int t = num_threads();
#ifdef _OPENMP
  if (t > 1 && !omp_in_parallel()) {
#pragma omp parallel for schedule(dynamic) num_threads(t)
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
#endif
  for (int i = 0; i < n; ++i) f(i);
}

// Serial reference for the parallel path; kept for equivalence tests.
template <class F>
void serial_for(int n, F&& f) {
  for (int i = 0; i < n; ++i) f(i);
}

}  // namespace stfusion
