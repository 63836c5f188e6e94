#pragma once

namespace fmbff {

// Caps OpenMP (and BLAS) threads at FMBFF_THREADS when that variable is set.
// Returns the thread count in effect.
int configure_threads_from_env();

void set_num_threads(int n);
int max_threads();
int thread_index();

}  // namespace fmbff
