#include "ddet/threading.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <algorithm>

namespace ddet {

namespace {
int g_threads = 1;
}

void set_num_threads(int n) {
    g_threads = std::max(1, n);
#ifdef _OPENMP
    omp_set_num_threads(g_threads);
#endif
}

int num_threads() { return g_threads; }

} // namespace ddet
