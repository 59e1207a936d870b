#pragma once

namespace ddet {

// Process-wide worker-thread count used by the OpenMP kernels.
// All kernels compute each output element with a fixed serial accumulation
// order, so results are bit-identical for any thread count.
void set_num_threads(int n);
int num_threads();

} // namespace ddet
