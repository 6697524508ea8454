#pragma once

namespace voxseg {

/// Worker threads used inside matrix kernels (values below 1 mean 1).
void set_num_threads(int threads);

}  // namespace voxseg
