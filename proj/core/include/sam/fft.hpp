#pragma once

#include <complex>
#include <vector>

#include "sam/grid.hpp"

namespace sam {

/// Forward DFT of one real field (layout = grid C-order). Plans are cached
/// per grid and created with FFTW_ESTIMATE, so planning is deterministic.
std::vector<std::complex<double>> fft_forward(const Grid& grid, const double* field);

/// Inverse DFT, normalised by 1/M; writes the real part to out.
void fft_inverse(const Grid& grid, const std::vector<std::complex<double>>& spec, double* out);

} // namespace sam
