#pragma once

#include <complex>
#include <span>
#include <vector>

namespace tsfed::fourier {

// Unnormalized real DFT (n/2 + 1 bins) and its inverse; irfft(rfft(x), n) == x
// up to rounding.
std::vector<std::complex<double>> rfft(std::span<const double> x);
std::vector<double> irfft(std::span<const std::complex<double>> bins, std::size_t n);

}  // namespace tsfed::fourier
