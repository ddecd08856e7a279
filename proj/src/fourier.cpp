#include "tsfed/fourier.hpp"

#include <fftw3.h>

#include <algorithm>
#include <mutex>

#include "tsfed/errors.hpp"

namespace tsfed::fourier {

namespace {

// FFTW planning is not thread-safe; execution on distinct buffers is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwBuffer {
  explicit FftwBuffer(std::size_t bytes) : ptr(fftw_malloc(bytes)) {
    if (!ptr) throw std::bad_alloc();
  }
  ~FftwBuffer() { fftw_free(ptr); }
  FftwBuffer(const FftwBuffer&) = delete;
  FftwBuffer& operator=(const FftwBuffer&) = delete;
  void* ptr;
};

struct Plan {
  explicit Plan(fftw_plan p) : plan(p) {}
  ~Plan() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
  }
  Plan(const Plan&) = delete;
  Plan& operator=(const Plan&) = delete;
  fftw_plan plan;
};

}  // namespace

std::vector<std::complex<double>> rfft(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n == 0) throw ContractError("rfft: empty input");
  const std::size_t bins = n / 2 + 1;
  FftwBuffer in(sizeof(double) * n);
  FftwBuffer out(sizeof(fftw_complex) * bins);
  auto* in_d = static_cast<double*>(in.ptr);
  auto* out_c = static_cast<fftw_complex*>(out.ptr);
  fftw_plan raw;
  {
    std::lock_guard lock(planner_mutex());
    raw = fftw_plan_dft_r2c_1d(static_cast<int>(n), in_d, out_c, FFTW_ESTIMATE);
  }
  Plan plan(raw);
  std::copy(x.begin(), x.end(), in_d);
  fftw_execute(plan.plan);
  std::vector<std::complex<double>> result(bins);
  for (std::size_t k = 0; k < bins; ++k) result[k] = {out_c[k][0], out_c[k][1]};
  return result;
}

std::vector<double> irfft(std::span<const std::complex<double>> bins, std::size_t n) {
  if (n == 0 || bins.size() != n / 2 + 1) throw ContractError("irfft: bin count does not match length");
  FftwBuffer in(sizeof(fftw_complex) * bins.size());
  FftwBuffer out(sizeof(double) * n);
  auto* in_c = static_cast<fftw_complex*>(in.ptr);
  auto* out_d = static_cast<double*>(out.ptr);
  fftw_plan raw;
  {
    std::lock_guard lock(planner_mutex());
    raw = fftw_plan_dft_c2r_1d(static_cast<int>(n), in_c, out_d, FFTW_ESTIMATE);
  }
  Plan plan(raw);
  // c2r overwrites its input, so the copy happens after planning.
  for (std::size_t k = 0; k < bins.size(); ++k) {
    in_c[k][0] = bins[k].real();
    in_c[k][1] = bins[k].imag();
  }
  fftw_execute(plan.plan);
  std::vector<double> result(out_d, out_d + n);
  const double inv = 1.0 / static_cast<double>(n);
  for (auto& v : result) v *= inv;
  return result;
}

}  // namespace tsfed::fourier
