#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tsfed {

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from an ordered key tuple, e.g.
// (run seed, round, client id). Distinct tuples give unrelated streams.
constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> keys) {
  std::uint64_t h = 0x2545f4914f6cdd1dULL;
  for (auto k : keys) h = mix64(h ^ mix64(k));
  return h;
}

inline std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> keys) {
  return std::mt19937_64(derive_seed(keys));
}

// Stream tags so that different consumers of one seed never share a stream.
enum class Stream : std::uint64_t {
  kData = 1,
  kHoldout,
  kInit,
  kSampling,
  kLocalTrain,
  kCoreset,
  kFourier,
  kServerTune,
  kEval,
};

inline std::uint64_t tag(Stream s) { return static_cast<std::uint64_t>(s); }

}  // namespace tsfed
