#pragma once

#include <array>
#include <cstdint>

#include "mmlqg/types.hpp"

namespace mmlqg {

// Counter-based random numbers (Philox 4x32-10). Every draw is a pure
// function of (seed, path, source, type, rank, step, lane), which gives us
// reproducible, sliceable streams: adding agents or paths never perturbs the
// noise seen by existing ones, and paths can be generated on any thread in
// any order with bitwise-identical results.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key);

enum class NoiseSource : std::uint32_t {
  MajorProcess = 1,
  MajorMeasurement = 2,
  MinorProcess = 3,
  MinorMeasurement = 4,
  InitialState = 5,
  TypeDraw = 6,
};

class GaussianStream {
 public:
  GaussianStream(std::uint64_t seed, std::uint64_t path, NoiseSource source,
                 std::uint32_t type = 0, std::uint32_t rank_in_type = 0);

  // Standard normal for (step, lane); lanes index vector components.
  double normal(std::uint64_t step, std::uint32_t lane) const;

  // dim iid standard normals for one step.
  Vector normals(std::uint64_t step, int dim) const;

  // Uniform in (0, 1).
  double uniform(std::uint64_t step, std::uint32_t lane) const;

 private:
  std::array<std::uint32_t, 2> key_;
};

}  // namespace mmlqg
