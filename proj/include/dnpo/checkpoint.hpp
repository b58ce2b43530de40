#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "dnpo/noise.hpp"
#include "dnpo/objective.hpp"

namespace dnpo {

// Persisted state of one training iteration. The noise head is present only
// for runs that train one; the optimizer accumulators always travel with the
// parameters they smooth.
struct IterationCheckpoint {
  int iteration = 0;
  ModelParams model;
  std::optional<NoiseParams> noise;
  OptimizerState opt;
  uint64_t rng_state = 0;
  uint64_t config_digest = 0;
};

// Container layout: magic "DNPOCKPT", u32 format version, u64 header length,
// JSON header (sorted keys), then the flat arrays the header declares, each
// row-major float64 little-endian. Saving a loaded checkpoint reproduces the
// file byte for byte.
void save_checkpoint(const std::string& path, const IterationCheckpoint& ckpt);
IterationCheckpoint load_checkpoint(const std::string& path);

}  // namespace dnpo
