#pragma once

#include <iosfwd>

#include "fednpr/federation.hpp"

namespace fednpr {

// Round-payload dump of one ModelDelta, for logging and inspection.
//
//   FEDNPR-DELTA-v1
//   sample_count <n>
//   tensors <count>
//   <path> <rows> <cols>
//   <rows*cols values, row-major, %.17g, space separated>
//   ...
//
// Biases are written with cols = 1. Values round-trip exactly.
void write_delta(std::ostream& os, const ModelDelta& delta);
ModelDelta read_delta(std::istream& is);

}  // namespace fednpr
