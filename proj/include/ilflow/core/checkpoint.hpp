#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ilflow/core/tensor.hpp"

namespace ilflow {

// Parameter checkpoint: one file holding a single-line JSON manifest
// (names, shapes, dtype tag, format version) followed by raw little-endian
// float64 buffers, row-major, in manifest order.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Matrix*>>& entries);

std::map<std::string, Matrix> load_checkpoint(const std::string& path);

// Restores into an existing state map; every entry must be present with a
// matching shape.
void load_checkpoint_into(const std::string& path,
                          const std::vector<std::pair<std::string, Matrix*>>& entries);

}  // namespace ilflow
