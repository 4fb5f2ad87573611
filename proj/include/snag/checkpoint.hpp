#pragma once

#include <json.hpp>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "snag/tensor.hpp"

namespace snag {

// Checkpoint format, version 1:
//   magic "SNAGCKP1" | u64 header length | header JSON | raw payload
// The header lists tensor names, shapes, dtype and payload offsets plus an
// arbitrary "meta" object (model config, training provenance). Payload is
// little-endian float64, row-major, in header order.
struct Checkpoint {
    nlohmann::json meta;
    std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace snag
