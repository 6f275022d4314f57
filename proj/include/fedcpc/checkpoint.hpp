#pragma once

// Checkpoint file layout:
//
//   FEDCPC-CHECKPOINT 1\n
//   tensors <count>\n
//   <name> <rank> <dim>...\n          one line per parameter, layout order
//   end_header\n
//   <payload>                          row-major float64, little-endian
//   meta <byte count>\n<metadata>      free text (serialized run config)
//
// Federated and central runs of one architecture share the header bytes.

#include <string>
#include <string_view>

#include "fedcpc/cpc_model.hpp"

namespace fedcpc::cpc {

struct Checkpoint {
  ModelParams params;
  std::string metadata;
};

/// Everything up to and including "end_header\n".
std::string checkpoint_header(const ModelParams& params);

std::string serialize_checkpoint(const ModelParams& params, std::string_view metadata);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const ModelParams& params, std::string_view metadata);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace fedcpc::cpc
