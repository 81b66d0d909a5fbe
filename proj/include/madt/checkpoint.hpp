#pragma once

#include <map>
#include <string>
#include <vector>

#include "madt/tensor.hpp"

namespace madt {

// One named parameter section in a checkpoint file.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Checkpoint container: magic "MADT-CKPT-1", a JSON header carrying the
// model hyperparameters and the parameter index, then the flat
// little-endian float64 sections in index order.
inline constexpr const char* kCheckpointMagic = "MADT-CKPT-1\n";

void write_checkpoint(const std::string& path,
                      const std::map<std::string, std::string>& header_fields,
                      const std::vector<NamedTensor>& params);

struct LoadedCheckpoint {
  std::map<std::string, std::string> header_fields;
  std::vector<NamedTensor> params;

  const Tensor* find(const std::string& name) const;
};

LoadedCheckpoint read_checkpoint(const std::string& path);

// FNV-1a content hash of a file, for run provenance records.
uint64_t file_content_hash(const std::string& path);

}  // namespace madt
