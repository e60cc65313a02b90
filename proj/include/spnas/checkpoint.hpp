#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "spnas/tensor.hpp"

namespace spnas {

// Binary layout: "SPNASCKP", u32 version, u64 manifest length, manifest JSON,
// then every array's values as little-endian f64 in manifest order. The
// manifest lists {name, shape, offset, count} per array plus caller metadata
// under "meta".
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Tensor value;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedArray> arrays;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace spnas
