#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dskd/segnet.hpp"

namespace dskd {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<Real> values;
};

/// Self-describing binary container.
///
/// Layout: 8-byte magic "DSKDCKPT", u32 format version, u64 header length,
/// UTF-8 JSON header, then every array's values as little-endian IEEE-754
/// doubles in header order. The header's "arrays" field lists name and
/// shape for each array; everything else in it is caller metadata.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray& array(const std::string& name) const;
  bool has_array(const std::string& name) const;

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

/// Appends every parameter as "param/<name>" and records the network config
/// and init RNG state under meta["network"] / meta["rng_state"].
void store_network(Checkpoint& ckpt, const SegNetwork& net);
/// Rebuilds a trainable network from a checkpoint written by store_network.
SegNetwork load_network(const Checkpoint& ckpt);

}  // namespace dskd
