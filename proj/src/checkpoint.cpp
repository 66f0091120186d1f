#include "dskd/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace dskd {
namespace {

constexpr char kMagic[8] = {'D', 'S', 'K', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::istream& in, T& v, const char* what) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
}

}  // namespace

const NamedArray& Checkpoint::array(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw CheckpointError("checkpoint has no array '" + name + "'");
}

bool Checkpoint::has_array(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  nlohmann::json header = meta;
  header["arrays"] = nlohmann::json::array();
  for (const auto& a : arrays) {
    if (shape_numel(a.shape) != a.values.size()) {
      throw CheckpointError("array '" + a.name + "' shape does not match its length");
    }
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  out.write(kMagic, sizeof(kMagic));
  write_pod(out, kVersion);
  write_pod(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& a : arrays) {
    out.write(reinterpret_cast<const char*>(a.values.data()),
              static_cast<std::streamsize>(a.values.size() * sizeof(Real)));
  }
  if (!out) throw CheckpointError("write failed for '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("'" + path.string() + "' is not a checkpoint (bad magic)");
  }
  std::uint32_t version = 0;
  read_pod(in, version, "version");
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  std::uint64_t header_len = 0;
  read_pod(in, header_len, "header length");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw CheckpointError("checkpoint truncated in header");

  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  for (const auto& entry : ckpt.meta.at("arrays")) {
    NamedArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<Shape>();
    a.values.resize(shape_numel(a.shape));
    in.read(reinterpret_cast<char*>(a.values.data()),
            static_cast<std::streamsize>(a.values.size() * sizeof(Real)));
    if (!in) throw CheckpointError("checkpoint truncated in array '" + a.name + "'");
    ckpt.arrays.push_back(std::move(a));
  }
  ckpt.meta.erase("arrays");
  return ckpt;
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = {{"depth", c.depth},
       {"base_channels", c.base_channels},
       {"in_channels", c.in_channels},
       {"height", c.height},
       {"width", c.width}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.depth = j.at("depth").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.in_channels = j.value("in_channels", 1);
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
}

void store_network(Checkpoint& ckpt, const SegNetwork& net) {
  ckpt.meta["network"] = net.config();
  ckpt.meta["rng_state"] = net.init_rng_state();
  for (const auto& p : net.parameters()) {
    auto values = p.value.data();
    ckpt.arrays.push_back(
        {"param/" + p.name, p.value.shape(), std::vector<Real>(values.begin(), values.end())});
  }
}

SegNetwork load_network(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("network")) throw CheckpointError("checkpoint has no network config");
  SegNetwork net(ckpt.meta.at("network").get<NetworkConfig>());
  for (auto& p : net.parameters()) {
    const auto& a = ckpt.array("param/" + p.name);
    if (a.shape != p.value.shape()) {
      throw CheckpointError("parameter '" + p.name + "' has shape " + shape_str(a.shape) +
                            ", expected " + shape_str(p.value.shape()));
    }
    p.value = Tensor::from_data(a.shape, a.values, true);
  }
  return net;
}

}  // namespace dskd
