#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dskd/tensor.hpp"

namespace dskd {

struct NetworkConfig {
  int depth = 3;
  int base_channels = 8;
  int in_channels = 1;
  int height = 64;
  int width = 64;

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
  /// Channels at decoder depth k (1-based; doubles per level).
  std::size_t channels_at(int k) const;

  bool operator==(const NetworkConfig&) const = default;
};

struct NamedParameter {
  std::string name;
  Tensor value;
};

/// Output of a student/teacher forward pass.
struct ForwardResult {
  Tensor prediction;                    // [1,H,W], equals side_outputs[0]
  std::vector<Tensor> decoder_features; // index k-1 holds depth k
  std::vector<Tensor> side_outputs;     // index i-1 holds depth i, [1,H,W]
};

/// U-Net style encoder-decoder with a 3x3 side head at every decoder depth.
///
/// Encoder level k (1..d) runs two conv3x3+relu blocks at base*2^(k-1)
/// channels; all but the deepest are followed by 2x2 max pooling. Decoder
/// level k < d upsamples depth k+1 by two, concatenates the level-k skip and
/// applies two conv3x3+relu blocks. The depth-d decoder map is the bottleneck.
///
/// Copying a network deep-copies its parameters.
class SegNetwork {
 public:
  explicit SegNetwork(NetworkConfig config, std::uint64_t seed = 0);
  SegNetwork(const SegNetwork& other);
  SegNetwork& operator=(const SegNetwork& other);
  SegNetwork(SegNetwork&&) noexcept = default;
  SegNetwork& operator=(SegNetwork&&) noexcept = default;

  const NetworkConfig& config() const noexcept { return config_; }
  int depth() const noexcept { return config_.depth; }

  /// Full forward; side outputs for every depth are included when
  /// `with_sides` is set, otherwise only the depth-1 prediction.
  ForwardResult forward(const Tensor& image, bool with_sides = true) const;

  /// sigma(upsample(head_i(features), 2^(i-1))), i in [1, depth].
  Tensor side_output(const Tensor& features, int depth_index) const;

  std::vector<NamedParameter>& parameters() noexcept { return params_; }
  const std::vector<NamedParameter>& parameters() const noexcept { return params_; }
  std::size_t parameter_count() const;

  /// Replaces every parameter with a fresh leaf carrying `requires_grad`.
  void set_requires_grad(bool requires_grad);
  void zero_grad();

  /// Generator state after initialization, for checkpointing.
  const std::string& init_rng_state() const noexcept { return rng_state_; }

 private:
  struct Conv {
    std::size_t weight;  // index into params_
    std::size_t bias;
  };

  Tensor apply(const Conv& conv, const Tensor& x) const;
  Conv add_conv(const std::string& name, std::size_t in, std::size_t out,
                std::mt19937_64& rng);

  NetworkConfig config_;
  std::vector<NamedParameter> params_;
  std::vector<std::array<Conv, 2>> encoder_;
  std::vector<std::array<Conv, 2>> decoder_;  // index k-1 for k in [1, d-1]
  std::vector<Conv> heads_;                   // index i-1 for i in [1, d]
  std::string rng_state_;
};

/// Frozen copy of every network parameter, taken at an epoch boundary.
/// Forward passes never record gradients.
class TeacherSnapshot {
 public:
  TeacherSnapshot(const SegNetwork& source, int epoch);

  int epoch() const noexcept { return epoch_; }
  ForwardResult forward(const Tensor& image, bool with_sides = true) const;
  const SegNetwork& network() const noexcept { return net_; }

  /// A trainable network with the snapshot's parameter values.
  SegNetwork restore() const;

 private:
  SegNetwork net_;
  int epoch_;
};

}  // namespace dskd
