#include "dskd/segnet.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dskd {

void NetworkConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("NetworkConfig: " + msg); };
  if (depth < 2) fail("depth must be >= 2, got " + std::to_string(depth));
  if (depth > 12) fail("depth must be <= 12, got " + std::to_string(depth));
  if (base_channels < 4) fail("base_channels must be >= 4, got " + std::to_string(base_channels));
  if (in_channels != 1) fail("in_channels must be 1, got " + std::to_string(in_channels));
  if (height <= 0 || width <= 0) fail("height and width must be positive");
  const int stride = 1 << (depth - 1);
  if (height % stride != 0) {
    fail("height " + std::to_string(height) + " not divisible by 2^(depth-1) = " +
         std::to_string(stride));
  }
  if (width % stride != 0) {
    fail("width " + std::to_string(width) + " not divisible by 2^(depth-1) = " +
         std::to_string(stride));
  }
}

std::size_t NetworkConfig::channels_at(int k) const {
  return static_cast<std::size_t>(base_channels) << (k - 1);
}

SegNetwork::SegNetwork(NetworkConfig config, std::uint64_t seed)
    : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.depth;

  std::size_t in = static_cast<std::size_t>(config_.in_channels);
  for (int k = 1; k <= d; ++k) {
    const std::size_t c = config_.channels_at(k);
    const std::string p = "enc" + std::to_string(k);
    encoder_.push_back({add_conv(p + ".conv1", in, c, rng), add_conv(p + ".conv2", c, c, rng)});
    in = c;
  }
  for (int k = 1; k < d; ++k) {
    const std::size_t c = config_.channels_at(k);
    const std::size_t below = config_.channels_at(k + 1);
    const std::string p = "dec" + std::to_string(k);
    decoder_.push_back(
        {add_conv(p + ".conv1", c + below, c, rng), add_conv(p + ".conv2", c, c, rng)});
  }
  for (int i = 1; i <= d; ++i) {
    heads_.push_back(add_conv("head" + std::to_string(i), config_.channels_at(i), 1, rng));
  }

  std::ostringstream os;
  os << rng;
  rng_state_ = os.str();
}

SegNetwork::SegNetwork(const SegNetwork& other)
    : config_(other.config_),
      encoder_(other.encoder_),
      decoder_(other.decoder_),
      heads_(other.heads_),
      rng_state_(other.rng_state_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) {
    params_.push_back({p.name, p.value.clone(p.value.requires_grad())});
  }
}

SegNetwork& SegNetwork::operator=(const SegNetwork& other) {
  if (this != &other) *this = SegNetwork(other);
  return *this;
}

SegNetwork::Conv SegNetwork::add_conv(const std::string& name, std::size_t in,
                                      std::size_t out, std::mt19937_64& rng) {
  const std::size_t fan_in = in * 9;
  std::normal_distribution<Real> normal(0.0, std::sqrt(2.0 / static_cast<Real>(fan_in)));
  std::vector<Real> w(out * in * 9);
  for (auto& v : w) v = normal(rng);
  Conv conv{params_.size(), params_.size() + 1};
  params_.push_back({name + ".weight", Tensor::from_data({out, in, 3, 3}, std::move(w), true)});
  params_.push_back({name + ".bias", Tensor::zeros({out}, true)});
  return conv;
}

Tensor SegNetwork::apply(const Conv& conv, const Tensor& x) const {
  return conv2d(x, params_[conv.weight].value, params_[conv.bias].value, 1);
}

ForwardResult SegNetwork::forward(const Tensor& image, bool with_sides) const {
  const auto h = static_cast<std::size_t>(config_.height);
  const auto w = static_cast<std::size_t>(config_.width);
  if (image.rank() != 3) throw ShapeError("SegNetwork::forward", "rank", 3, image.rank());
  if (image.dim(0) != static_cast<std::size_t>(config_.in_channels)) {
    throw ShapeError("SegNetwork::forward", "channels", config_.in_channels, image.dim(0));
  }
  if (image.dim(1) != h) throw ShapeError("SegNetwork::forward", "height", h, image.dim(1));
  if (image.dim(2) != w) throw ShapeError("SegNetwork::forward", "width", w, image.dim(2));

  const int d = config_.depth;
  std::vector<Tensor> skips;
  Tensor x = image;
  for (int k = 1; k <= d; ++k) {
    const auto& block = encoder_[static_cast<std::size_t>(k - 1)];
    x = relu(apply(block[1], relu(apply(block[0], x))));
    skips.push_back(x);
    if (k < d) x = max_pool2x2(x);
  }

  ForwardResult result;
  result.decoder_features.resize(static_cast<std::size_t>(d));
  result.decoder_features[static_cast<std::size_t>(d - 1)] = skips.back();
  for (int k = d - 1; k >= 1; --k) {
    const auto idx = static_cast<std::size_t>(k - 1);
    Tensor up = bilinear_upsample(result.decoder_features[idx + 1], 2);
    Tensor merged = concat({skips[idx], up}, 0);
    const auto& block = decoder_[idx];
    result.decoder_features[idx] = relu(apply(block[1], relu(apply(block[0], merged))));
  }

  if (with_sides) {
    for (int i = 1; i <= d; ++i) {
      result.side_outputs.push_back(
          side_output(result.decoder_features[static_cast<std::size_t>(i - 1)], i));
    }
    result.prediction = result.side_outputs.front();
  } else {
    result.prediction = side_output(result.decoder_features.front(), 1);
  }
  return result;
}

Tensor SegNetwork::side_output(const Tensor& features, int depth_index) const {
  if (depth_index < 1 || depth_index > config_.depth) {
    throw std::out_of_range("side_output: depth " + std::to_string(depth_index) +
                            " outside [1, " + std::to_string(config_.depth) + "]");
  }
  const int factor = 1 << (depth_index - 1);
  const auto eh = static_cast<std::size_t>(config_.height / factor);
  const auto ew = static_cast<std::size_t>(config_.width / factor);
  if (features.rank() != 3) throw ShapeError("side_output", "rank", 3, features.rank());
  if (features.dim(1) != eh) throw ShapeError("side_output", "height", eh, features.dim(1));
  if (features.dim(2) != ew) throw ShapeError("side_output", "width", ew, features.dim(2));
  Tensor logits = apply(heads_[static_cast<std::size_t>(depth_index - 1)], features);
  return sigmoid(bilinear_upsample(logits, factor));
}

std::size_t SegNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void SegNetwork::set_requires_grad(bool requires_grad) {
  for (auto& p : params_) p.value = p.value.clone(requires_grad);
}

void SegNetwork::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

TeacherSnapshot::TeacherSnapshot(const SegNetwork& source, int epoch)
    : net_(source), epoch_(epoch) {
  net_.set_requires_grad(false);
}

ForwardResult TeacherSnapshot::forward(const Tensor& image, bool with_sides) const {
  NoGradGuard guard;
  return net_.forward(image, with_sides);
}

SegNetwork TeacherSnapshot::restore() const {
  SegNetwork net(net_);
  net.set_requires_grad(true);
  return net;
}

}  // namespace dskd
