#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "dskd/checkpoint.hpp"
#include "dskd/distill.hpp"
#include "dskd/optim.hpp"
#include "dskd/segnet.hpp"
#include "test_util.hpp"

using namespace dskd;
using testutil::vec;

namespace {

Tensor probe(std::uint64_t seed, std::size_t h, std::size_t w) {
  std::mt19937_64 rng(seed);
  return testutil::uniform(rng, {1, h, w}, 0, 1);
}

void set_param(SegNetwork& net, const std::string& name, double value) {
  for (auto& p : net.parameters()) {
    if (p.name == name) {
      for (auto& v : p.value.mutable_data()) v = value;
      return;
    }
  }
  FAIL("no parameter " << name);
}

}  // namespace

TEST_SUITE("segnet") {

TEST_CASE("prediction shape and range") {
  SegNetwork net(NetworkConfig{3, 4, 1, 16, 24}, 5);
  auto out = net.forward(probe(1, 16, 24));
  CHECK(out.prediction.shape() == Shape{1, 16, 24});
  for (double v : out.prediction.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  CHECK(vec(out.prediction) == vec(out.side_outputs[0]));
  CHECK_THROWS_AS(net.forward(probe(1, 16, 16)), ShapeError);
  CHECK_THROWS_AS(net.forward(Tensor::zeros({2, 16, 24})), ShapeError);
}

TEST_CASE("decoder feature maps halve per depth") {
  SegNetwork net(NetworkConfig{3, 4, 1, 32, 32}, 1);
  auto out = net.forward(probe(2, 32, 32));
  REQUIRE(out.decoder_features.size() == 3);
  CHECK(out.decoder_features[0].dim(1) == 32);
  CHECK(out.decoder_features[1].dim(1) == 16);
  CHECK(out.decoder_features[2].dim(1) == 8);
  CHECK(out.decoder_features[2].dim(2) == 8);
  REQUIRE(out.side_outputs.size() == 3);
  for (const auto& s : out.side_outputs) CHECK(s.shape() == Shape{1, 32, 32});
}

TEST_CASE("side outputs") {
  SegNetwork net(NetworkConfig{3, 4, 1, 32, 32}, 3);
  auto out = net.forward(probe(3, 32, 32));
  SUBCASE("depth 1 is not resampled") {
    CHECK(vec(net.side_output(out.decoder_features[0], 1)) == vec(out.side_outputs[0]));
  }
  SUBCASE("depth 3 upsamples 8x8 to 32x32") {
    Tensor s = net.side_output(out.decoder_features[2], 3);
    CHECK(s.shape() == Shape{1, 32, 32});
  }
  SUBCASE("zero head gives one half everywhere") {
    set_param(net, "head2.weight", 0.0);
    set_param(net, "head2.bias", 0.0);
    Tensor s = net.side_output(out.decoder_features[1], 2);
    for (double v : s.data()) CHECK(v == 0.5);
  }
  CHECK_THROWS_AS(net.side_output(out.decoder_features[0], 0), std::out_of_range);
  CHECK_THROWS_AS(net.side_output(out.decoder_features[0], 4), std::out_of_range);
  CHECK_THROWS_AS(net.side_output(out.decoder_features[0], 2), ShapeError);
}

TEST_CASE("same seed, same network") {
  const NetworkConfig cfg{2, 4, 1, 16, 16};
  SegNetwork a(cfg, 11);
  SegNetwork b(cfg, 11);
  SegNetwork c(cfg, 12);
  const Tensor x = probe(4, 16, 16);
  CHECK(vec(a.forward(x).prediction) == vec(b.forward(x).prediction));
  CHECK(vec(a.forward(x).prediction) != vec(c.forward(x).prediction));
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(NetworkConfig({1, 8, 1, 64, 64}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(NetworkConfig({3, 8, 1, 62, 64}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(NetworkConfig({3, 8, 3, 64, 64}).validate(), std::invalid_argument);
  CHECK_NOTHROW(NetworkConfig({4, 8, 1, 64, 64}).validate());
  CHECK(NetworkConfig({3, 8, 1, 64, 64}).channels_at(3) == 32);
}

TEST_CASE("every parameter receives gradient from the total loss") {
  const NetworkConfig cfg{3, 4, 1, 16, 16};
  SegNetwork net(cfg, 7);
  const TeacherSnapshot teacher(SegNetwork(cfg, 8), 1);
  std::mt19937_64 rng(9);
  const Tensor x = probe(5, 16, 16);
  const Tensor y = testutil::binary(rng, {1, 16, 16}, 0.3);
  const ForwardResult t_out = teacher.forward(x);
  total_loss(net.forward(x), &t_out, y, DistillConfig{}, 2, 10).total.backward();
  for (const auto& p : net.parameters()) {
    REQUIRE(p.value.has_grad());
    double mag = 0.0;
    for (double g : p.value.grad()) mag += std::abs(g);
    CHECK_MESSAGE(mag > 0.0, p.name);
  }
}

TEST_CASE("teacher snapshot") {
  const NetworkConfig cfg{2, 4, 1, 16, 16};
  SegNetwork live(cfg, 21);
  const Tensor x = probe(6, 16, 16);
  const auto before = vec(live.forward(x).prediction);
  const TeacherSnapshot snap(live, 3);
  CHECK(snap.epoch() == 3);

  SUBCASE("restore reproduces the source") {
    CHECK(vec(snap.restore().forward(x).prediction) == before);
  }
  SUBCASE("optimizer steps on the live network leave it untouched") {
    std::mt19937_64 rng(1);
    const Tensor y = testutil::binary(rng, {1, 16, 16}, 0.3);
    AdamW opt;
    dice_loss(live.forward(x).prediction, y).backward();
    opt.step(live.parameters(), 1e-2);
    CHECK(vec(live.forward(x).prediction) != before);
    CHECK(vec(snap.forward(x).prediction) == before);
  }
  SUBCASE("teacher forward carries no graph") {
    auto out = snap.forward(x);
    CHECK_FALSE(out.prediction.requires_grad());
    for (const auto& p : snap.network().parameters()) CHECK_FALSE(p.value.requires_grad());
  }
}

TEST_CASE("checkpoint round trip is bitwise") {
  testutil::TempDir dir("segnet");
  const NetworkConfig cfg{3, 4, 1, 16, 16};
  SegNetwork net(cfg, 99);
  Checkpoint ckpt;
  ckpt.meta["note"] = "x";
  store_network(ckpt, TeacherSnapshot(net, 2).network());
  ckpt.save(dir / "a.ckpt");

  const Checkpoint back = Checkpoint::load(dir / "a.ckpt");
  CHECK(back.meta.at("note") == "x");
  SegNetwork restored = load_network(back);
  CHECK(restored.config() == cfg);
  REQUIRE(restored.parameters().size() == net.parameters().size());
  for (std::size_t k = 0; k < net.parameters().size(); ++k) {
    CHECK(restored.parameters()[k].name == net.parameters()[k].name);
    CHECK(vec(restored.parameters()[k].value) == vec(net.parameters()[k].value));
    CHECK(restored.parameters()[k].value.requires_grad());
  }
  const Tensor x = probe(7, 16, 16);
  CHECK(vec(restored.forward(x).prediction) == vec(net.forward(x).prediction));
}

TEST_CASE("checkpoint errors") {
  testutil::TempDir dir("ckpt_err");
  CHECK_THROWS_AS(Checkpoint::load(dir / "missing.ckpt"), CheckpointError);
  {
    std::ofstream out(dir / "junk.ckpt", std::ios::binary);
    out << "NOTACKPT and some bytes";
  }
  CHECK_THROWS_AS(Checkpoint::load(dir / "junk.ckpt"), CheckpointError);

  Checkpoint ckpt;
  ckpt.arrays.push_back({"a", {2, 2}, {1, 2, 3, 4}});
  ckpt.save(dir / "ok.ckpt");
  const auto full = std::filesystem::file_size(dir / "ok.ckpt");
  std::filesystem::resize_file(dir / "ok.ckpt", full - 8);
  CHECK_THROWS_AS(Checkpoint::load(dir / "ok.ckpt"), CheckpointError);
  CHECK_THROWS_AS(ckpt.array("b"), CheckpointError);
}

}  // TEST_SUITE
