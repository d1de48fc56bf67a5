#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "helpers.hpp"
#include "oracles.hpp"
#include "saane/tape.hpp"
#include "saane/tensor.hpp"

using namespace saane;
using testutil::close_rel;
using testutil::random_tensor;

namespace {

template <typename T>
Tensor<T> run_conv(const Tensor<T>& input, const Tensor<T>& weights, int padding) {
  Tape<T> tape;
  return tape.value(tape.conv2d(tape.leaf(input), tape.leaf(weights), padding));
}

}  // namespace

TEST_CASE("conv2d 1x1 kernel is a scalar multiply", "[tensor]") {
  Tensor<float> input(Shape{1, 1, 1}, {5.0f});
  Tensor<float> weights(Shape{1, 1, 1, 1}, {2.0f});
  auto out = run_conv(input, weights, 0);
  REQUIRE(out.shape == Shape{1, 1, 1});
  REQUIRE(out[0] == 10.0f);
}

TEST_CASE("conv2d on all-zero input is all-zero", "[tensor]") {
  Rng rng(7);
  Tensor<float> input(Shape{3, 5, 4});
  auto weights = random_tensor<float>(Shape{2, 3, 3, 3}, rng);
  auto out = run_conv(input, weights, 1);
  for (float v : out.data) REQUIRE(v == 0.0f);
}

TEST_CASE("conv2d matches the six-loop reference", "[tensor][oracle]") {
  Rng rng(11);
  auto input = random_tensor<double>(Shape{2, 4, 4}, rng);
  auto weights = random_tensor<double>(Shape{3, 2, 3, 3}, rng);
  auto out = run_conv(input, weights, 1);
  auto expected = oracle::conv2d_ref(input, weights, 1);
  REQUIRE(out.shape == expected.shape);
  REQUIRE(close_rel(out.data, expected.data, 1e-12));
}

TEST_CASE("conv2d with a 1x1 kernel equals per-pixel matrix multiply", "[tensor][oracle]") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto input = random_tensor<double>(Shape{4, 3, 5}, rng);
    auto weights = random_tensor<double>(Shape{2, 4, 1, 1}, rng);
    auto out = run_conv(input, weights, 0);
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 5; ++x)
        for (int o = 0; o < 2; ++o) {
          double acc = 0.0;
          for (int i = 0; i < 4; ++i) acc += weights.at(o, i, 0, 0) * input.at(i, y, x);
          REQUIRE(close_rel(out.at(o, y, x), acc, 1e-12));
        }
  }
}

TEST_CASE("conv2d is linear in its input", "[tensor][property]") {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    auto x = random_tensor<float>(Shape{2, 5, 5}, rng);
    auto y = random_tensor<float>(Shape{2, 5, 5}, rng);
    auto weights = random_tensor<float>(Shape{3, 2, 3, 3}, rng);
    const float a = 2.5f;

    Tensor<float> ax = x;
    for (auto& v : ax.data) v *= a;
    Tensor<float> xy = x;
    for (std::size_t i = 0; i < xy.size(); ++i) xy[i] += y[i];

    auto conv_x = run_conv(x, weights, 1);
    auto conv_y = run_conv(y, weights, 1);
    auto conv_ax = run_conv(ax, weights, 1);
    auto conv_xy = run_conv(xy, weights, 1);

    for (std::size_t i = 0; i < conv_x.size(); ++i) {
      REQUIRE(close_rel(static_cast<double>(conv_ax[i]), a * conv_x[i], 1e-6));
      REQUIRE(close_rel(static_cast<double>(conv_xy[i]),
                        static_cast<double>(conv_x[i]) + conv_y[i], 1e-6));
    }
  }
}

TEST_CASE("conv2d applies a per-channel bias when one is supplied", "[tensor]") {
  Rng rng(53);
  auto input = random_tensor<float>(Shape{2, 3, 3}, rng);
  auto weights = random_tensor<float>(Shape{2, 2, 3, 3}, rng);
  Tensor<float> bias(Shape{2}, {0.5f, -1.5f});
  Tape<float> tape;
  Var plain = tape.conv2d(tape.leaf(input), tape.leaf(weights), 1);
  Var biased = tape.conv2d(tape.leaf(input), tape.leaf(weights), 1, tape.leaf(bias));
  const auto& p = tape.value(plain);
  const auto& b = tape.value(biased);
  for (int o = 0; o < 2; ++o)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        REQUIRE(b.at(o, y, x) == p.at(o, y, x) + bias[static_cast<std::size_t>(o)]);
      }

  Tape<float> bad;
  REQUIRE_THROWS_AS(bad.conv2d(bad.leaf(input), bad.leaf(weights), 1,
                               bad.leaf(Tensor<float>(Shape{3}))),
                    ShapeError);
}

TEST_CASE("conv2d rejects mismatched shapes naming both", "[tensor][error]") {
  Tape<float> tape;
  Var input = tape.leaf(Tensor<float>(Shape{2, 4, 4}));
  Var weights = tape.leaf(Tensor<float>(Shape{3, 5, 3, 3}));
  REQUIRE_THROWS_MATCHES(tape.conv2d(input, weights, 1), ShapeError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("[2x4x4]") &&
                             Catch::Matchers::ContainsSubstring("[3x5x3x3]")));
}

TEST_CASE("pool_spatial on a 2x2 plane", "[tensor]") {
  Tensor<float> input(Shape{1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  Tape<float> tape;
  Var in = tape.leaf(input);
  REQUIRE(tape.value(tape.pool_spatial(in, PoolMode::Avg))[0] == 2.5f);
  REQUIRE(tape.value(tape.pool_spatial(in, PoolMode::Max))[0] == 4.0f);
}

TEST_CASE("pool_channel on a 2-channel pixel", "[tensor]") {
  Tensor<float> input(Shape{2, 1, 1}, {3.0f, 5.0f});
  Tape<float> tape;
  Var in = tape.leaf(input);
  REQUIRE(tape.value(tape.pool_channel(in, PoolMode::Avg))[0] == 4.0f);
  REQUIRE(tape.value(tape.pool_channel(in, PoolMode::Max))[0] == 5.0f);
}

TEST_CASE("pooling matches single-pass loop references", "[tensor][oracle]") {
  Rng rng(23);
  auto spatial = random_tensor<double>(Shape{3, 5, 5}, rng);
  auto channel = random_tensor<double>(Shape{8, 3, 3}, rng);
  Tape<double> tape;
  Var sp = tape.leaf(spatial);
  Var ch = tape.leaf(channel);
  REQUIRE(close_rel(tape.value(tape.pool_spatial(sp, PoolMode::Avg)).data,
                    oracle::pool_spatial_ref(spatial, false), 1e-12));
  REQUIRE(tape.value(tape.pool_spatial(sp, PoolMode::Max)).data ==
          oracle::pool_spatial_ref(spatial, true));
  REQUIRE(close_rel(tape.value(tape.pool_channel(ch, PoolMode::Avg)).data,
                    oracle::pool_channel_ref(channel, false).data, 1e-12));
  REQUIRE(tape.value(tape.pool_channel(ch, PoolMode::Max)).data ==
          oracle::pool_channel_ref(channel, true).data);
}

TEST_CASE("pooling is permutation-invariant over the reduced axis", "[tensor][property]") {
  Rng rng(29);
  auto input = random_tensor<float>(Shape{3, 4, 4}, rng);

  // Permute spatial positions within each channel.
  std::vector<int> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<float> spatial_perm(input.shape);
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 16; ++p) spatial_perm.data[c * 16 + p] = input.data[c * 16 + perm[p]];

  Tape<float> tape;
  for (PoolMode mode : {PoolMode::Avg, PoolMode::Max}) {
    auto a = tape.value(tape.pool_spatial(tape.leaf(input), mode));
    auto b = tape.value(tape.pool_spatial(tape.leaf(spatial_perm), mode));
    if (mode == PoolMode::Max) {
      REQUIRE(a.data == b.data);
    } else {
      REQUIRE(close_rel(a.data, b.data, 1e-6));
    }
  }

  // Permute channels.
  std::vector<int> cperm = {2, 0, 1};
  Tensor<float> channel_perm(input.shape);
  for (int c = 0; c < 3; ++c)
    std::copy_n(input.data.begin() + cperm[c] * 16, 16, channel_perm.data.begin() + c * 16);
  for (PoolMode mode : {PoolMode::Avg, PoolMode::Max}) {
    auto a = tape.value(tape.pool_channel(tape.leaf(input), mode));
    auto b = tape.value(tape.pool_channel(tape.leaf(channel_perm), mode));
    if (mode == PoolMode::Max) {
      REQUIRE(a.data == b.data);
    } else {
      REQUIRE(close_rel(a.data, b.data, 1e-6));
    }
  }
}

TEST_CASE("mlp2 with zero weights returns zero", "[tensor]") {
  Tape<float> tape;
  Var x = tape.leaf(Tensor<float>(Shape{4}, {0.3f, -0.2f, 0.9f, 0.1f}));
  Var w1 = tape.leaf(Tensor<float>(Shape{2, 4}));
  Var b1 = tape.leaf(Tensor<float>(Shape{2}));
  Var w2 = tape.leaf(Tensor<float>(Shape{4, 2}));
  Var b2 = tape.leaf(Tensor<float>(Shape{4}));
  auto out = tape.value(mlp2(tape, x, w1, b1, w2, b2));
  for (float v : out.data) REQUIRE(v == 0.0f);
}

TEST_CASE("mlp2 ReLU clamps a negative 1-dim input", "[tensor]") {
  Tape<float> tape;
  Var x = tape.leaf(Tensor<float>(Shape{1}, {-2.0f}));
  Var w1 = tape.leaf(Tensor<float>(Shape{1, 1}, {1.0f}));
  Var b1 = tape.leaf(Tensor<float>(Shape{1}));
  Var w2 = tape.leaf(Tensor<float>(Shape{1, 1}, {1.0f}));
  Var b2 = tape.leaf(Tensor<float>(Shape{1}));
  REQUIRE(tape.value(mlp2(tape, x, w1, b1, w2, b2))[0] == 0.0f);
}

TEST_CASE("mlp2 matches the dense matmul reference", "[tensor][oracle]") {
  Rng rng(31);
  auto x = random_tensor<double>(Shape{4}, rng);
  auto w1 = random_tensor<double>(Shape{3, 4}, rng);
  auto b1 = random_tensor<double>(Shape{3}, rng);
  auto w2 = random_tensor<double>(Shape{4, 3}, rng);
  auto b2 = random_tensor<double>(Shape{4}, rng);
  Tape<double> tape;
  auto out = tape.value(mlp2(tape, tape.leaf(x), tape.leaf(w1), tape.leaf(b1), tape.leaf(w2),
                             tape.leaf(b2)));
  auto expected = oracle::mlp2_ref(x.data, w1, b1.data, w2, b2.data);
  REQUIRE(close_rel(out.data, expected, 1e-12));
}

TEST_CASE("sigmoid basics and saturation", "[tensor]") {
  Tape<double> tape;
  Var x = tape.leaf(Tensor<double>(Shape{3}, {0.0, -100.0, 100.0}));
  auto out = tape.value(tape.sigmoid(x));
  REQUIRE(out[0] == 0.5);
  REQUIRE(out[1] == Catch::Approx(oracle::sigmoid_ref(-100.0)).margin(1e-60));
  REQUIRE(out[1] > 0.0);
  REQUIRE(out[1] < 1e-40);
  REQUIRE(std::isfinite(out[1]));
  REQUIRE(std::isfinite(out[2]));
}

TEST_CASE("mul_broadcast channel mask semantics", "[tensor]") {
  Rng rng(37);
  auto f = random_tensor<float>(Shape{2, 2, 2}, rng);
  Tensor<float> mask(Shape{2}, {1.0f, 0.0f});
  Tape<float> tape;
  auto out = tape.value(tape.mul_broadcast(tape.leaf(f), tape.leaf(mask)));
  REQUIRE(out.shape == f.shape);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      REQUIRE(out.at(0, y, x) == f.at(0, y, x));
      REQUIRE(out.at(1, y, x) == 0.0f);
    }
}

TEST_CASE("mul_broadcast by ones is the identity, bitwise", "[tensor][property]") {
  Rng rng(41);
  auto f = random_tensor<float>(Shape{3, 4, 5}, rng);
  Tape<float> tape;
  Var in = tape.leaf(f);
  auto by_vector = tape.value(tape.mul_broadcast(in, tape.leaf(Tensor<float>::ones(Shape{3}))));
  auto by_plane =
      tape.value(tape.mul_broadcast(in, tape.leaf(Tensor<float>::ones(Shape{1, 4, 5}))));
  auto by_same = tape.value(tape.mul_broadcast(in, tape.leaf(Tensor<float>::ones(f.shape))));
  REQUIRE(by_vector.data == f.data);
  REQUIRE(by_plane.data == f.data);
  REQUIRE(by_same.data == f.data);
}

TEST_CASE("mul_broadcast matches the expansion reference", "[tensor][oracle]") {
  Rng rng(43);
  auto a = random_tensor<double>(Shape{4, 3, 2}, rng);
  auto plane = random_tensor<double>(Shape{1, 3, 2}, rng);
  auto gate = random_tensor<double>(Shape{4}, rng);
  Tape<double> tape;
  Var av = tape.leaf(a);

  auto got_plane = tape.value(tape.mul_broadcast(av, tape.leaf(plane)));
  auto want_plane = oracle::mul_broadcast_ref(a, a.shape, plane, plane.shape);
  REQUIRE(got_plane.data == want_plane.data);

  auto got_gate = tape.value(tape.mul_broadcast(av, tape.leaf(gate)));
  auto want_gate = oracle::mul_broadcast_ref(a, a.shape, gate, Shape{4, 1, 1});
  REQUIRE(got_gate.data == want_gate.data);

  // Outer product of a channel vector with a spatial plane.
  auto got_outer = tape.value(tape.mul_broadcast(tape.leaf(gate), tape.leaf(plane)));
  auto want_outer = oracle::mul_broadcast_ref(gate, Shape{4, 1, 1}, plane, plane.shape);
  REQUIRE(got_outer.shape == Shape{4, 3, 2});
  REQUIRE(got_outer.data == want_outer.data);
}

TEST_CASE("mul_broadcast rejects incompatible shapes", "[tensor][error]") {
  Tape<float> tape;
  Var a = tape.leaf(Tensor<float>(Shape{3, 4, 4}));
  Var b = tape.leaf(Tensor<float>(Shape{2, 4, 4}));
  REQUIRE_THROWS_AS(tape.mul_broadcast(a, b), ShapeError);
  Var c = tape.leaf(Tensor<float>(Shape{5}));
  REQUIRE_THROWS_AS(tape.mul_broadcast(a, c), ShapeError);
}

TEST_CASE("forward ops keep finite inputs finite", "[tensor][property]") {
  Rng rng(47);
  auto input = random_tensor<float>(Shape{4, 6, 6}, rng, -50.0, 50.0);
  auto weights = random_tensor<float>(Shape{4, 4, 3, 3}, rng, -5.0, 5.0);
  Tape<float> tape;
  Var x = tape.leaf(input);
  Var conv = tape.conv2d(x, tape.leaf(weights), 1);
  Var sig = tape.sigmoid(conv);
  Var pooled = tape.pool_spatial(sig, PoolMode::Avg);
  REQUIRE(tape.value(conv).all_finite());
  REQUIRE(tape.value(sig).all_finite());
  REQUIRE(tape.value(pooled).all_finite());
}
