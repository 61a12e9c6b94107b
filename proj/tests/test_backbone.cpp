#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "grad_check.hpp"
#include "seamless/backbone.hpp"

namespace seamless {
namespace {

using testing::random_tensor;

void expect_pyramid_shapes(Backbone& net, int size, int n = 1) {
  std::mt19937_64 rng(3);
  const Tensor image = random_tensor({n, 3, size, size}, rng, 0.0, 1.0);
  const auto levels = extract_pyramid(net, image);
  const auto ch = net.channels();
  for (int i = 0; i < 5; ++i) {
    const Shape expected{n, ch[i], size >> (i + 1), size >> (i + 1)};
    EXPECT_EQ(levels[i].shape(), expected) << "level " << i;
    EXPECT_TRUE(levels[i].all_finite()) << "level " << i;
  }
}

TEST(Backbone, ProfileChannels) {
  EXPECT_EQ(profile_channels(BackboneProfile::full), (std::array<int, 5>{64, 256, 512, 1024, 2048}));
  EXPECT_EQ(profile_channels(BackboneProfile::toy), (std::array<int, 5>{8, 16, 32, 64, 128}));
  EXPECT_EQ(parse_profile("full"), BackboneProfile::full);
  EXPECT_EQ(parse_profile("toy"), BackboneProfile::toy);
  EXPECT_THROW(parse_profile("resnet"), ConfigError);
}

TEST(Backbone, ToyShapes) {
  std::mt19937_64 rng(1);
  ToyEncoder net(rng);
  expect_pyramid_shapes(net, 64);
  expect_pyramid_shapes(net, 320);
  expect_pyramid_shapes(net, 96, 2);
}

TEST(Backbone, ToyShapesNonSquare) {
  std::mt19937_64 rng(1);
  ToyEncoder net(rng);
  std::mt19937_64 r2(5);
  const auto levels = extract_pyramid(net, random_tensor({1, 3, 64, 128}, r2, 0.0, 1.0));
  EXPECT_EQ(levels[0].shape(), (Shape{1, 8, 32, 64}));
  EXPECT_EQ(levels[4].shape(), (Shape{1, 128, 2, 4}));
}

TEST(Backbone, FullShapes64) {
  std::mt19937_64 rng(1);
  ResNet50Encoder net(rng);
  expect_pyramid_shapes(net, 64);
}

TEST(Backbone, RejectsSizesNotDivisibleBy32) {
  std::mt19937_64 rng(1);
  ToyEncoder net(rng);
  EXPECT_THROW(extract_pyramid(net, Tensor({1, 3, 321, 320})), ShapeError);
  EXPECT_THROW(extract_pyramid(net, Tensor({1, 3, 64, 48})), ShapeError);
  EXPECT_THROW(extract_pyramid(net, Tensor({1, 1, 64, 64})), ShapeError);
  Tensor bad({1, 3, 64, 64});
  bad[5] = std::nan("");
  EXPECT_THROW(extract_pyramid(net, bad), ShapeError);
}

TEST(Backbone, DeterministicForFixedSeedAndInput) {
  std::mt19937_64 a(11), b(11);
  ToyEncoder n1(a), n2(b);
  std::mt19937_64 rng(4);
  const Tensor image = random_tensor({2, 3, 64, 64}, rng, 0.0, 1.0);
  const auto p1 = extract_pyramid(n1, image);
  const auto p2 = extract_pyramid(n2, image);
  const auto p3 = extract_pyramid(n1, image);
  for (int i = 0; i < 5; ++i) {
    for (std::size_t k = 0; k < p1[i].size(); ++k) {
      ASSERT_EQ(p1[i][k], p2[i][k]);
      ASSERT_EQ(p1[i][k], p3[i][k]);
    }
  }
}

// 3x3 conv with bias + batch norm (gamma, beta) per block.
std::size_t toy_parameter_count() {
  const auto ch = profile_channels(BackboneProfile::toy);
  auto block = [](std::size_t in, std::size_t out) { return in * out * 9 + out + 2 * out; };
  std::size_t total = block(3, ch[0]);
  for (int i = 1; i < 5; ++i) total += block(ch[i - 1], ch[i]) + block(ch[i], ch[i]);
  return total;
}

TEST(Backbone, ToyParameterCountClosedForm) {
  std::mt19937_64 rng(1);
  ToyEncoder net(rng);
  EXPECT_EQ(net.parameter_count(), toy_parameter_count());
}

TEST(Backbone, ResNet50ParameterCount) {
  // Convolutions and batch-norm affine terms of ResNet-50 without the classifier.
  std::mt19937_64 rng(1);
  ResNet50Encoder net(rng);
  EXPECT_EQ(net.parameter_count(), 23508032u);
}

TEST(Backbone, PretrainedWeightsRoundTripAndNormalize) {
  std::mt19937_64 a(1), b(2);
  ToyEncoder src(a), dst(b);
  archive::TensorMap tensors;
  for (const auto& p : src.named_parameters()) tensors.emplace(p.name, p.item->value());
  for (const auto& q : src.named_buffers()) tensors.emplace(q.name, *q.item);
  const auto path = std::filesystem::temp_directory_path() / "seamless_backbone_weights.swts";
  archive::save_weights(path.string(), tensors);
  dst.load_pretrained(path.string());
  EXPECT_TRUE(dst.pretrained());
  src.set_pretrained(true);
  std::mt19937_64 rng(9);
  const Tensor image = random_tensor({1, 3, 64, 64}, rng, 0.0, 1.0);
  const auto p1 = extract_pyramid(src, image);
  const auto p2 = extract_pyramid(dst, image);
  for (std::size_t k = 0; k < p1[4].size(); ++k) ASSERT_EQ(p1[4][k], p2[4][k]);

  tensors.erase(tensors.begin());
  archive::save_weights(path.string(), tensors);
  std::mt19937_64 c(3);
  ToyEncoder other(c);
  EXPECT_THROW(other.load_pretrained(path.string()), IoError);
  std::filesystem::remove(path);
}

TEST(Backbone, GradientsReachEveryParameter) {
  std::mt19937_64 rng(1);
  ToyEncoder net(rng);
  std::mt19937_64 r2(2);
  const auto pyr = net.forward(Var(random_tensor({2, 3, 64, 64}, r2, 0.0, 1.0)));
  backward(ops::sum_all(pyr.levels[4]));
  for (const auto& p : net.named_parameters()) {
    EXPECT_FALSE(p.item->node()->grad.empty()) << p.name;
  }
}

}  // namespace
}  // namespace seamless
