#include <gtest/gtest.h>

#include "mpae/tensor.hpp"

using namespace mpae;

TEST(Tensor, ShapeAndDataAgree) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.extent(1), 3u);
  for (double v : t.data()) EXPECT_EQ(v, 1.5);
}

TEST(Tensor, RejectsBadShapes) {
  EXPECT_THROW(Tensor(Shape{}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1, 1, 1}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, RankFiveAllowed) { EXPECT_EQ(Tensor(Shape{1, 2, 1, 2, 1}).size(), 4u); }

TEST(Tensor, RowMajorStrides) {
  const auto s = strides_of(Shape{2, 3, 4});
  EXPECT_EQ(s, (std::vector<std::size_t>{12, 4, 1}));
}

TEST(Tensor, ReshapeKeepsValues) {
  Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r.data(), t.data());
  EXPECT_THROW(t.reshaped(Shape{4}), ShapeError);
}

TEST(Tensor, ItemRequiresOneValue) {
  EXPECT_EQ(Tensor::scalar(3.0).item(), 3.0);
  EXPECT_THROW(Tensor(Shape{2}).item(), ShapeError);
}

TEST(Tensor, ShapeToString) { EXPECT_EQ(to_string(Shape{4, 32, 32}), "[4,32,32]"); }
