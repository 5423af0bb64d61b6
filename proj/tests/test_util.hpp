#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "robustgrad/tensor.hpp"

namespace robustgrad::testing {

/// Elementwise relative comparison; entries where both sides are below `floor` in
/// magnitude are compared absolutely against `floor`.
template <Real T>
void expect_close(const Tensor<T>& actual, const Tensor<T>& expected, double rel, double floor) {
  ASSERT_EQ(actual.shape(), expected.shape());
  for (std::size_t i = 0; i < actual.size(); ++i) {
    const double a = actual[i], e = expected[i];
    const double mag = std::max(std::abs(a), std::abs(e));
    if (mag <= floor) {
      EXPECT_LE(std::abs(a - e), floor) << "index " << i;
    } else {
      EXPECT_LE(std::abs(a - e) / mag, rel) << "index " << i << " actual " << a << " expected " << e;
    }
  }
}

}  // namespace robustgrad::testing
