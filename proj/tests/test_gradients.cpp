#include "doctest.h"

#include "grad_suite.hpp"

TEST_CASE("every differentiable op matches central differences in 64-bit") {
  auto report = rashnet::testing::run_gradient_suite(20, 1234);
  CHECK(report.size() == 11);
  for (const auto& [op, r] : report) {
    INFO(op << " worst relative error " << r.max_rel_error);
    CHECK(r.instances >= 20);
    CHECK(r.max_rel_error < 1e-6);
  }
}
