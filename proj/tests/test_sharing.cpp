// Copyright 2026 The umv2 Authors
// SPDX-License-Identifier: Apache-2.0

#include <set>

#include "doctest.h"
#include "umv2/errors.hpp"
#include "umv2/sharing.hpp"

using namespace umv2;
using V = std::vector<std::size_t>;

TEST_CASE("published 24-layer plans, every cell") {
  const auto noring = build_plan(24, 4, SharingMode::kNoRing);
  const auto ring = build_plan(24, 4, SharingMode::kRing);
  const auto block = build_plan(24, 4, SharingMode::kBlock);
  CHECK(noring.tables_for(1) == V{1, 2, 3, 4});
  CHECK(noring.tables_for(2) == V{1, 2, 3, 4});
  CHECK(noring.tables_for(3) == V{2, 3, 4, 5});
  CHECK(noring.tables_for(4) == V{3, 4, 5, 6});
  CHECK(noring.tables_for(5) == V{4, 5, 6, 7});
  CHECK(noring.tables_for(24) == V{21, 22, 23, 24});
  CHECK(ring.tables_for(1) == V{24, 1, 2, 3});
  CHECK(ring.tables_for(2) == V{1, 2, 3, 4});
  CHECK(ring.tables_for(3) == V{2, 3, 4, 5});
  CHECK(ring.tables_for(4) == V{3, 4, 5, 6});
  CHECK(ring.tables_for(5) == V{4, 5, 6, 7});
  CHECK(ring.tables_for(24) == V{23, 24, 1, 2});
  for (std::size_t l = 1; l <= 4; ++l) CHECK(block.tables_for(l) == V{1, 2, 3, 4});
  CHECK(block.tables_for(5) == V{5, 6, 7, 8});
  CHECK(block.tables_for(24) == V{21, 22, 23, 24});
  CHECK_FALSE(block.partial_block);

  const std::string text = plan_text({noring, ring, block}, {1, 2, 3, 4, 5, 24});
  CHECK(text.find("S4-Ring      | 24,1,2,3") != std::string::npos);
  CHECK(text.find("23,24,1,2") != std::string::npos);
}

TEST_CASE("configuration errors") {
  CHECK_THROWS_AS(build_plan(4, 5, SharingMode::kRing), ConfigError);
  CHECK_THROWS_AS(build_plan(4, 0, SharingMode::kRing), ConfigError);
  CHECK_THROWS_AS(build_plan(0, 1, SharingMode::kNone), ConfigError);
  CHECK_THROWS_AS(parse_sharing_mode("star"), ConfigError);
  CHECK(build_plan(10, 4, SharingMode::kBlock).partial_block);
  CHECK(build_plan(10, 4, SharingMode::kBlock).tables_for(10) == V{9, 10});
}

TEST_CASE("plan invariants over many shapes") {
  for (std::size_t L = 1; L <= 30; ++L) {
    for (std::size_t g = 1; g <= L; ++g) {
      const auto ring = build_plan(L, g, SharingMode::kRing);
      const auto noring = build_plan(L, g, SharingMode::kNoRing);
      for (std::size_t l = 1; l <= L; ++l) {
        // Ring: rotation equivariance and g distinct entries.
        const auto& a = ring.tables_for(l);
        const auto& b = ring.tables_for(l % L + 1);
        REQUIRE(a.size() == g);
        for (std::size_t k = 0; k < g; ++k) CHECK(b[k] == a[k] % L + 1);
        CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == g);
        // NoRing: contiguous, in range, contains the layer itself.
        const auto& c = noring.tables_for(l);
        REQUIRE(c.size() == g);
        CHECK(c.front() >= 1);
        CHECK(c.back() <= L);
        CHECK(c.back() - c.front() == g - 1);
        CHECK((c.front() <= l && l <= c.back()));
      }
      for (auto mode : {SharingMode::kRing, SharingMode::kNoRing, SharingMode::kBlock}) {
        for (auto n : build_plan(L, g, mode).reference_counts()) CHECK(n >= 1);
      }
      if (L % g == 0) {
        for (auto n : build_plan(L, g, SharingMode::kBlock).reference_counts()) CHECK(n == g);
      }
    }
  }
}

TEST_CASE("effective key count") {
  CHECK(effective_key_count(964, 1) == 964);
  CHECK(effective_key_count(964, 4) == 1928);
  CHECK(effective_key_count(964, 9) == 2892);  // published figure is 2896
  CHECK(effective_key_count(964, 16) == 3856);
  CHECK_THROWS_AS(effective_key_count(0, 4), DomainError);
}

TEST_CASE("json form") {
  const auto j = plan_json(build_plan(24, 4, SharingMode::kRing));
  CHECK(j["mode"] == "ring");
  CHECK(j["assignments"][0] == nlohmann::json({24, 1, 2, 3}));
}
