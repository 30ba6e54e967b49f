#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "scinet/errors.hpp"
#include "scinet/rf.hpp"
#include "scinet/rng.hpp"

using namespace scinet;
using namespace scinet::rf;

namespace {

std::vector<LayerSpec> five_stage_chain(bool dilated_last) {
  std::vector<LayerSpec> chain;
  for (int s = 1; s <= 5; ++s) {
    const bool dilate = dilated_last && s == 5;
    chain.push_back({"stage" + std::to_string(s), LayerKind::Conv, 3, dilate ? 1 : 2, dilate ? 2 : 1});
  }
  return chain;
}

}  // namespace

TEST_CASE("effective_kernel") {
  CHECK(effective_kernel(3, 1) == 3);
  CHECK(effective_kernel(3, 2) == 5);
  CHECK(effective_kernel(3, 3) == 7);
  CHECK(effective_kernel(3, 18) == 37);
  CHECK(effective_kernel(1, 7) == 1);
  CHECK_THROWS_AS(effective_kernel(0, 1), ConfigError);
}

TEST_CASE("stack_rf") {
  CHECK(stack_rf(3, 3) == 5);
  CHECK(stack_rf(7, 13) == 19);
  std::vector<std::int64_t> ks = {7, 13, 25, 37};
  CHECK(std::accumulate(ks.begin(), ks.end(), std::int64_t{1}, stack_rf) == 79);

  SUBCASE("every permutation of the dense branch kernels folds to 79") {
    std::sort(ks.begin(), ks.end());
    do {
      CHECK(std::accumulate(ks.begin() + 1, ks.end(), ks.front(), stack_rf) == 79);
    } while (std::next_permutation(ks.begin(), ks.end()));
  }

  SUBCASE("associative and commutative on random values") {
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
      const auto a = static_cast<std::int64_t>(1 + rng.below(100));
      const auto b = static_cast<std::int64_t>(1 + rng.below(100));
      const auto c = static_cast<std::int64_t>(1 + rng.below(100));
      CHECK(stack_rf(a, b) == stack_rf(b, a));
      CHECK(stack_rf(stack_rf(a, b), c) == stack_rf(a, stack_rf(b, c)));
    }
  }
}

TEST_CASE("analyze_chain") {
  SUBCASE("five stride-2 stages reach output stride 32") {
    CHECK(analyze_chain(five_stage_chain(false)).back().output_stride == 32);
  }
  SUBCASE("stride-1 dilation-2 final stage keeps output stride 16") {
    const auto states = analyze_chain(five_stage_chain(true));
    CHECK(states.back().output_stride == 16);
    CHECK(states.back().effective_kernel == 5);
  }
  SUBCASE("single 3x3 layer") {
    const auto s = analyze_chain({{"c", LayerKind::Conv, 3, 1, 1}}).back();
    CHECK(s.receptive_field == 3);
    CHECK(s.jump == 1);
    CHECK(s.output_stride == 1);
  }
  SUBCASE("stride enters the receptive field through the jump") {
    // 3x3/s2 then 3x3/s1: R = 3 + 2 * 2 = 7
    const auto s = analyze_chain({{"a", LayerKind::Conv, 3, 2, 1}, {"b", LayerKind::Conv, 3, 1, 1}});
    CHECK(s.back().receptive_field == 7);
  }
  SUBCASE("upsampling divides the jump") {
    const auto s = analyze_chain({{"a", LayerKind::Conv, 3, 2, 1}, {"up", LayerKind::Upsample, 1, 2, 1}});
    CHECK(s.back().output_stride == 1);
    CHECK_THROWS_AS(analyze_chain({{"up", LayerKind::Upsample, 1, 2, 1}}), ConfigError);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(analyze_chain({}), ConfigError);
    try {
      analyze_chain({{"ok", LayerKind::Conv, 3, 1, 1}, {"bad", LayerKind::Conv, 3, 0, 1}});
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
    }
  }
  SUBCASE("identity layers anywhere leave the final state unchanged") {
    Rng rng(2);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<LayerSpec> chain;
      const int len = 1 + static_cast<int>(rng.below(8));
      for (int i = 0; i < len; ++i) {
        chain.push_back({"l" + std::to_string(i), rng.bernoulli(0.2) ? LayerKind::Pool : LayerKind::Conv,
                         1 + 2 * static_cast<int>(rng.below(3)), 1 + static_cast<int>(rng.below(2)),
                         1 + static_cast<int>(rng.below(4))});
      }
      auto padded = chain;
      const int inserts = 1 + static_cast<int>(rng.below(4));
      for (int i = 0; i < inserts; ++i) {
        padded.insert(padded.begin() + static_cast<std::ptrdiff_t>(rng.below(padded.size() + 1)),
                      LayerSpec{"id", LayerKind::Identity, 1, 1, 1});
      }
      const auto a = analyze_chain(chain).back();
      const auto b = analyze_chain(padded).back();
      CHECK(a.receptive_field == b.receptive_field);
      CHECK(a.jump == b.jump);
      CHECK(a.output_stride == b.output_stride);
    }
  }
}

TEST_CASE("enumerate_pyramid_scales") {
  SUBCASE("dense cascade, rates 3/6/12/18") {
    const auto s = enumerate_pyramid_scales(Topology::Dense, {3, 6, 12, 18}, 3);
    CHECK(s.effective_kernels == std::vector<int>{7, 13, 25, 37});
    CHECK(s.combinations.size() == 16);
    CHECK(s.max_rf == 79);
    CHECK(s.combinations.front() == 1);
    // {13, 25} collides with {37}: both 37
    CHECK(s.combinations[0b0110] == 37);
    CHECK(s.combinations[0b1000] == 37);
    CHECK(s.distinct.size() < s.combinations.size());
  }
  SUBCASE("parallel ASPP, rates 8/12/18") {
    const auto s = enumerate_pyramid_scales(Topology::Parallel, {8, 12, 18}, 3);
    CHECK(s.combinations == std::vector<std::int64_t>{17, 25, 37});
    CHECK(s.max_rf == 37);
  }
  SUBCASE("dense, single rate 3") {
    const auto s = enumerate_pyramid_scales(Topology::Dense, {3}, 3);
    CHECK(s.distinct == std::set<std::int64_t>{1, 7});
  }
  CHECK_THROWS_AS(enumerate_pyramid_scales(Topology::Dense, {}, 3), ConfigError);
}

TEST_CASE("report formatting") {
  const auto states = analyze_chain(five_stage_chain(true));
  const auto text = format_chain(states);
  CHECK(text.find("stage5") != std::string::npos);
  const auto j = chain_to_json(states);
  CHECK(j.size() == 5);
  CHECK(j[4]["output_stride"] == 16);
  const auto p = format_pyramid(enumerate_pyramid_scales(Topology::Dense, {3, 6, 12, 18}, 3));
  CHECK(p.find("max RF 79, combinations 16") != std::string::npos);
}
