#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "crowdstat/errors.hpp"
#include "crowdstat/rank_tests.hpp"

using namespace crowdstat;

namespace {

double u_stat(const std::vector<double>& x, const std::vector<double>& y) {
  double u = 0;
  for (double a : x)
    for (double b : y) u += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  return u;
}

// Two-sided exact p by enumerating every split of the pooled sample.
double enumerate_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> pooled(x);
  pooled.insert(pooled.end(), y.begin(), y.end());
  const std::size_t n = pooled.size(), m = x.size();
  const double u = u_stat(x, y);
  std::size_t lo = 0, hi = 0, total = 0;
  std::vector<bool> pick(n, false);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(m), true);
  do {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < n; ++i) (pick[i] ? a : b).push_back(pooled[i]);
    const double v = u_stat(a, b);
    lo += v <= u;
    hi += v >= u;
    ++total;
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return std::min(1.0, 2.0 * std::min(lo, hi) / static_cast<double>(total));
}

}  // namespace

TEST_SUITE("rank_tests") {
  TEST_CASE("midranks and tie sums") {
    const std::vector<double> v{10, 20, 20, 5, 20};
    CHECK(rank_with_ties(v) == std::vector<double>{2, 4, 4, 1, 4});
    CHECK(tie_sum(v) == 24.0);
    CHECK(tie_sum(std::vector<double>{1, 2, 3}) == 0.0);
  }

  TEST_CASE("exact Mann-Whitney matches enumeration") {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
      const std::size_t m = 1 + rng() % 6, n = 1 + rng() % 6;
      std::vector<double> all(m + n);
      std::iota(all.begin(), all.end(), 1.0);
      std::shuffle(all.begin(), all.end(), rng);
      for (auto& v : all) v = std::exp(v / 3.0);
      const std::vector<double> x(all.begin(), all.begin() + m), y(all.begin() + m, all.end());
      const auto r = mann_whitney(x, y, MwMode::exact);
      CHECK(r.exact);
      CHECK(r.statistic == u_stat(x, y));
      CHECK(r.p_naive == doctest::Approx(enumerate_p(x, y)).epsilon(1e-12));
    }
  }

  TEST_CASE("tiny groups: U = 0 gives p = 1/3") {
    const auto r = mann_whitney(std::vector<double>{1, 2}, std::vector<double>{3, 4});
    CHECK(r.exact);
    CHECK(r.statistic == 0.0);
    CHECK(r.p_naive == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  }

  TEST_CASE("mode selection and exact-mode preconditions") {
    const std::vector<double> tied_x{1, 2, 2}, tied_y{2, 3, 4};
    CHECK_FALSE(mann_whitney(tied_x, tied_y).exact);
    CHECK(mann_whitney(tied_x, tied_y).tie_correction_applied);
    CHECK_THROWS_AS(mann_whitney(tied_x, tied_y, MwMode::exact), StatError);
    std::vector<double> big(13);
    std::iota(big.begin(), big.end(), 0.0);
    const std::vector<double> x(big.begin(), big.begin() + 6), y(big.begin() + 6, big.end());
    CHECK_FALSE(mann_whitney(x, y).exact);
    CHECK_THROWS_AS(mann_whitney(x, y, MwMode::exact), StatError);
    CHECK_THROWS_AS(mann_whitney(std::vector<double>{}, y), StatError);
  }

  TEST_CASE("normal approximation against the textbook formula") {
    const std::vector<double> x{1.5, 2, 2, 7, 9, 11, 3}, y{4, 4, 5, 6, 8, 10, 12, 13};
    const auto r = mann_whitney(x, y, MwMode::normal);
    const double m = 7, n = 8, N = 15;
    std::vector<double> pooled(x);
    pooled.insert(pooled.end(), y.begin(), y.end());
    const double t = tie_sum(pooled);
    const double var = m * n / 12.0 * ((N + 1) - t / (N * (N - 1)));
    const double u = u_stat(x, y);
    const double d = u - m * n / 2;
    const double z = (d > 0 ? d - 0.5 : d + 0.5) / std::sqrt(var);
    CHECK(r.statistic == u);
    CHECK(*r.z == doctest::Approx(z).epsilon(1e-12));
    CHECK(r.p_naive == doctest::Approx(std::erfc(std::abs(z) / std::sqrt(2.0))).epsilon(1e-12));
  }

  TEST_CASE("Kruskal-Wallis with two groups is z squared") {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> x(3 + rng() % 10), y(3 + rng() % 10);
      for (auto& v : x) v = static_cast<double>(rng() % 8);  // plenty of ties
      for (auto& v : y) v = static_cast<double>(rng() % 8);
      std::vector<double> both(x);
      both.insert(both.end(), y.begin(), y.end());
      if (tie_sum(both) == std::pow(static_cast<double>(both.size()), 3) - both.size()) continue;
      const auto h = kruskal_wallis({x, y});
      const double z = mann_whitney_z(x, y, false);
      CHECK(h.statistic == doctest::Approx(z * z).epsilon(1e-10));
      CHECK(h.p_naive == doctest::Approx(normal_two_sided_p(z)).epsilon(1e-9));
    }
  }

  TEST_CASE("rank tests are invariant to monotone transforms") {
    const std::vector<double> a{0.3, 1.7, 2.2, 5.0, 0.9}, b{2.5, 3.3, 4.1, 0.1, 6.6, 7.0}, c{1.1, 8.0, 9.5};
    auto tr = [](std::vector<double> v) {
      for (auto& x : v) x = std::log1p(x) * 3 - 11;
      return v;
    };
    CHECK(mann_whitney(a, b).p_naive == mann_whitney(tr(a), tr(b)).p_naive);
    CHECK(kruskal_wallis({a, b, c}).statistic == doctest::Approx(kruskal_wallis({tr(a), tr(b), tr(c)}).statistic));
  }

  TEST_CASE("degenerate and invalid Kruskal-Wallis input") {
    const auto r = kruskal_wallis({{2, 2}, {2, 2, 2}});
    CHECK(r.degenerate);
    CHECK(r.statistic == 0.0);
    CHECK(r.p_naive == 1.0);
    CHECK_THROWS_AS(kruskal_wallis({{1, 2, 3}}), StatError);
  }

  TEST_CASE("distribution tails") {
    CHECK(chi_square_sf(3.841458820694124, 1) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(chi_square_sf(5.991464547107979, 2) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(normal_two_sided_p(1.959963984540054) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(normal_two_sided_p(0.0) == 1.0);
  }

  TEST_CASE("ess adjustment") {
    GroupedSample s;
    for (int i = 0; i < 30; ++i) {
      s.values.push_back(i + (i % 2 ? 10.0 : 0.0));
      s.group.push_back(i % 2);
      s.region.push_back(static_cast<std::size_t>(i / 3));
    }
    const std::vector<double> ones{1.0, 1.0};
    const auto unit = adjusted_test(TestMethod::mann_whitney, s, Adjustment::ess, ones);
    std::vector<double> g0, g1;
    for (std::size_t i = 0; i < s.values.size(); ++i) (s.group[i] ? g1 : g0).push_back(s.values[i]);
    CHECK(*unit.p_adjusted == doctest::Approx(mann_whitney(g0, g1, MwMode::normal).p_naive).epsilon(1e-12));
    const std::vector<double> two{2.0, 2.0};
    const auto halved = adjusted_test(TestMethod::mann_whitney, s, Adjustment::ess, two);
    CHECK(*halved.p_adjusted > *unit.p_adjusted);
    CHECK(halved.p_naive == unit.p_naive);
    CHECK(*halved.z_adjusted == doctest::Approx(*unit.z_adjusted / std::sqrt(2.0)).epsilon(1e-14));
    const auto quartered = adjusted_test(TestMethod::mann_whitney, s, Adjustment::ess, std::vector<double>{4.0, 4.0});
    CHECK(std::abs(*quartered.z_adjusted) == doctest::Approx(std::abs(*unit.z) / 2.0).epsilon(1e-14));
    CHECK(*quartered.p_adjusted >= quartered.p_naive);
    CHECK(unit.p_adjusted == unit.p_naive);
    const auto kw = adjusted_test(TestMethod::kruskal_wallis, s, Adjustment::ess, two);
    CHECK(*kw.p_adjusted > kw.p_naive);
    CHECK_THROWS(adjusted_test(TestMethod::mann_whitney, s, Adjustment::ess, std::vector<double>{0.5, 1.0}));
  }

  TEST_CASE("permutation adjustments") {
    GroupedSample s;
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    for (std::size_t r = 0; r < 12; ++r) {
      const double shift = nd(rng);
      for (int k = 0; k < 5; ++k) {
        s.values.push_back(shift + 0.3 * nd(rng));
        s.group.push_back(r < 6 ? 0 : 1);
        s.region.push_back(r);
      }
    }
    PermutationOptions opt{499, 21, 1};
    const auto a = adjusted_test(TestMethod::mann_whitney, s, Adjustment::region_perm, {}, opt);
    opt.threads = 3;
    const auto b = adjusted_test(TestMethod::mann_whitney, s, Adjustment::region_perm, {}, opt);
    CHECK(*a.p_adjusted == *b.p_adjusted);
    CHECK(*a.p_adjusted >= 1.0 / 500.0);
    CHECK(*a.p_adjusted <= 1.0);
    // Clustering makes region-level evidence weaker than the naive test suggests.
    CHECK(*a.p_adjusted > a.p_naive);
    CHECK(a.n_perm == 499);

    // Labels vary within regions: region_perm is undefined, block_perm applies.
    GroupedSample mixed = s;
    for (std::size_t i = 0; i < mixed.group.size(); ++i) mixed.group[i] = static_cast<int>(i % 2);
    CHECK_THROWS_AS(adjusted_test(TestMethod::mann_whitney, mixed, Adjustment::region_perm, {}, opt), StatError);
    const auto blk = adjusted_test(TestMethod::kruskal_wallis, mixed, Adjustment::block_perm, {}, opt);
    CHECK(*blk.p_adjusted > 0.0);

    GroupedSample few;
    few.values = {1, 2, 3, 4};
    few.group = {0, 0, 1, 1};
    few.region = {0, 0, 1, 1};
    try {
      adjusted_test(TestMethod::mann_whitney, few, Adjustment::region_perm, {}, opt);
      FAIL("expected StatError");
    } catch (const StatError& e) {
      CHECK(std::string(e.what()).find("insufficient exchangeable units") != std::string::npos);
    }
    CHECK(log_distinct_permutations(few, Adjustment::region_perm) == doctest::Approx(std::log(2.0)));
  }
}
