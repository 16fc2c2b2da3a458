#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "clickseg/losses.hpp"
#include "clickseg/ops.hpp"
#include "clickseg/rng.hpp"

using namespace clickseg;

namespace {

Tensor random_logits(Index h, Index w, Index k, Rng& rng, double lo = -2.0, double hi = 2.0) {
  std::vector<double> data(static_cast<std::size_t>(h * w * k));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data({h, w, k}, std::move(data));
}

Mask random_mask(Index h, Index w, Index k, Rng& rng) {
  Mask m(h, w);
  for (auto& v : m.data) v = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(k)));
  return m;
}

// independent per-pixel cross-entropy: softmax with max shift, then
// -log(p_label + eps) with the documented epsilon
std::vector<double> oracle_pixel_ce(const Tensor& logits, const Mask& gt) {
  const Index h = logits.shape()[0], w = logits.shape()[1], k = logits.shape()[2];
  std::vector<double> out(static_cast<std::size_t>(h * w));
  for (Index p = 0; p < h * w; ++p) {
    double mx = logits.at(p * k);
    for (Index c = 1; c < k; ++c) mx = std::max(mx, logits.at(p * k + c));
    double z = 0.0;
    for (Index c = 0; c < k; ++c) z += std::exp(logits.at(p * k + c) - mx);
    const double prob = std::exp(logits.at(p * k + gt.data[static_cast<std::size_t>(p)]) - mx) / z;
    out[static_cast<std::size_t>(p)] = -std::log(prob + kCeEps);
  }
  return out;
}

double oracle_bootstrapped_ce(const Tensor& logits, const Mask& gt, double r) {
  std::vector<double> ce = oracle_pixel_ce(logits, gt);
  std::sort(ce.begin(), ce.end(), std::greater<>());
  const std::size_t keep = static_cast<std::size_t>(
      std::ceil(r * static_cast<double>(ce.size())));
  double acc = 0.0;
  for (std::size_t i = 0; i < keep; ++i) acc += ce[i];
  return acc / static_cast<double>(keep);
}

double oracle_dice(const Tensor& logits, const Mask& gt) {
  const Index h = logits.shape()[0], w = logits.shape()[1], k = logits.shape()[2];
  std::vector<double> inter(static_cast<std::size_t>(k), 0.0);
  std::vector<double> psum(static_cast<std::size_t>(k), 0.0);
  std::vector<double> gsum(static_cast<std::size_t>(k), 0.0);
  for (Index p = 0; p < h * w; ++p) {
    double mx = logits.at(p * k);
    for (Index c = 1; c < k; ++c) mx = std::max(mx, logits.at(p * k + c));
    double z = 0.0;
    for (Index c = 0; c < k; ++c) z += std::exp(logits.at(p * k + c) - mx);
    for (Index c = 0; c < k; ++c) {
      const double prob = std::exp(logits.at(p * k + c) - mx) / z;
      psum[static_cast<std::size_t>(c)] += prob;
      if (gt.data[static_cast<std::size_t>(p)] == c) {
        inter[static_cast<std::size_t>(c)] += prob;
        gsum[static_cast<std::size_t>(c)] += 1.0;
      }
    }
  }
  double acc = 0.0;
  int present = 0;
  for (Index c = 0; c < k; ++c) {
    if (gsum[static_cast<std::size_t>(c)] == 0.0) continue;
    ++present;
    acc += 2.0 * inter[static_cast<std::size_t>(c)] /
           (psum[static_cast<std::size_t>(c)] + gsum[static_cast<std::size_t>(c)] + kDiceEps);
  }
  return 1.0 - acc / present;
}

}  // namespace

TEST_CASE("bootstrapped cross-entropy") {
  SUBCASE("r = 1 collapses to the ordinary mean") {
    Rng rng(11);
    Tensor logits = random_logits(3, 5, 4, rng);
    Mask gt = random_mask(3, 5, 4, rng);

    const std::vector<double> ce = oracle_pixel_ce(logits, gt);
    double mean_ce = 0.0;
    for (double v : ce) mean_ce += v;
    mean_ce /= static_cast<double>(ce.size());

    CHECK(loss_bootstrapped_ce(logits, gt, 1.0).item() ==
          doctest::Approx(mean_ce).epsilon(1e-12));
  }

  SUBCASE("confident correct logits drive the loss to zero") {
    Mask gt(2, 2);
    gt.data = {0, 1, 2, 1};
    std::vector<double> data(2 * 2 * 3, -30.0);
    for (Index p = 0; p < 4; ++p) data[p * 3 + gt.data[static_cast<std::size_t>(p)]] = 30.0;
    Tensor logits = Tensor::from_data({2, 2, 3}, std::move(data));
    CHECK(loss_bootstrapped_ce(logits, gt, 1.0).item() < 1e-9);
    CHECK(loss_bootstrapped_ce(logits, gt, 0.5).item() < 1e-9);
  }

  SUBCASE("four-pixel hand case keeps the two largest values at r = 0.5") {
    // per-pixel CE values engineered to be distinct: pixel margins 0, 1, 2, 3
    Mask gt(2, 2);
    gt.data = {0, 0, 0, 0};
    std::vector<double> data = {
        0.0, 0.0,  // pixel 0: ce = ln 2
        1.0, 0.0,  // pixel 1
        2.0, 0.0,  // pixel 2
        3.0, 0.0,  // pixel 3: smallest ce
    };
    Tensor logits = Tensor::from_data({2, 2, 2}, std::move(data));

    auto ce_of = [](double margin) { return std::log(1.0 + std::exp(-margin)); };
    const double expect = (ce_of(0.0) + ce_of(1.0)) / 2.0;
    CHECK(loss_bootstrapped_ce(logits, gt, 0.5).item() ==
          doctest::Approx(expect).epsilon(1e-12));
    CHECK(loss_bootstrapped_ce(logits, gt, 0.5).item() ==
          doctest::Approx(oracle_bootstrapped_ce(logits, gt, 0.5)).epsilon(1e-12));
  }

  SUBCASE("the kept count is the ceiling of r times the pixel count") {
    Rng rng(13);
    Tensor logits = random_logits(1, 5, 3, rng);
    Mask gt = random_mask(1, 5, 3, rng);
    // 5 pixels, r = 0.5 -> ceil(2.5) = 3 kept
    CHECK(loss_bootstrapped_ce(logits, gt, 0.5).item() ==
          doctest::Approx(oracle_bootstrapped_ce(logits, gt, 0.5)).epsilon(1e-12));
    // r = 0.2 -> exactly 1 kept: the max
    std::vector<double> ce = oracle_pixel_ce(logits, gt);
    CHECK(loss_bootstrapped_ce(logits, gt, 0.2).item() ==
          doctest::Approx(*std::max_element(ce.begin(), ce.end())).epsilon(1e-12));
  }

  SUBCASE("random instances match the brute-force oracle") {
    Rng rng(17);
    for (int trial = 0; trial < 25; ++trial) {
      const Index k = 2 + static_cast<Index>(rng.below(3));
      Tensor logits = random_logits(4, 4, k, rng);
      Mask gt = random_mask(4, 4, k, rng);
      const double r = rng.uniform(0.05, 1.0);
      CHECK(loss_bootstrapped_ce(logits, gt, r).item() ==
            doctest::Approx(oracle_bootstrapped_ce(logits, gt, r)).epsilon(1e-12));
    }
  }

  SUBCASE("top-k mean never drops below the full mean") {
    Rng rng(19);
    for (int trial = 0; trial < 25; ++trial) {
      Tensor logits = random_logits(3, 3, 3, rng);
      Mask gt = random_mask(3, 3, 3, rng);
      const double full = loss_bootstrapped_ce(logits, gt, 1.0).item();
      double prev = full;
      for (double r : {0.8, 0.5, 0.3, 0.12}) {
        const double trimmed = loss_bootstrapped_ce(logits, gt, r).item();
        CHECK(trimmed >= prev - 1e-12);  // shrinking r never lowers the mean
        prev = trimmed;
      }
    }
  }

  SUBCASE("invalid inputs are rejected") {
    Rng rng(23);
    Tensor logits = random_logits(2, 2, 3, rng);
    Mask gt = random_mask(2, 2, 3, rng);
    CHECK_THROWS_AS(loss_bootstrapped_ce(logits, gt, 0.0), ConfigError);
    CHECK_THROWS_AS(loss_bootstrapped_ce(logits, gt, -0.2), ConfigError);
    CHECK_THROWS_AS(loss_bootstrapped_ce(logits, gt, 1.2), ConfigError);

    Mask big = gt;
    big.data[0] = 3;  // label beyond the 3 channels
    CHECK_THROWS_AS(loss_bootstrapped_ce(logits, big, 0.5), ShapeError);

    Mask small(2, 1);
    CHECK_THROWS_AS(loss_bootstrapped_ce(logits, small, 0.5), ShapeError);

    Tensor flat = Tensor::zeros({4, 3});
    CHECK_THROWS_AS(loss_bootstrapped_ce(flat, gt, 0.5), ShapeError);
  }
}

TEST_CASE("dice loss") {
  SUBCASE("probabilities matching one-hot ground truth score near zero") {
    Mask gt(2, 2);
    gt.data = {0, 1, 1, 0};
    std::vector<double> data(2 * 2 * 2, -30.0);
    for (Index p = 0; p < 4; ++p) data[p * 2 + gt.data[static_cast<std::size_t>(p)]] = 30.0;
    Tensor logits = Tensor::from_data({2, 2, 2}, std::move(data));
    CHECK(loss_dice(logits, gt).item() < 1e-5);
    CHECK(loss_dice(logits, gt).item() >= 0.0);
  }

  SUBCASE("uniform two-class probabilities on a one-class map give one third") {
    // dice_1 = 2 * 0.5P / (0.5P + P) = 2/3, so the loss is 1/3
    Tensor logits = Tensor::zeros({4, 4, 2});
    Mask gt(4, 4, 1);
    CHECK(loss_dice(logits, gt).item() == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
  }

  SUBCASE("background counts as a class when present") {
    // half the map background, half object, uniform probabilities: both
    // classes score 2 * 0.5 * 8 / (8 + 8 + eps) = 1/2, so the loss is 1/2
    Tensor logits = Tensor::zeros({4, 4, 2});
    Mask gt(4, 4, 0);
    for (Index x = 0; x < 4; ++x) gt.at(0, x) = gt.at(1, x) = 1;
    CHECK(loss_dice(logits, gt).item() == doctest::Approx(0.5).epsilon(1e-6));
  }

  SUBCASE("random three-class instances match the brute-force formula") {
    Rng rng(29);
    for (int trial = 0; trial < 25; ++trial) {
      Tensor logits = random_logits(4, 4, 3, rng);
      Mask gt = random_mask(4, 4, 3, rng);
      CHECK(loss_dice(logits, gt).item() ==
            doctest::Approx(oracle_dice(logits, gt)).epsilon(1e-12));
    }
  }

  SUBCASE("absent classes are excluded from the mean") {
    Rng rng(31);
    Tensor logits = random_logits(3, 3, 4, rng);
    Mask gt(3, 3, 2);  // only class 2 present
    CHECK(loss_dice(logits, gt).item() ==
          doctest::Approx(oracle_dice(logits, gt)).epsilon(1e-12));
  }

  SUBCASE("invalid inputs are rejected") {
    Rng rng(37);
    Tensor logits = random_logits(2, 2, 3, rng);
    Mask big = random_mask(2, 2, 3, rng);
    big.data[1] = 7;
    CHECK_THROWS_AS(loss_dice(logits, big), ShapeError);
    CHECK_THROWS_AS(loss_dice(logits, Mask(3, 2)), ShapeError);
  }
}

TEST_CASE("loss gradients agree with finite differences") {
  // well-separated per-pixel losses keep the top-k selection stable under
  // the finite-difference probes
  Mask gt(2, 2);
  gt.data = {0, 1, 0, 1};
  std::vector<double> data = {
      0.4,  -0.1,  //
      -0.8, 0.9,   //
      1.5,  0.2,   //
      -0.3, -1.1,  //
  };
  Tensor base = Tensor::from_data({2, 2, 2}, std::move(data));

  SUBCASE("bootstrapped cross-entropy, full and trimmed") {
    for (double r : {1.0, 0.5}) {
      ScalarFn fn = [&, r](const std::vector<Tensor>& in) {
        return loss_bootstrapped_ce(in[0], gt, r);
      };
      Tensor logits = Tensor::from_data(base.shape(),
                                        {base.values().begin(), base.values().end()},
                                        /*requires_grad=*/true);
      GradCheckReport report = grad_check(fn, {logits});
      CHECK(report.pass);
    }
  }

  SUBCASE("dice") {
    ScalarFn fn = [&](const std::vector<Tensor>& in) { return loss_dice(in[0], gt); };
    Tensor logits = Tensor::from_data(base.shape(),
                                      {base.values().begin(), base.values().end()},
                                      /*requires_grad=*/true);
    GradCheckReport report = grad_check(fn, {logits});
    CHECK(report.pass);
  }
}
