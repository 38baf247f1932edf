#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "modalpatch/gradcheck.hpp"
#include "modalpatch/graph.hpp"
#include "modalpatch/rng.hpp"

using namespace modalpatch;

namespace {

Array rand_arr(Rng& rng, std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (double& v : a.data) v = rng.uniform(lo, hi);
  return a;
}

}  // namespace

TEST_CASE("matmul against hand-computed product") {
  ad::Graph g;
  ad::NodeId a = g.input("a", {2, 3});
  ad::NodeId b = g.input("b", {3, 2});
  ad::NodeId c = g.matmul(a, b);

  const ad::Evaluation ev = ad::evaluate(
      g, {{"a", Array::from({2, 3}, {1, 2, 3, 4, 5, 6})},
          {"b", Array::from({3, 2}, {7, 8, 9, 10, 11, 12})}});
  const Array& out = ev.value(c);
  CHECK(out.shape == std::vector<int>{2, 2});
  CHECK(out[0] == 58.0);   // 1*7 + 2*9 + 3*11
  CHECK(out[1] == 64.0);
  CHECK(out[2] == 139.0);
  CHECK(out[3] == 154.0);
}

TEST_CASE("conv1x1 against hand-computed channel mix") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {2, 1, 2});
  ad::NodeId w = g.input("w", {1, 2});
  ad::NodeId b = g.input("b", {1});
  ad::NodeId y = g.conv1x1(x, w, b);

  const ad::Evaluation ev = ad::evaluate(
      g, {{"x", Array::from({2, 1, 2}, {1, 2, 3, 4})},
          {"w", Array::from({1, 2}, {0.5, -1.0})},
          {"b", Array::from({1}, {0.25})}});
  CHECK(ev.value(y)[0] == doctest::Approx(-2.25));  // 0.5*1 - 3 + 0.25
  CHECK(ev.value(y)[1] == doctest::Approx(-2.75));
}

TEST_CASE("conv3x3 zero padding: all-ones kernel counts covered cells") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {1, 3, 3});
  ad::NodeId w = g.input("w", {1, 1, 3, 3});
  ad::NodeId b = g.input("b", {1});
  ad::NodeId y = g.conv3x3(x, w, b);

  const ad::Evaluation ev =
      ad::evaluate(g, {{"x", Array({1, 3, 3}, 1.0)},
                       {"w", Array({1, 1, 3, 3}, 1.0)},
                       {"b", Array({1})}});
  const Array& out = ev.value(y);
  CHECK(out.at(0, 1, 1) == 9.0);
  CHECK(out.at(0, 0, 0) == 4.0);  // corner: 2x2 in-bounds window
  CHECK(out.at(0, 0, 1) == 6.0);  // edge: 2x3 window
  CHECK(out.at(0, 2, 2) == 4.0);
}

TEST_CASE("softmax per spatial position") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {2, 1, 2});
  ad::NodeId s = g.softmax(x);

  Array in({2, 1, 2});
  in.at(0, 0, 0) = 0.0;
  in.at(1, 0, 0) = 0.0;
  in.at(0, 0, 1) = std::log(2.0);
  in.at(1, 0, 1) = 0.0;
  const ad::Evaluation ev = ad::evaluate(g, {{"x", in}});
  CHECK(ev.value(s).at(0, 0, 0) == doctest::Approx(0.5));
  CHECK(ev.value(s).at(1, 0, 0) == doctest::Approx(0.5));
  CHECK(ev.value(s).at(0, 0, 1) == doctest::Approx(2.0 / 3.0));
  CHECK(ev.value(s).at(1, 0, 1) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("softmax variants normalize exactly") {
  Rng rng(404);
  ad::Graph g;
  ad::NodeId x = g.input("x", {3, 4, 5});
  ad::NodeId sc = g.softmax(x);
  ad::NodeId ss = g.softmax_spatial(x);
  const ad::Evaluation ev = ad::evaluate(g, {{"x", rand_arr(rng, {3, 4, 5}, -4, 4)}});

  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 5; ++xx) {
      double sum = 0.0;
      for (int c = 0; c < 3; ++c) sum += ev.value(sc).at(c, y, xx);
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
  for (int c = 0; c < 3; ++c) {
    double sum = 0.0;
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 5; ++xx) sum += ev.value(ss).at(c, y, xx);
    CHECK(std::abs(sum - 1.0) <= 1e-12);
  }
}

TEST_CASE("bilinear sampling: lattice hit, cell center, padding, border blend") {
  // map values equal y*3 + x so every sample has a closed form
  Array map = Array::from({1, 3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});

  const auto sample1 = [&](double x, double y) {
    return ad::bilinear_sample(map, {{x, y}})[0][0];
  };
  CHECK(sample1(1.0, 1.0) == doctest::Approx(4.0));
  CHECK(sample1(1.5, 1.5) == doctest::Approx(6.0));  // mean of 4,5,7,8
  CHECK(sample1(0.25, 0.0) == doctest::Approx(0.25));
  CHECK(sample1(-1.5, -1.5) == doctest::Approx(0.0));   // fully outside
  CHECK(sample1(9.0, 1.0) == doctest::Approx(0.0));
  CHECK(sample1(-0.5, 1.0) == doctest::Approx(1.5));    // half padded: 0.5*3
  CHECK(sample1(2.5, 2.0) == doctest::Approx(4.0));     // 0.5*8 right edge

  // graph op: every output position samples its own coordinate channel pair
  ad::Graph g;
  ad::NodeId m = g.input("m", {1, 3, 3});
  ad::NodeId c = g.input("c", {2, 3, 3});
  ad::NodeId out = g.bilinear(m, c);
  Array coords({2, 3, 3});
  for (int i = 0; i < 9; ++i) {
    coords[i] = 1.5;      // x
    coords[9 + i] = 1.5;  // y
  }
  const ad::Evaluation ev = ad::evaluate(g, {{"m", map}, {"c", coords}});
  CHECK(ev.value(out).shape == std::vector<int>{1, 3, 3});
  for (int i = 0; i < 9; ++i) CHECK(ev.value(out)[i] == doctest::Approx(6.0));
}

TEST_CASE("backward of sum and mean are ones and 1/N") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {2, 2, 2}, true);
  ad::NodeId s = g.sum(x);
  Rng rng(5);
  const ad::Bindings bind{{"x", rand_arr(rng, {2, 2, 2})}};
  const ad::Evaluation ev = ad::evaluate(g, bind);
  const auto grads = ad::backward(g, ev, s);
  for (int64_t i = 0; i < 8; ++i) CHECK(grads.at("x")[i] == 1.0);

  ad::Graph g2;
  ad::NodeId x2 = g2.input("x", {2, 2, 2}, true);
  ad::NodeId m2 = g2.mean(x2);
  const ad::Evaluation ev2 = ad::evaluate(g2, bind);
  const auto grads2 = ad::backward(g2, ev2, m2);
  for (int64_t i = 0; i < 8; ++i) CHECK(grads2.at("x")[i] == doctest::Approx(0.125));
}

TEST_CASE("backward of elementwise product routes the other factor") {
  ad::Graph g;
  ad::NodeId a = g.input("a", {1, 2, 2}, true);
  ad::NodeId b = g.input("b", {1, 2, 2}, true);
  ad::NodeId loss = g.sum(g.mul(a, b));
  Rng rng(6);
  const Array av = rand_arr(rng, {1, 2, 2});
  const Array bv = rand_arr(rng, {1, 2, 2});
  const ad::Evaluation ev = ad::evaluate(g, {{"a", av}, {"b", bv}});
  const auto grads = ad::backward(g, ev, loss);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(grads.at("a")[i] == bv[i]);
    CHECK(grads.at("b")[i] == av[i]);
  }
}

TEST_CASE("clamp gradient vanishes outside the interval") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {1, 1, 4}, true);
  ad::NodeId loss = g.sum(g.clamp(x, -1.0, 1.0));
  const ad::Evaluation ev = ad::evaluate(
      g, {{"x", Array::from({1, 1, 4}, {-2.0, -0.5, 0.5, 2.0})}});
  const auto grads = ad::backward(g, ev, loss);
  CHECK(grads.at("x")[0] == 0.0);
  CHECK(grads.at("x")[1] == 1.0);
  CHECK(grads.at("x")[2] == 1.0);
  CHECK(grads.at("x")[3] == 0.0);
}

TEST_CASE("relu gradient is the step function away from the kink") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {1, 1, 2}, true);
  ad::NodeId loss = g.sum(g.relu(x));
  const ad::Evaluation ev =
      ad::evaluate(g, {{"x", Array::from({1, 1, 2}, {-3.0, 3.0})}});
  const auto grads = ad::backward(g, ev, loss);
  CHECK(grads.at("x")[0] == 0.0);
  CHECK(grads.at("x")[1] == 1.0);
}

TEST_CASE("bce with logits: closed-form value and saturation stability") {
  ad::Graph g;
  ad::NodeId z = g.input("z", {1, 1, 2});
  ad::NodeId t = g.input("t", {1, 1, 2});
  ad::NodeId loss = g.bce_logits(z, t);

  // z = 0 everywhere -> -log(0.5) = log 2 per cell regardless of target
  const ad::Evaluation ev = ad::evaluate(
      g, {{"z", Array({1, 1, 2})}, {"t", Array::from({1, 1, 2}, {1.0, 0.0})}});
  CHECK(ev.value(loss)[0] == doctest::Approx(std::log(2.0)));

  // saturated logits with matching targets -> loss ~ 0, never inf/nan
  const ad::Evaluation ev2 = ad::evaluate(
      g, {{"z", Array::from({1, 1, 2}, {40.0, -40.0})},
          {"t", Array::from({1, 1, 2}, {1.0, 0.0})}});
  CHECK(std::isfinite(ev2.value(loss)[0]));
  CHECK(ev2.value(loss)[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("log throws on non-positive input") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {1, 1, 1});
  ad::NodeId y = g.log(x);
  (void)y;
  CHECK_THROWS_AS(ad::evaluate(g, {{"x", Array({1, 1, 1}, 0.0)}}),
                  std::runtime_error);
  CHECK_THROWS_AS(ad::evaluate(g, {{"x", Array({1, 1, 1}, -1.0)}}),
                  std::runtime_error);
}

TEST_CASE("evaluate rejects missing bindings and wrong shapes") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {2, 2, 2});
  (void)x;
  CHECK_THROWS_AS(ad::evaluate(g, {}), std::runtime_error);
  CHECK_THROWS_AS(ad::evaluate(g, {{"x", Array({1, 2, 2})}}), std::runtime_error);
}

TEST_CASE("evaluate ignores extra bindings") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {1, 1, 1});
  ad::NodeId y = g.scale(x, 2.0);
  ad::Bindings bind{{"x", Array({1, 1, 1}, 3.0)}, {"unused", Array({5}, 1.0)}};
  CHECK(ad::evaluate(g, bind).value(y)[0] == 6.0);
}

TEST_CASE("named outputs are fetchable") {
  ad::Graph g;
  ad::NodeId x = g.input("x", {1, 1, 1});
  g.mark_output("double", g.scale(x, 2.0));
  g.mark_output("square", g.mul(x, x));
  const ad::Evaluation ev = ad::evaluate(g, {{"x", Array({1, 1, 1}, 4.0)}});
  const auto outs = ad::fetch_outputs(g, ev);
  CHECK(outs.at("double")[0] == 8.0);
  CHECK(outs.at("square")[0] == 16.0);
}

TEST_CASE("shape mismatches are rejected at build time") {
  ad::Graph g;
  ad::NodeId a = g.input("a", {2, 3, 3});
  ad::NodeId b = g.input("b", {3, 3, 3});
  CHECK_THROWS_AS(g.add(a, b), std::runtime_error);
  CHECK_THROWS_AS(g.matmul(a, b), std::runtime_error);  // rank-3 operands
  ad::NodeId w = g.input("w", {4, 5});
  CHECK_THROWS_AS(g.conv1x1(a, w, g.input("bb", {4})), std::runtime_error);
}

TEST_CASE("evaluation is bitwise deterministic") {
  Rng rng(99);
  const Array xv = rand_arr(rng, {4, 6, 6});
  const Array wv = rand_arr(rng, {3, 4});
  const Array bv = rand_arr(rng, {3});

  const auto run = [&]() {
    ad::Graph g;
    ad::NodeId x = g.input("x", {4, 6, 6});
    ad::NodeId w = g.input("w", {3, 4});
    ad::NodeId b = g.input("b", {3});
    ad::NodeId y = g.softmax(g.conv1x1(g.exp(g.scale(x, 0.5)), w, b));
    return ad::evaluate(g, {{"x", xv}, {"w", wv}, {"b", bv}}).value(y);
  };
  const Array r1 = run(), r2 = run();
  REQUIRE(r1.data.size() == r2.data.size());
  CHECK(std::memcmp(r1.data.data(), r2.data.data(),
                    r1.data.size() * sizeof(double)) == 0);
}

TEST_CASE("finite differences confirm every primitive and block across seeds") {
  for (uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    const auto results = gradcheck::run_suite(seed);
    for (const auto& r : results) {
      INFO(r.name << " @ seed " << seed);
      CHECK(r.max_rel_err < gradcheck::kTolerance);
    }
  }
}
