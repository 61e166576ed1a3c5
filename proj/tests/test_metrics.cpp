#include <cmath>
#include <numeric>

#include "doctest.h"

#include "mfuse/heads.hpp"
#include "mfuse/metrics.hpp"

using namespace mfuse;

namespace {

using V = std::vector<double>;

struct HeadFixture {
  ParamStore store;
  PredictionHead head;
  HeadFixture(std::size_t in, Task task, std::size_t n) {
    Rng rng(1);
    head = PredictionHead::create(store, "head", in, task, n, rng);
  }
};

}  // namespace

TEST_CASE("multilabel head") {
  HeadFixture fx(3, Task::multilabel, 4);
  SUBCASE("zero weights give uniform rows") {
    for (double& v : fx.store[fx.head.fc.weight].value.values()) v = 0.0;
    Graph g;
    Forward f(g, fx.store, false, Rng(0));
    const Tensor p = fx.head(f, Tensor({2, 3}, 1.0));
    CHECK(p.shape() == Shape{2, 4});
    for (double v : p.values()) CHECK(v == 0.25);
  }
  SUBCASE("a dominant logit saturates without overflow") {
    for (double& v : fx.store[fx.head.fc.weight].value.values()) v = 0.0;
    fx.store[fx.head.fc.bias].value = Tensor({4}, {0, 1000, 0, 0});
    Graph g;
    Forward f(g, fx.store, false, Rng(0));
    const Tensor p = fx.head(f, Tensor({1, 3}, 1.0));
    CHECK(p[1] == doctest::Approx(1.0));
    CHECK(p.all_finite());
  }
  SUBCASE("rows sum to one") {
    Rng rng(2);
    Tensor x({5, 3});
    for (double& v : x.values()) v = rng.normal(0, 3);
    Graph g;
    Forward f(g, fx.store, false, Rng(0));
    const Tensor p = fx.head(f, x);
    for (std::size_t r = 0; r < 5; ++r) CHECK(std::abs(p[r * 4] + p[r * 4 + 1] + p[r * 4 + 2] + p[r * 4 + 3] - 1.0) <= 1e-12);
    CHECK_THROWS_AS(fx.head(f, Tensor({5, 2})), ShapeError);
  }
}

TEST_CASE("binary head") {
  HeadFixture fx(2, Task::binary, 1);
  Graph g;
  Forward f(g, fx.store, false, Rng(0));
  for (double& v : fx.store[fx.head.fc.weight].value.values()) v = 0.0;
  const Tensor half = fx.head(f, Tensor({3, 2}, 5.0));
  CHECK(half.shape() == Shape{3});
  for (double v : half.values()) CHECK(v == 0.5);
  CHECK(g.sigmoid(Tensor({1}, {20.0})).item() > 0.999999);
  for (double x : {-30.0, -2.5, 0.1, 7.0}) {
    CHECK(std::abs(g.sigmoid(Tensor({1}, {x})).item() + g.sigmoid(Tensor({1}, {-x})).item() - 1.0) <= 1e-12);
  }
  CHECK_THROWS_AS(predict_binary(f, Linear{fx.head.fc.weight, fx.head.fc.bias, 2, 3}, Tensor({3, 2})), ShapeError);
}

TEST_CASE("bce loss") {
  Graph g;
  CHECK(bce_loss(g, Tensor({1}, {0.5}), Tensor({1}, {1.0})).item() == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(bce_loss(g, Tensor({1, 2}, {0.5, 0.5}), Tensor({1, 2}, {1.0, 0.0})).item() ==
        doctest::Approx(1.386294).epsilon(1e-6));
  const double perfect = bce_loss(g, Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}), Tensor({2, 2}, {1, 0, 0, 1})).item();
  CHECK(perfect >= 0.0);
  CHECK(perfect <= 2.0 * -std::log(1.0 - 1e-12) + 1e-15);
  CHECK_THROWS_AS(bce_loss(g, Tensor({2}), Tensor({3})), ShapeError);
}

TEST_CASE("top-k recall") {
  SUBCASE("half of the positives in the top k") {
    Tensor scores({1, 12}), truth({1, 12});
    for (std::size_t j = 0; j < 12; ++j) scores[j] = 12.0 - static_cast<double>(j);
    scores[5] = -1.0;  // label 5 drops out of the top 10
    truth[2] = truth[5] = 1.0;
    CHECK(topk_recall(scores, truth, 10) == 0.5);
  }
  SUBCASE("positives ranked first") {
    const Tensor scores({1, 4}, {0.9, 0.8, 0.1, 0.2}), truth({1, 4}, {1, 1, 0, 0});
    CHECK(topk_recall(scores, truth, 2) == 1.0);
  }
  SUBCASE("ties go to the lower index") {
    const Tensor scores({1, 3}, {0.5, 0.5, 0.5}), truth({1, 3}, {0, 0, 1});
    CHECK(topk_recall(scores, truth, 2) == 0.0);
    const Tensor truth0({1, 3}, {1, 0, 0});
    CHECK(topk_recall(scores, truth0, 1) == 1.0);
  }
  SUBCASE("samples without positives are excluded") {
    const Tensor scores({2, 3}, {0.1, 0.2, 0.3, 0.3, 0.2, 0.1}), truth({2, 3}, {0, 0, 0, 1, 0, 0});
    CHECK(topk_recall(scores, truth, 1) == 1.0);
  }
  SUBCASE("random 5x8 at k = 3 against sort and intersect") {
    Rng rng(3);
    Tensor scores({5, 8}), truth({5, 8});
    for (std::size_t i = 0; i < 40; ++i) {
      scores[i] = rng.uniform();
      truth[i] = rng.bernoulli(0.3) ? 1.0 : 0.0;
    }
    for (std::size_t r = 0; r < 5; ++r) truth[r * 8] = 1.0;
    double total = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      std::vector<std::size_t> idx(8);
      std::iota(idx.begin(), idx.end(), 0);
      std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[r * 8 + a] > scores[r * 8 + b]; });
      double pos = 0.0, hit = 0.0;
      for (std::size_t j = 0; j < 8; ++j) pos += truth[r * 8 + j];
      for (std::size_t j = 0; j < 3; ++j) hit += truth[r * 8 + idx[j]];
      total += hit / pos;
    }
    CHECK(topk_recall(scores, truth, 3) == doctest::Approx(total / 5.0).epsilon(1e-15));
  }
  SUBCASE("errors") {
    const Tensor scores({1, 3}, {0.1, 0.2, 0.3}), truth({1, 3}, {1, 0, 0});
    CHECK_THROWS(topk_recall(scores, truth, 4));
    CHECK_THROWS(topk_recall(scores, truth, 0));
  }
}

TEST_CASE("auroc") {
  CHECK(auroc(V{0.9, 0.1}, V{1, 0}) == 1.0);
  CHECK(auroc(V{0.3, 0.3, 0.3}, V{1, 0, 1}) == 0.5);
  CHECK(auroc(V{0.8, 0.6, 0.4, 0.2}, V{1, 0, 1, 0}) == 0.75);
  // Invariant under a strictly increasing transform.
  const V s = {0.1, 0.7, 0.3, 0.9, 0.5}, y = {0, 1, 0, 1, 1};
  V t;
  for (double v : s) t.push_back(std::exp(3 * v) - 2);
  CHECK(auroc(s, y) == auroc(t, y));
  try {
    auroc(V{0.1, 0.2}, V{1, 1});
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("2 positives and 0 negatives") != std::string::npos);
  }
}

TEST_CASE("aupr") {
  CHECK(aupr(V{0.9, 0.8, 0.2, 0.1}, V{1, 1, 0, 0}) == 1.0);
  CHECK(aupr(V{0.9, 0.8, 0.7, 0.1}, V{0, 0, 0, 1}) == 0.25);
  // Rank walk: positives at ranks 2, 3 and 6 of 6.
  const V s = {0.3, 0.9, 0.8, 0.95, 0.1, 0.5}, y = {1, 1, 0, 0, 0, 1};
  // Descending order: 3(0), 1(1), 2(0), 5(1), 0(1), 4(0).
  CHECK(aupr(s, y) == doctest::Approx((1.0 / 2 + 2.0 / 4 + 3.0 / 5) / 3).epsilon(1e-15));
  CHECK_THROWS(aupr(V{0.1, 0.2}, V{0, 0}));
}

TEST_CASE("perfect separation scores one on both curves") {
  const V s = {0.2, 0.9, 0.8, 0.1}, y = {0, 1, 1, 0};
  CHECK(auroc(s, y) == 1.0);
  CHECK(aupr(s, y) == 1.0);
}

TEST_CASE("metrics reports") {
  SUBCASE("binary reports leave recall empty") {
    const MetricsReport r = make_report(Task::binary, Tensor({4}, {0.9, 0.2, 0.6, 0.4}), Tensor({4}, {1, 0, 0, 1}), 0.5);
    CHECK(r.auroc.value() == 0.75);
    CHECK(r.n_samples == 4);
    CHECK_FALSE(r.recall_at.at(10).has_value());
    const auto j = to_json(r);
    CHECK(j.at("recall_at_30").is_null());
    CHECK(j.at("auroc") == 0.75);
    const MetricsReport back = report_from_json(j);
    CHECK(to_json(back) == j);
  }
  SUBCASE("single-class splits give null curves") {
    const MetricsReport r = make_report(Task::binary, Tensor({2}, {0.9, 0.2}), Tensor({2}, {0, 0}), 0.1);
    CHECK_FALSE(r.auroc.has_value());
    CHECK_FALSE(r.aupr.has_value());
  }
  SUBCASE("multilabel recall caps k at the label count and is monotone") {
    Rng rng(4);
    Tensor p({6, 12}), y({6, 12});
    for (std::size_t i = 0; i < p.numel(); ++i) {
      p[i] = rng.uniform();
      y[i] = rng.bernoulli(0.25) ? 1.0 : 0.0;
    }
    y[0] = 1.0;
    const MetricsReport r = make_report(Task::multilabel, p, y, 1.0);
    CHECK(*r.recall_at.at(10) <= *r.recall_at.at(20));
    CHECK(*r.recall_at.at(20) <= *r.recall_at.at(30));
    CHECK(*r.recall_at.at(30) == 1.0);
    CHECK(r.auroc.has_value());
  }
}
