#include <cmath>
#include <numeric>

#include "doctest.h"
#include "rlqfs/errors.hpp"
#include "test_util.hpp"

using namespace rlqfs;
using nd::Tensor;
using testing::gradcheck;
using testing::random_const;
using testing::random_param;
using testing::weighted_sum;

namespace {
constexpr double kTol = 1e-6;

void check_close(std::span<const double> a, std::initializer_list<double> b, double tol = 1e-12) {
  REQUIRE(a.size() == b.size());
  std::size_t i = 0;
  for (double v : b) {
    CHECK(std::abs(a[i] - v) <= tol * std::max(1.0, std::abs(v)));
    ++i;
  }
}
}  // namespace

TEST_SUITE("rng") {
  TEST_CASE("same seed, same stream; split streams differ") {
    nd::Rng a(5), b(5);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    nd::Rng c = a.split();
    CHECK(c.next_u64() != a.next_u64());
  }

  TEST_CASE("uniform stays in the open unit interval; moments of normal and gumbel") {
    nd::Rng r(1);
    const int n = 200000;
    double su = 0, sn = 0, sn2 = 0, sg = 0;
    for (int i = 0; i < n; ++i) {
      const double u = r.uniform();
      REQUIRE(u > 0.0);
      REQUIRE(u < 1.0);
      su += u;
      const double z = r.normal();
      sn += z;
      sn2 += z * z;
      sg += r.gumbel();
    }
    CHECK(su / n == doctest::Approx(0.5).epsilon(0.01));
    CHECK(std::abs(sn / n) < 0.01);
    CHECK(sn2 / n == doctest::Approx(1.0).epsilon(0.02));
    CHECK(sg / n == doctest::Approx(0.5772156649).epsilon(0.02));
  }

  TEST_CASE("uniform_int covers its range evenly") {
    nd::Rng r(3);
    std::vector<int> hits(7, 0);
    for (int i = 0; i < 70000; ++i) hits[r.uniform_int(7)]++;
    for (int h : hits) CHECK(std::abs(h - 10000) < 500);
  }

  TEST_CASE("state save and load resumes the stream") {
    nd::Rng r(9);
    r.normal();
    const auto s = r.save_state();
    const double next = r.uniform();
    nd::Rng q(0);
    q.load_state(s);
    CHECK(q == nd::Rng([&] { nd::Rng t(0); t.load_state(s); return t; }()));
    CHECK(q.uniform() == next);
  }
}

TEST_SUITE("tensor") {
  TEST_CASE("construction checks sizes") {
    CHECK_THROWS_AS(Tensor::from({2, 3}, std::vector<double>(5)), DimensionError);
    CHECK(Tensor::zeros({2, 3}).size() == 6);
    CHECK_THROWS_AS(Tensor::zeros({2, 2}).item(), ContractError);
  }

  TEST_CASE("d(x^2)/dx at 3 is 6") {
    Tensor x = Tensor::parameter({1}, {3.0});
    nd::backward(nd::sum(nd::mul(x, x)));
    CHECK(x.grad()[0] == 6.0);
  }

  TEST_CASE("backward needs a scalar") {
    Tensor x = Tensor::parameter({2}, {1.0, 2.0});
    CHECK_THROWS_AS(nd::backward(nd::scale(x, 2.0)), ContractError);
  }

  TEST_CASE("disconnected parameters keep a zero gradient") {
    Tensor x = Tensor::parameter({2}, {1.0, 2.0});
    Tensor y = Tensor::parameter({2}, {3.0, 4.0});
    y.zero_grad();
    nd::backward(nd::sum(x));
    check_close(y.grad(), {0.0, 0.0});
  }

  TEST_CASE("leaf gradients accumulate until zeroed") {
    Tensor x = Tensor::parameter({1}, {2.0});
    auto f = [&] { return nd::sum(nd::scale(nd::mul(x, x), 0.5)); };
    nd::backward(f());
    nd::backward(f());
    CHECK(x.grad()[0] == 4.0);
    x.zero_grad();
    nd::backward(f());
    CHECK(x.grad()[0] == 2.0);
  }

  TEST_CASE("gradient of a sum of losses is the sum of gradients") {
    nd::Rng rng(4);
    Tensor a = random_param({3, 4}, rng);
    Tensor b = random_param({4, 2}, rng);
    auto l1 = [&] { return weighted_sum(nd::matmul(a, b), 1); };
    auto l2 = [&] { return weighted_sum(nd::tanh(nd::matmul(a, b)), 2); };
    a.zero_grad();
    nd::backward(l1());
    std::vector<double> g1(a.grad().begin(), a.grad().end());
    a.zero_grad();
    nd::backward(l2());
    std::vector<double> g2(a.grad().begin(), a.grad().end());
    a.zero_grad();
    nd::backward(nd::add(l1(), l2()));
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(a.grad()[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
  }

  TEST_CASE("no-grad guard records nothing") {
    Tensor x = Tensor::parameter({2}, {1.0, 2.0});
    nd::NoGradGuard g;
    Tensor y = nd::scale(x, 3.0);
    CHECK_FALSE(y.tracked());
  }

  TEST_CASE("detach cuts the graph") {
    Tensor x = Tensor::parameter({1}, {2.0});
    Tensor y = nd::mul(x, x).detach();
    CHECK_FALSE(y.tracked());
    CHECK(y.item() == 4.0);
  }

  TEST_CASE("zero-then-backward is repeatable") {
    nd::Rng rng(8);
    Tensor w = random_param({4, 4}, rng);
    Tensor x = random_const({3, 4}, rng);
    auto f = [&] { return weighted_sum(nd::gelu(nd::matmul(x, w))); };
    w.zero_grad();
    nd::backward(f());
    std::vector<double> first(w.grad().begin(), w.grad().end());
    for (int rep = 0; rep < 3; ++rep) {
      w.zero_grad();
      nd::backward(f());
      for (std::size_t i = 0; i < first.size(); ++i) REQUIRE(w.grad()[i] == first[i]);
    }
  }
}

TEST_SUITE("ops values") {
  TEST_CASE("matmul hand cases") {
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor b = Tensor::matrix({{1}, {1}});
    check_close(nd::matmul(a, b).data(), {3, 7});
    Tensor i3 = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
    check_close(nd::matmul(i3, m).data(), {1, 2, 3, 4, 5, 6, 7, 8, 9});
    CHECK_THROWS_AS(nd::matmul(a, Tensor::zeros({3, 1})), DimensionError);
  }

  TEST_CASE("softmax is stable, normalized and shift invariant") {
    check_close(nd::softmax(Tensor::vector({0, 0}), 0).data(), {0.5, 0.5});
    check_close(nd::softmax(Tensor::vector({1000, 1000}), 0).data(), {0.5, 0.5});
    nd::Rng rng(2);
    Tensor x = random_const({3, 5}, rng, 3.0);
    Tensor s = nd::softmax(x, 1);
    Tensor shifted = nd::softmax(nd::add(x, Tensor::full({3, 5}, 17.0)), 1);
    for (std::size_t r = 0; r < 3; ++r) {
      double tot = 0;
      for (std::size_t c = 0; c < 5; ++c) {
        tot += s.at(r, c);
        CHECK(shifted.at(r, c) == doctest::Approx(s.at(r, c)).epsilon(1e-12));
      }
      CHECK(std::abs(tot - 1.0) <= 1e-12);
    }
    Tensor cols = nd::softmax(x, 0);
    for (std::size_t c = 0; c < 5; ++c) {
      double tot = 0;
      for (std::size_t r = 0; r < 3; ++r) tot += cols.at(r, c);
      CHECK(std::abs(tot - 1.0) <= 1e-12);
    }
    CHECK_THROWS_AS(nd::softmax(Tensor::vector({1.0, NAN}), 0), NumericError);
  }

  TEST_CASE("cross_entropy: uniform logits give ln V; ignore index; range check") {
    Tensor u = Tensor::zeros({3, 6});
    std::vector<nd::TokenId> t{0, 5, 2};
    CHECK(nd::cross_entropy(u, t).item() == doctest::Approx(std::log(6.0)));
    std::vector<nd::TokenId> ign{0, -1, -1};
    CHECK(nd::cross_entropy(u, ign).item() == doctest::Approx(std::log(6.0)));
    std::vector<nd::TokenId> bad{0, 6, 1};
    CHECK_THROWS_AS(nd::cross_entropy(u, bad), IndexError);
    Tensor sharp = Tensor::matrix({{200, 0, 0}});
    std::vector<nd::TokenId> zero{0};
    CHECK(nd::cross_entropy(sharp, zero).item() < 1e-80);
  }

  TEST_CASE("cross_entropy equals the direct formula on random input") {
    nd::Rng rng(6);
    Tensor x = random_const({4, 7}, rng, 2.0);
    std::vector<nd::TokenId> t{3, 0, 6, 2};
    double ref = 0;
    for (std::size_t r = 0; r < 4; ++r) {
      double z = 0;
      for (std::size_t c = 0; c < 7; ++c) z += std::exp(x.at(r, c));
      ref += -(x.at(r, static_cast<std::size_t>(t[r])) - std::log(z));
    }
    CHECK(nd::cross_entropy(x, t).item() == doctest::Approx(ref / 4).epsilon(1e-12));
  }

  TEST_CASE("layer_norm output has zero mean and unit variance per row") {
    nd::Rng rng(5);
    Tensor x = random_const({3, 8}, rng, 4.0);
    Tensor y = nd::layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
    for (std::size_t r = 0; r < 3; ++r) {
      double m = 0, v = 0;
      for (std::size_t c = 0; c < 8; ++c) m += y.at(r, c);
      m /= 8;
      for (std::size_t c = 0; c < 8; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
      CHECK(std::abs(m) < 1e-12);
      CHECK(v / 8 == doctest::Approx(1.0).epsilon(1e-3));
    }
  }

  TEST_CASE("dropout is identity in eval mode and rescales kept units") {
    nd::Rng rng(1);
    Tensor x = Tensor::full({1000}, 1.0);
    Tensor e = nd::dropout(x, 0.3, rng, false);
    CHECK(std::equal(e.data().begin(), e.data().end(), x.data().begin()));
    Tensor d = nd::dropout(x, 0.3, rng, true);
    std::size_t zeros = 0;
    for (double v : d.data()) {
      if (v == 0.0) ++zeros;
      else CHECK(v == doctest::Approx(1.0 / 0.7));
    }
    CHECK(zeros > 230);
    CHECK(zeros < 370);
  }

  TEST_CASE("embedding gathers rows and scatter-adds repeated ids") {
    Tensor table = Tensor::parameter({3, 2}, {1, 2, 3, 4, 5, 6});
    std::vector<nd::TokenId> ids{2, 0, 2};
    Tensor e = nd::embedding(table, ids);
    check_close(e.data(), {5, 6, 1, 2, 5, 6});
    nd::backward(nd::sum(e));
    check_close(table.grad(), {1, 1, 0, 0, 2, 2});
    std::vector<nd::TokenId> bad{3};
    CHECK_THROWS_AS(nd::embedding(table, bad), IndexError);
  }

  TEST_CASE("attention counts admissible scores") {
    nd::Rng rng(3);
    Tensor q = random_const({5, 4}, rng);
    nd::reset_attention_score_count();
    nd::attention(q, q, q, 2, {{}, true});
    CHECK(nd::attention_score_count() == 2 * 15);
    std::vector<std::uint8_t> valid{1, 1, 0, 1, 0};
    nd::reset_attention_score_count();
    nd::attention(q, q, q, 1, {valid, false});
    CHECK(nd::attention_score_count() == 5 * 3);
  }
}

TEST_SUITE("ops gradients") {
  TEST_CASE("matmul family") {
    nd::Rng rng(11);
    Tensor a = random_param({4, 5}, rng), b = random_param({5, 2}, rng), c = random_param({3, 5}, rng);
    CHECK(gradcheck([&] { return weighted_sum(nd::matmul(a, b)); }, {a, b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::matmul_nt(a, c)); }, {a, c}).max_rel_err <= kTol);
  }

  TEST_CASE("elementwise") {
    nd::Rng rng(12);
    Tensor a = random_param({3, 4}, rng), b = random_param({3, 4}, rng), bias = random_param({4}, rng);
    Tensor pos = Tensor::parameter({5}, {0.5, 1.2, 2.0, 3.3, 0.9});
    CHECK(gradcheck([&] { return weighted_sum(nd::add(a, b)); }, {a, b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::sub(a, b)); }, {a, b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::mul(a, b)); }, {a, b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::scale(a, -1.7)); }, {a}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::add_bias(a, bias)); }, {a, bias}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::tanh(a)); }, {a}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::gelu(a)); }, {a}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::sigmoid(a)); }, {a}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::log(pos)); }, {pos}).max_rel_err <= kTol);
  }

  TEST_CASE("softmax and log_softmax") {
    nd::Rng rng(13);
    Tensor v = random_param({6}, rng), m = random_param({3, 5}, rng);
    CHECK(gradcheck([&] { return weighted_sum(nd::softmax(v, 0)); }, {v}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::softmax(m, 0)); }, {m}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::softmax(m, 1)); }, {m}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::log_softmax(m)); }, {m}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::log_softmax(v)); }, {v}).max_rel_err <= kTol);
  }

  TEST_CASE("layer_norm, embedding, dropout") {
    nd::Rng rng(14);
    Tensor x = random_param({3, 6}, rng), g = random_param({6}, rng), b = random_param({6}, rng);
    CHECK(gradcheck([&] { return weighted_sum(nd::layer_norm(x, g, b)); }, {x, g, b}).max_rel_err <= 1e-5);
    Tensor table = random_param({5, 3}, rng);
    std::vector<nd::TokenId> ids{4, 1, 4, 0};
    CHECK(gradcheck([&] { return weighted_sum(nd::embedding(table, ids)); }, {table}).max_rel_err <= kTol);
    CHECK(gradcheck(
              [&] {
                nd::Rng mask_rng(77);
                return weighted_sum(nd::dropout(x, 0.4, mask_rng, true));
              },
              {x})
              .max_rel_err <= kTol);
  }

  TEST_CASE("shape ops and reductions") {
    nd::Rng rng(15);
    Tensor a = random_param({2, 3}, rng), b = random_param({4, 3}, rng), c = random_param({2, 2}, rng);
    Tensor u = random_param({3}, rng), w = random_param({3}, rng);
    Tensor s1 = random_param({}, rng), s2 = random_param({}, rng);
    CHECK(gradcheck([&] { return weighted_sum(nd::concat({a, b}, 0)); }, {a, b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::concat({a, c}, 1)); }, {a, c}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::concat({u, w}, 0)); }, {u, w}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::concat({s1, s2}, 0)); }, {s1, s2}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::slice_rows(b, 1, 3)); }, {b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return weighted_sum(nd::reshape(b, {3, 4})); }, {b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return nd::sum(nd::mul(b, b)); }, {b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return nd::mean(nd::mul(b, b)); }, {b}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return nd::dot(u, w); }, {u, w}).max_rel_err <= kTol);
  }

  TEST_CASE("pick, cross_entropy, bce_with_logits") {
    nd::Rng rng(16);
    Tensor x = random_param({4, 6}, rng);
    std::vector<nd::TokenId> idx{5, 0, 2, 2};
    std::vector<nd::TokenId> tgt{1, -1, 3, 5};
    CHECK(gradcheck([&] { return weighted_sum(nd::pick(x, idx)); }, {x}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return nd::cross_entropy(x, tgt, -1); }, {x}).max_rel_err <= kTol);
    Tensor s = Tensor::parameter({}, {0.7});
    CHECK(gradcheck([&] { return nd::bce_with_logits(s, 1.0); }, {s}).max_rel_err <= kTol);
    CHECK(gradcheck([&] { return nd::bce_with_logits(s, 0.0); }, {s}).max_rel_err <= kTol);
  }

  TEST_CASE("attention with masks and several heads") {
    nd::Rng rng(17);
    Tensor q = random_param({4, 6}, rng), k = random_param({5, 6}, rng), v = random_param({5, 6}, rng);
    std::vector<std::uint8_t> valid{1, 0, 1, 1, 1};
    CHECK(gradcheck([&] { return weighted_sum(nd::attention(q, k, v, 3, {valid, false})); }, {q, k, v})
              .max_rel_err <= kTol);
    Tensor s = random_param({5, 6}, rng);
    CHECK(gradcheck([&] { return weighted_sum(nd::attention(s, s, s, 2, {{}, true})); }, {s}).max_rel_err <= kTol);
  }
}

TEST_SUITE("optimizers") {
  TEST_CASE("SGD update rule") {
    nd::ParamList ps{{"p", Tensor::parameter({1}, {1.0})}};
    ps[0].tensor.zero_grad();
    ps[0].tensor.grad()[0] = 2.0;
    nd::Optimizer opt({nd::OptimizerKind::SGD, 0.1});
    opt.step(ps);
    CHECK(ps[0].tensor.data()[0] == doctest::Approx(0.8).epsilon(1e-15));
  }

  TEST_CASE("Adam with zero gradient leaves parameters unchanged") {
    nd::ParamList ps{{"p", Tensor::parameter({3}, {1.0, -2.0, 0.5})}};
    nd::zero_grads(ps);
    nd::Optimizer opt({nd::OptimizerKind::Adam, 0.01});
    for (int i = 0; i < 5; ++i) opt.step(ps);
    check_close(ps[0].tensor.data(), {1.0, -2.0, 0.5}, 0.0);
  }

  TEST_CASE("missing gradient buffer is a contract error") {
    nd::ParamList ps{{"p", Tensor::parameter({1}, {1.0})}};
    nd::Optimizer opt({});
    CHECK_THROWS_AS(opt.step(ps), ContractError);
  }

  TEST_CASE("Adam converges on a quadratic bowl") {
    nd::ParamList ps{{"p", Tensor::parameter({2}, {3.0, -4.0})}};
    nd::Optimizer opt({nd::OptimizerKind::Adam, 0.05});
    const Tensor target = Tensor::vector({1.0, 2.0});
    double loss = 1.0;
    int steps = 0;
    while (steps < 2000) {
      nd::zero_grads(ps);
      Tensor d = nd::sub(ps[0].tensor, target);
      Tensor l = nd::sum(nd::mul(d, d));
      loss = l.item();
      if (loss < 1e-6) break;
      nd::backward(l);
      opt.step(ps);
      ++steps;
    }
    CHECK(loss < 1e-6);
  }

  TEST_CASE("clip_grad_norm reports the norm before clipping") {
    nd::ParamList ps{{"a", Tensor::parameter({2}, {0, 0})}, {"b", Tensor::parameter({1}, {0})}};
    nd::zero_grads(ps);
    ps[0].tensor.grad()[0] = 3.0;
    ps[1].tensor.grad()[0] = 4.0;
    CHECK(nd::clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
    CHECK(ps[0].tensor.grad()[0] == doctest::Approx(0.6));
    CHECK(ps[1].tensor.grad()[0] == doctest::Approx(0.8));
  }
}
