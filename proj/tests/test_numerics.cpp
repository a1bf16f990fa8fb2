#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "bimm/ops.hpp"
#include "bimm/optim.hpp"
#include "bimm/param_store.hpp"
#include "bimm/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace bimm;
using testutil::max_grad_rel_err;
using testutil::random_tensor;

TEST_CASE("tensor basics") {
  Tensor<float> t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.vec() == std::vector<float>(6, 0.0f));
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.0f}), ShapeError);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK(Tensor<float>::scalar(3.5f).item() == 3.5f);

  // copies share storage, clone does not
  Tensor<float> a = Tensor<float>::full({4}, 1.0f);
  Tensor<float> b = a;
  b.data()[0] = 7.0f;
  CHECK(a.data()[0] == 7.0f);
  Tensor<float> c = a.clone();
  c.data()[1] = 9.0f;
  CHECK(a.data()[1] == 1.0f);
}

TEST_CASE("rng determinism and ranges") {
  Rng r1(42), r2(42);
  for (int i = 0; i < 100; ++i) CHECK(r1.next_u64() == r2.next_u64());

  Rng r3(42);
  for (int i = 0; i < 1000; ++i) {
    double u = r3.uniform01();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }

  // child streams depend only on (seed, tag)
  Rng base(7);
  base.next_u64();
  base.next_u64();
  Rng c1 = Rng(7).child(3);
  Rng c2 = base.child(3);
  CHECK(c1.next_u64() == c2.next_u64());

  Rng r4(9);
  auto picks = r4.sample_without_replacement(10, 10);
  std::vector<size_t> sorted = picks;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < 10; ++i) CHECK(sorted[i] == i);
  CHECK_THROWS_AS(r4.sample_without_replacement(3, 4), ContractError);

  // truncated normal respects the cutoff
  Rng r5(11);
  for (int i = 0; i < 2000; ++i) CHECK(std::abs(r5.trunc_normal(0.02)) <= 0.04 + 1e-12);
}

TEST_CASE("matmul values") {
  SUBCASE("identity") {
    Tensor<double> eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor<double> a({3, 2}, {1, 2, 3, 4, 5, 6});
    auto out = matmul(eye, a);
    CHECK(out.vec() == a.vec());
  }
  SUBCASE("hand-computed") {
    Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor<double> b({3, 2}, {7, 8, 9, 10, 11, 12});
    auto out = matmul(a, b);
    CHECK(out.shape() == Shape{2, 2});
    CHECK(out.vec()[0] == doctest::Approx(58));
    CHECK(out.vec()[1] == doctest::Approx(64));
    CHECK(out.vec()[2] == doctest::Approx(139));
    CHECK(out.vec()[3] == doctest::Approx(154));
  }
  SUBCASE("batched with broadcast weights") {
    Rng rng(1);
    auto a = random_tensor({2, 4, 3}, rng);
    auto w = random_tensor({3, 5}, rng);
    auto out = matmul(a, w);
    CHECK(out.shape() == Shape{2, 4, 5});
    // slice 1 equals a standalone 2-d product
    Tensor<double> a1({4, 3}, std::vector<double>(a.vec().begin() + 12, a.vec().end()));
    auto out1 = matmul(a1, w);
    for (size_t i = 0; i < 20; ++i) CHECK(out.vec()[20 + i] == doctest::Approx(out1.vec()[i]));
  }
  SUBCASE("shape errors") {
    Tensor<double> a({2, 3});
    Tensor<double> b({4, 2});
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
    CHECK_THROWS_AS(matmul(a, Tensor<double>({5})), ShapeError);
  }
}

TEST_CASE("matmul gradients vs finite differences") {
  Rng rng(2);
  ParamStore<double> ps;
  ps.add("a", random_tensor({3, 4}, rng));
  ps.add("b", random_tensor({4, 2}, rng));
  auto fwd = [&]() { return sum(matmul(ps.at("a"), ps.at("b"))); };
  CHECK(max_grad_rel_err(ps, fwd) < 1e-6);

  ParamStore<double> ps2;
  ps2.add("a", random_tensor({2, 3, 4}, rng));
  ps2.add("w", random_tensor({4, 3}, rng));
  auto fwd2 = [&]() {
    auto y = matmul(ps2.at("a"), ps2.at("w"));
    return mse_loss(y, Tensor<double>::zeros(y.shape()));
  };
  CHECK(max_grad_rel_err(ps2, fwd2) < 1e-6);

  ParamStore<double> ps3;
  ps3.add("a", random_tensor({2, 3, 4}, rng));
  ps3.add("b", random_tensor({2, 4, 5}, rng));
  auto fwd3 = [&]() { return sum(matmul(ps3.at("a"), ps3.at("b"))); };
  CHECK(max_grad_rel_err(ps3, fwd3) < 1e-6);
}

TEST_CASE("sum and elementwise gradients") {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({3}, {1, 2, 3}));
  auto loss = sum(ps.at("w"));
  backward(loss);
  CHECK(ps.at("w").grad() == std::vector<double>{1, 1, 1});

  ps.zero_grad();
  auto loss2 = sum(mul(ps.at("w"), ps.at("w")));
  backward(loss2);
  CHECK(ps.at("w").grad()[0] == doctest::Approx(2));
  CHECK(ps.at("w").grad()[1] == doctest::Approx(4));
  CHECK(ps.at("w").grad()[2] == doctest::Approx(6));
}

TEST_CASE("repeated backward accumulates") {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({2}, {1, 2}));
  auto loss = sum(mul(ps.at("w"), ps.at("w")));
  backward(loss);
  backward(loss);
  CHECK(ps.at("w").grad()[0] == doctest::Approx(4));
  CHECK(ps.at("w").grad()[1] == doctest::Approx(8));
  ps.zero_grad();
  CHECK(ps.at("w").grad() == std::vector<double>{0, 0});
}

TEST_CASE("add broadcasting") {
  Rng rng(3);
  ParamStore<double> ps;
  ps.add("x", random_tensor({2, 3, 4}, rng));
  ps.add("b", random_tensor({4}, rng));
  auto out = add(ps.at("x"), ps.at("b"));
  CHECK(out.vec()[5] == doctest::Approx(ps.at("x").vec()[5] + ps.at("b").vec()[1]));
  CHECK_THROWS_AS(add(ps.at("b"), ps.at("x")), ShapeError);
  CHECK_THROWS_AS(add(ps.at("x"), Tensor<double>({3})), ShapeError);
  auto fwd = [&]() {
    auto y = add(ps.at("x"), ps.at("b"));
    return mse_loss(y, Tensor<double>::full(y.shape(), 0.3));
  };
  CHECK(max_grad_rel_err(ps, fwd) < 1e-6);
}

TEST_CASE("gelu values and gradient") {
  Tensor<double> x({3}, {0.0, 10.0, -10.0});
  auto y = gelu(x);
  CHECK(y.vec()[0] == doctest::Approx(0.0));
  CHECK(y.vec()[1] == doctest::Approx(10.0));
  CHECK(y.vec()[2] == doctest::Approx(0.0).epsilon(1e-9));

  // gelu(1) = 1 * Phi(1)
  Tensor<double> one({1}, {1.0});
  CHECK(gelu(one).item() == doctest::Approx(0.8413447460685429).epsilon(1e-12));

  Rng rng(4);
  ParamStore<double> ps;
  ps.add("x", random_tensor({2, 5}, rng, -2.0, 2.0));
  auto fwd = [&]() { return sum(gelu(ps.at("x"))); };
  CHECK(max_grad_rel_err(ps, fwd) < 1e-6);
}

TEST_CASE("layer_norm values and gradient") {
  SUBCASE("constant rows map to beta") {
    Tensor<double> x({2, 4}, {5, 5, 5, 5, -1, -1, -1, -1});
    Tensor<double> g = Tensor<double>::full({4}, 2.0);
    Tensor<double> b({4}, {0.5, 0.5, 0.5, 0.5});
    auto y = layer_norm(x, g, b);
    for (double v : y.vec()) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));
  }
  SUBCASE("standardizes a row") {
    Tensor<double> x({1, 2}, {0.0, 2.0});
    auto y = layer_norm(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), 0.0);
    CHECK(y.vec()[0] == doctest::Approx(-1.0));
    CHECK(y.vec()[1] == doctest::Approx(1.0));
  }
  SUBCASE("gradcheck") {
    Rng rng(5);
    ParamStore<double> ps;
    ps.add("x", random_tensor({3, 6}, rng));
    ps.add("g", random_tensor({6}, rng, 0.5, 1.5));
    ps.add("b", random_tensor({6}, rng));
    auto fwd = [&]() {
      auto y = layer_norm(ps.at("x"), ps.at("g"), ps.at("b"));
      return mse_loss(y, Tensor<double>::full(y.shape(), 0.1));
    };
    CHECK(max_grad_rel_err(ps, fwd, 1e-5) < 1e-5);
  }
}

TEST_CASE("softmax values and gradient") {
  Tensor<double> x({1, 3}, {1.0, 2.0, 3.0});
  auto y = softmax(x);
  double s = y.vec()[0] + y.vec()[1] + y.vec()[2];
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(y.vec()[2] > y.vec()[1]);

  // integer-valued rows shifted by an integer are bit-identical after
  // max subtraction
  Tensor<double> a({1, 4}, {1, 5, 2, 3});
  Tensor<double> b({1, 4}, {101, 105, 102, 103});
  CHECK(softmax(a).vec() == softmax(b).vec());

  Rng rng(6);
  ParamStore<double> ps;
  ps.add("x", random_tensor({2, 5}, rng, -3.0, 3.0));
  auto fwd = [&]() {
    auto y = softmax(ps.at("x"));
    return mse_loss(y, Tensor<double>::full(y.shape(), 0.2));
  };
  CHECK(max_grad_rel_err(ps, fwd) < 1e-6);
}

TEST_CASE("attention matches a direct computation") {
  Rng rng(7);
  size_t B = 2, N = 5, D = 8, H = 2, dh = D / H;
  auto qkv = random_tensor({B, N, 3 * D}, rng);
  auto out = attention(qkv, H);
  REQUIRE(out.shape() == Shape{B, N, D});

  // direct reference with plain loops
  for (size_t b = 0; b < B; ++b) {
    for (size_t h = 0; h < H; ++h) {
      for (size_t i = 0; i < N; ++i) {
        std::vector<double> scores(N);
        for (size_t j = 0; j < N; ++j) {
          double s = 0;
          for (size_t k = 0; k < dh; ++k) {
            double q = qkv.vec()[(b * N + i) * 3 * D + h * dh + k];
            double kk = qkv.vec()[(b * N + j) * 3 * D + D + h * dh + k];
            s += q * kk;
          }
          scores[j] = s / std::sqrt(double(dh));
        }
        double mx = *std::max_element(scores.begin(), scores.end());
        double z = 0;
        for (double& v : scores) {
          v = std::exp(v - mx);
          z += v;
        }
        for (size_t k = 0; k < dh; ++k) {
          double o = 0;
          for (size_t j = 0; j < N; ++j) {
            double v = qkv.vec()[(b * N + j) * 3 * D + 2 * D + h * dh + k];
            o += scores[j] / z * v;
          }
          CHECK(out.vec()[(b * N + i) * D + h * dh + k] == doctest::Approx(o).epsilon(1e-9));
        }
      }
    }
  }
}

TEST_CASE("attention gradcheck") {
  Rng rng(8);
  ParamStore<double> ps;
  ps.add("qkv", random_tensor({1, 4, 3 * 6}, rng));
  auto fwd = [&]() {
    auto y = attention(ps.at("qkv"), size_t{2});
    return mse_loss(y, Tensor<double>::full(y.shape(), 0.05));
  };
  CHECK(max_grad_rel_err(ps, fwd, 1e-5) < 1e-5);
  CHECK_THROWS_AS(attention(ps.at("qkv"), size_t{4}), ConfigError);
}

TEST_CASE("gather, assemble, prepend, pooling") {
  Rng rng(9);
  SUBCASE("gather_rows values and grad") {
    ParamStore<double> ps;
    ps.add("x", random_tensor({2, 4, 3}, rng));
    std::vector<std::vector<size_t>> idx{{3, 0}, {1, 2}};
    auto y = gather_rows(ps.at("x"), idx);
    CHECK(y.shape() == Shape{2, 2, 3});
    for (size_t j = 0; j < 3; ++j) {
      CHECK(y.vec()[j] == ps.at("x").vec()[3 * 3 + j]);
      CHECK(y.vec()[(2 + 0) * 3 + j] == ps.at("x").vec()[(4 + 1) * 3 + j]);
    }
    auto fwd = [&]() {
      auto g = gather_rows(ps.at("x"), idx);
      return mse_loss(g, Tensor<double>::full(g.shape(), 0.7));
    };
    CHECK(max_grad_rel_err(ps, fwd) < 1e-6);
  }
  SUBCASE("assemble_sequence values and grad") {
    ParamStore<double> ps;
    ps.add("vis", random_tensor({2, 2, 3}, rng));
    ps.add("tok", random_tensor({3}, rng));
    std::vector<MaskSpec> masks(2);
    masks[0] = {4, {0, 2}, {1, 3}};
    masks[1] = {4, {1, 3}, {0, 2}};
    auto y = assemble_sequence(ps.at("vis"), ps.at("tok"), masks);
    CHECK(y.shape() == Shape{2, 4, 3});
    for (size_t j = 0; j < 3; ++j) {
      CHECK(y.vec()[0 * 3 + j] == ps.at("vis").vec()[j]);           // sample 0 row 0 visible
      CHECK(y.vec()[1 * 3 + j] == ps.at("tok").vec()[j]);           // sample 0 row 1 masked
      CHECK(y.vec()[(4 + 0) * 3 + j] == ps.at("tok").vec()[j]);     // sample 1 row 0 masked
      CHECK(y.vec()[(4 + 1) * 3 + j] == ps.at("vis").vec()[2 * 3 + j]);
    }
    auto fwd = [&]() {
      auto a = assemble_sequence(ps.at("vis"), ps.at("tok"), masks);
      return mse_loss(a, Tensor<double>::full(a.shape(), -0.2));
    };
    CHECK(max_grad_rel_err(ps, fwd) < 1e-6);
  }
  SUBCASE("prepend_token, take_row, mean_rows") {
    ParamStore<double> ps;
    ps.add("x", random_tensor({2, 3, 4}, rng));
    ps.add("tok", random_tensor({4}, rng));
    auto y = prepend_token(ps.at("x"), ps.at("tok"));
    CHECK(y.shape() == Shape{2, 4, 4});
    for (size_t j = 0; j < 4; ++j) CHECK(y.vec()[j] == ps.at("tok").vec()[j]);
    auto fwd = [&]() {
      auto a = prepend_token(ps.at("x"), ps.at("tok"));
      auto r0 = take_row(a, 0);
      auto m = mean_rows(a);
      return add(sum(mul(r0, r0)), sum(mul(m, m)));
    };
    CHECK(max_grad_rel_err(ps, fwd) < 1e-6);

    auto m = mean_rows(ps.at("x"));
    CHECK(m.shape() == Shape{2, 4});
    double expect = (ps.at("x").vec()[0] + ps.at("x").vec()[4] + ps.at("x").vec()[8]) / 3.0;
    CHECK(m.vec()[0] == doctest::Approx(expect));
  }
}

TEST_CASE("losses") {
  SUBCASE("mse hand value and grad") {
    Tensor<double> p({2}, {1.0, 3.0});
    Tensor<double> t({2}, {0.0, 1.0});
    CHECK(mse_loss(p, t).item() == doctest::Approx((1.0 + 4.0) / 2.0));
    Rng rng(10);
    ParamStore<double> ps;
    ps.add("p", random_tensor({3, 4}, rng));
    auto target = random_tensor({3, 4}, rng);
    auto fwd = [&]() { return mse_loss(ps.at("p"), target); };
    CHECK(max_grad_rel_err(ps, fwd) < 1e-6);
  }
  SUBCASE("cross entropy of uniform logits is log C") {
    Tensor<double> logits({2, 5});
    std::vector<int> labels{0, 3};
    CHECK(cross_entropy_loss(logits, labels).item() == doctest::Approx(std::log(5.0)));
    CHECK_THROWS_AS(cross_entropy_loss(logits, std::vector<int>{0, 5}), ContractError);
  }
  SUBCASE("cross entropy gradcheck") {
    Rng rng(11);
    ParamStore<double> ps;
    ps.add("logits", random_tensor({3, 4}, rng, -2.0, 2.0));
    std::vector<int> labels{2, 0, 1};
    auto fwd = [&]() { return cross_entropy_loss(ps.at("logits"), labels); };
    CHECK(max_grad_rel_err(ps, fwd) < 1e-6);
  }
  SUBCASE("weighted composition") {
    ParamStore<double> ps;
    ps.add("a", Tensor<double>({1}, {2.0}));
    ps.add("b", Tensor<double>({1}, {5.0}));
    double lam = 0.25;
    auto total = add(sum(ps.at("a")), mul_scalar(sum(ps.at("b")), lam));
    CHECK(total.item() == doctest::Approx(2.0 + 0.25 * 5.0));
    backward(total);
    CHECK(ps.at("a").grad()[0] == doctest::Approx(1.0));
    CHECK(ps.at("b").grad()[0] == doctest::Approx(0.25));
  }
}

TEST_CASE("backward contract") {
  Tensor<double> c({2}, {1.0, 2.0});  // constant, no graph
  CHECK_THROWS_AS(backward(sum(c)), ContractError);

  ParamStore<double> ps;
  ps.add("w", Tensor<double>({2}, {1.0, 2.0}));
  auto y = mul(ps.at("w"), ps.at("w"));
  CHECK_THROWS_AS(backward(y), ContractError);  // non-scalar

  {
    NoGrad ng;
    auto z = sum(mul(ps.at("w"), ps.at("w")));
    CHECK(!z.node);
  }
}

TEST_CASE("unused parameters keep zero gradients") {
  ParamStore<double> ps;
  ps.add("used", Tensor<double>({2}, {1.0, 2.0}));
  ps.add("unused", Tensor<double>({2}, {3.0, 4.0}));
  ps.zero_grad();
  auto loss = sum(mul(ps.at("used"), ps.at("used")));
  backward(loss);
  CHECK(ps.at("unused").grad() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("adamw analytic cases") {
  SUBCASE("zero gradient, decay only") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({1}, {1.0}));
    ps.zero_grad();
    OptimState<double> st;
    AdamWConfig cfg;
    cfg.weight_decay = 0.05;
    adamw_step(ps, st, 0.1, cfg);
    CHECK(ps.at("w").vec()[0] == doctest::Approx(0.995).epsilon(1e-12));
  }
  SUBCASE("first step moves by about lr in the gradient direction") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({1}, {0.5}));
    ps.zero_grad();
    ps.at("w").grad()[0] = 0.3;
    OptimState<double> st;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    double lr = 0.01;
    adamw_step(ps, st, lr, cfg);
    double expect = 0.5 - lr * 0.3 / (std::abs(0.3) + cfg.eps);
    CHECK(ps.at("w").vec()[0] == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("rejects non-positive lr") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({1}, {1.0}));
    OptimState<double> st;
    CHECK_THROWS_AS(adamw_step(ps, st, 0.0, AdamWConfig{}), ConfigError);
  }
  SUBCASE("bit-exact determinism over 100 steps") {
    auto run = [&]() {
      Rng rng(123);
      ParamStore<float> ps;
      std::vector<float> init(8);
      for (auto& v : init) v = static_cast<float>(rng.uniform(-1, 1));
      ps.add("w", Tensor<float>({8}, init));
      OptimState<float> st;
      Rng grads(55);
      for (int s = 0; s < 100; ++s) {
        ps.zero_grad();
        for (auto& g : ps.at("w").grad()) g = static_cast<float>(grads.uniform(-1, 1));
        adamw_step(ps, st, 1e-3f, AdamWConfig{});
      }
      return ps.at("w").vec();
    };
    CHECK(run() == run());
  }
  SUBCASE("shared storage updated once") {
    ParamStore<double> ps;
    Tensor<double> w({2}, {1.0, -1.0});
    ps.add("a.w", w);
    ps.add("b.w", ps.at("a.w"));  // alias
    ps.zero_grad();
    auto loss = sum(mul(ps.at("a.w"), ps.at("b.w")));
    backward(loss);
    // d/dw (w*w) = 2w through both names into one buffer
    CHECK(ps.at("a.w").grad()[0] == doctest::Approx(2.0));
    OptimState<double> st;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    adamw_step(ps, st, 0.01, cfg);
    CHECK(ps.at("a.w").vec() == ps.at("b.w").vec());
    CHECK(st.m.size() == 1);
  }
}

TEST_CASE("float and double agree on a small pipeline") {
  Rng rng(12);
  auto x64 = random_tensor({4, 6}, rng);
  auto g64 = random_tensor({6}, rng, 0.5, 1.5);
  auto b64 = random_tensor({6}, rng);
  auto y64 = gelu(layer_norm(x64, g64, b64));
  auto y32 = gelu(layer_norm(x64.cast<float>(), g64.cast<float>(), b64.cast<float>()));
  for (size_t i = 0; i < y64.size(); ++i) {
    CHECK(std::abs(y64.vec()[i] - double(y32.vec()[i])) < 1e-4);
  }
}

TEST_CASE("finite_diff_grad rejects zero step") {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({1}, {1.0}));
  std::vector<CoordRef> coords{{0, 0}};
  CHECK_THROWS_AS(finite_diff_grad<double>(ps, [] { return 0.0; }, coords, 0.0), ContractError);
}
