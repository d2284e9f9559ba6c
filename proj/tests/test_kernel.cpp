#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "sgg/gemm.hpp"
#include "sgg/gradcheck.hpp"
#include "sgg/ops.hpp"
#include "sgg/optim.hpp"
#include "sgg/random.hpp"
#include "sgg/spatial.hpp"
#include "sgg/tape.hpp"
#include "sgg/threadpool.hpp"

using namespace sgg;

namespace {

Tensor<float> tensor_from(std::vector<size_t> shape, std::vector<float> v) {
  return Tensor<float>(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("gemm variants match a naive float64 oracle") {
  Rng rng(11);
  for (auto [m, n, k] : {std::tuple<size_t, size_t, size_t>{1, 1, 1},
                         {3, 5, 7},
                         {36, 300, 64},
                         {37, 301, 65},
                         {9, 130, 2}}) {
    std::vector<float> A(m * k), B(k * n), Bt(n * k), At(k * m);
    for (auto& x : A) x = float(rng.uniform(-1, 1));
    for (auto& x : B) x = float(rng.uniform(-1, 1));
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j < k; ++j) Bt[i * k + j] = B[j * n + i];
    for (size_t i = 0; i < k; ++i)
      for (size_t j = 0; j < m; ++j) At[i * m + j] = A[j * k + i];
    std::vector<double> ref(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j)
        for (size_t kk = 0; kk < k; ++kk)
          ref[i * n + j] += double(A[i * k + kk]) * double(B[kk * n + j]);
    std::vector<float> C1(m * n, 0.f), C2(m * n, 0.f), C3(m * n, 0.f);
    gemm_nn(A.data(), B.data(), C1.data(), m, n, k);
    gemm_nt(A.data(), Bt.data(), C2.data(), m, n, k);
    gemm_tn(At.data(), B.data(), C3.data(), m, n, k);
    for (size_t i = 0; i < m * n; ++i) {
      REQUIRE(double(C1[i]) == Catch::Approx(ref[i]).margin(1e-4));
      REQUIRE(double(C2[i]) == Catch::Approx(ref[i]).margin(1e-4));
      REQUIRE(double(C3[i]) == Catch::Approx(ref[i]).margin(1e-4));
    }
  }
}

TEST_CASE("gemm results are identical across thread counts") {
  Rng rng(3);
  const size_t m = 17, n = 1030, k = 257;
  std::vector<float> A(m * k), B(k * n);
  for (auto& x : A) x = float(rng.uniform(-1, 1));
  for (auto& x : B) x = float(rng.uniform(-1, 1));
  std::vector<float> C1(m * n, 0.f), C2(m * n, 0.f);
  set_num_threads(1);
  gemm_nn(A.data(), B.data(), C1.data(), m, n, k);
  set_num_threads(4);
  gemm_nn(A.data(), B.data(), C2.data(), m, n, k);
  set_num_threads(2);
  REQUIRE(std::memcmp(C1.data(), C2.data(), C1.size() * sizeof(float)) == 0);
}

TEST_CASE("softmax: symmetry, shift invariance, forced values") {
  Tape<float> t;
  Var x = t.leaf(tensor_from({1, 3}, {0.7f, 0.7f, 0.7f}));
  auto out = t.val(softmax_rows(t, x));
  for (size_t i = 0; i < 3; ++i) REQUIRE(out[i] == Catch::Approx(1.0 / 3).epsilon(1e-6));

  Var y = t.leaf(tensor_from({1, 2}, {0.f, float(std::log(2.0))}));
  auto p = t.val(softmax_rows(t, y));
  REQUIRE(p[0] == Catch::Approx(1.0 / 3).epsilon(1e-6));
  REQUIRE(p[1] == Catch::Approx(2.0 / 3).epsilon(1e-6));

  Rng rng(5);
  std::vector<float> v(7), vs(7);
  for (size_t i = 0; i < 7; ++i) {
    v[i] = float(rng.uniform(-50, 50));
    vs[i] = v[i] + 13.25f;
  }
  auto a = t.val(softmax_rows(t, t.leaf(tensor_from({1, 7}, v))));
  auto b = t.val(softmax_rows(t, t.leaf(tensor_from({1, 7}, vs))));
  for (size_t i = 0; i < 7; ++i) REQUIRE(a[i] == Catch::Approx(b[i]).margin(1e-6));
}

TEST_CASE("softmax rows sum to one for random inputs in [-50,50]") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const size_t n = 2 + rng.below(60);
    std::vector<float> v(n);
    for (auto& x : v) x = float(rng.uniform(-50, 50));
    Tape<float> t;
    auto p = t.val(softmax_rows(t, t.leaf(tensor_from({1, n}, v))));
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
      s += double(p[i]);
      REQUIRE(p[i] > 0.f);
      REQUIRE(p[i] < 1.0001f);
    }
    REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("layer_norm: constant row is zeroed, mean is zero, oracle value") {
  Tape<float> t;
  Var gamma = t.leaf(Tensor<float>::full({4}, 1.f));
  Var beta = t.leaf(Tensor<float>::zeros({4}));

  auto z = t.val(layer_norm_rows(t, t.leaf(Tensor<float>::full({1, 4}, 3.5f)), gamma, beta));
  for (size_t i = 0; i < 4; ++i) REQUIRE(std::fabs(z[i]) < 1e-5f);

  Rng rng(2);
  std::vector<float> v(9);
  for (auto& x : v) x = float(rng.uniform(-4, 4));
  Var g9 = t.leaf(Tensor<float>::full({9}, 1.f));
  Var b9 = t.leaf(Tensor<float>::zeros({9}));
  auto ln = t.val(layer_norm_rows(t, t.leaf(tensor_from({1, 9}, v)), g9, b9));
  double mean = 0.0, var = 0.0;
  for (size_t i = 0; i < 9; ++i) mean += double(ln[i]);
  REQUIRE(std::fabs(mean / 9) < 1e-5);
  for (size_t i = 0; i < 9; ++i) var += double(ln[i]) * double(ln[i]);
  REQUIRE(var / 9 == Catch::Approx(1.0).margin(1e-4));

  // independent two-pass oracle on [1,2,3,4]
  auto out = t.val(layer_norm_rows(t, t.leaf(tensor_from({1, 4}, {1, 2, 3, 4})), gamma, beta));
  const double m = (1 + 2 + 3 + 4) / 4.0;
  double s2 = 0.0;
  for (double x : {1.0, 2.0, 3.0, 4.0}) s2 += (x - m) * (x - m);
  s2 /= 4.0;
  const double inv = 1.0 / std::sqrt(s2 + 1e-5);
  for (size_t i = 0; i < 4; ++i)
    REQUIRE(double(out[i]) == Catch::Approx((double(i) + 1 - m) * inv).margin(1e-6));

  Var g1 = t.leaf(Tensor<float>::full({1}, 1.f));
  Var b1 = t.leaf(Tensor<float>::zeros({1}));
  REQUIRE_THROWS_AS(layer_norm_rows(t, t.leaf(Tensor<float>::full({1, 1}, 2.f)), g1, b1),
                    ShapeError);
}

TEST_CASE("linear: identity, zero weight, naive oracle") {
  Tape<float> t;
  std::vector<float> eye(16, 0.f);
  for (int i = 0; i < 4; ++i) eye[i * 4 + i] = 1.f;
  Var W = t.leaf(tensor_from({4, 4}, eye));
  Var b = t.leaf(Tensor<float>::zeros({4}));
  std::vector<float> xv = {0.5f, -1.f, 2.f, 3.f};
  Var x = t.leaf(tensor_from({1, 4}, xv));
  auto y = t.val(linear(t, x, W, b));
  for (size_t i = 0; i < 4; ++i) REQUIRE(y[i] == xv[i]);

  Var Wz = t.leaf(Tensor<float>::zeros({4, 3}));
  Var bz = t.leaf(tensor_from({3}, {7.f, -2.f, 0.25f}));
  auto y2 = t.val(linear(t, x, Wz, bz));
  REQUIRE(y2[0] == 7.f);
  REQUIRE(y2[1] == -2.f);
  REQUIRE(y2[2] == 0.25f);

  Rng rng(21);
  std::vector<float> wv(4 * 3), bv(3);
  for (auto& v : wv) v = float(rng.uniform(-1, 1));
  for (auto& v : bv) v = float(rng.uniform(-1, 1));
  auto y3 = t.val(linear(t, x, t.leaf(tensor_from({4, 3}, wv)), t.leaf(tensor_from({3}, bv))));
  for (size_t j = 0; j < 3; ++j) {
    double acc = bv[j];
    for (size_t i = 0; i < 4; ++i) acc += double(xv[i]) * double(wv[i * 3 + j]);
    REQUIRE(double(y3[j]) == Catch::Approx(acc).margin(1e-6));
  }

  REQUIRE_THROWS_AS(linear(t, x, t.leaf(Tensor<float>::zeros({5, 2})), bz), ShapeError);
}

TEST_CASE("bilinear_sample: exact at integers, midpoint average, oracle") {
  Rng rng(33);
  std::vector<float> grid(5 * 5);
  for (auto& v : grid) v = float(rng.uniform(-2, 2));
  Tape<float> t;
  Var g = t.leaf(tensor_from({5, 5}, grid));

  auto at = [&](double x, double y) {
    Var c = t.leaf(tensor_from({2}, {float(x), float(y)}));
    return double(t.val(bilinear_sample(t, g, c))[0]);
  };

  REQUIRE(at(3, 2) == double(grid[2 * 5 + 3]));  // exact grid value
  REQUIRE(at(1.5, 2) ==
          Catch::Approx((double(grid[2 * 5 + 1]) + grid[2 * 5 + 2]) / 2).margin(1e-6));

  // independent corner-weight oracle at (x=1.25, y=2.75)
  const double x = 1.25, y = 2.75;
  const int x0 = 1, y0 = 2;
  const double fx = x - x0, fy = y - y0;
  double oracle = (1 - fy) * (1 - fx) * grid[y0 * 5 + x0] +
                  (1 - fy) * fx * grid[y0 * 5 + x0 + 1] +
                  fy * (1 - fx) * grid[(y0 + 1) * 5 + x0] +
                  fy * fx * grid[(y0 + 1) * 5 + x0 + 1];
  REQUIRE(at(x, y) == Catch::Approx(oracle).margin(1e-6));

  // zero padding outside the grid
  REQUIRE(at(-2.0, 1.0) == 0.0);
  REQUIRE(at(1.0, 7.5) == 0.0);
}

TEST_CASE("fan-out gradients accumulate additively") {
  Tape<float> t;
  Var x = t.leaf(tensor_from({1, 3}, {1.f, 2.f, 3.f}), true);
  Var a = scale(t, x, 2.0f);
  Var b = scale(t, x, 3.0f);
  Var s = sum_all(t, add(t, a, b));
  t.backward(s);
  const auto& gx = t.grad(x);
  for (size_t i = 0; i < 3; ++i) REQUIRE(gx[i] == 5.0f);
}

TEST_CASE("reductions are chunking independent to 1e-6") {
  Rng rng(9);
  std::vector<float> v(100000);
  for (auto& x : v) x = float(rng.uniform(-10, 10));
  // full-sum oracle in one pass
  double full = 0.0;
  for (float x : v) full += double(x);
  // chunked variants
  for (size_t chunk : {7ull, 1000ull, 31337ull}) {
    double total = 0.0;
    for (size_t start = 0; start < v.size(); start += chunk) {
      double part = 0.0;
      for (size_t i = start; i < std::min(start + chunk, v.size()); ++i)
        part += double(v[i]);
      total += part;
    }
    REQUIRE(total == Catch::Approx(full).margin(1e-6));
  }
  Tape<float> t;
  auto s = t.val(sum_all(t, t.leaf(tensor_from({v.size()}, v))))[0];
  REQUIRE(double(s) == Catch::Approx(full).margin(2e-3));  // float cast of f64 sum
}

TEST_CASE("adamw: decoupled decay and scalar reference trajectory") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.01;

  ParamStore<float> store(1);
  auto& p = store.create("w", {3}, Init::Zero);
  p.value[0] = 1.f;
  p.value[1] = -2.f;
  p.value[2] = 0.5f;
  store.zero_grads();
  adamw_step(store, cfg, 1);
  REQUIRE(p.value[0] == Catch::Approx(1.0 * (1 - 0.1 * 0.01)).epsilon(1e-6));
  REQUIRE(p.value[1] == Catch::Approx(-2.0 * (1 - 0.1 * 0.01)).epsilon(1e-6));

  ParamStore<float> store2(1);
  auto& q = store2.create("w", {1}, Init::Zero);
  q.value[0] = 1.5f;
  AdamWConfig nodecay;
  nodecay.weight_decay = 0.0;
  store2.zero_grads();
  adamw_step(store2, nodecay, 1);
  REQUIRE(q.value[0] == 1.5f);

  // f(w) = w^2 from w=1, 10 steps, independent scalar AdamW reference
  ParamStore<float> store3(1);
  auto& w = store3.create("w", {1}, Init::Zero);
  w.value[0] = 1.f;
  AdamWConfig c3;
  c3.lr = 0.05;
  c3.weight_decay = 0.01;
  double rw = 1.0, rm = 0.0, rv = 0.0;
  double prev_abs = 1.0;
  for (int step = 1; step <= 10; ++step) {
    store3.zero_grads();
    w.grad[0] = 2.f * w.value[0];
    adamw_step(store3, c3, step);
    const double rg = 2.0 * rw;
    rm = c3.beta1 * rm + (1 - c3.beta1) * rg;
    rv = c3.beta2 * rv + (1 - c3.beta2) * rg * rg;
    const double mhat = rm / (1 - std::pow(c3.beta1, step));
    const double vhat = rv / (1 - std::pow(c3.beta2, step));
    rw = rw - c3.lr * c3.weight_decay * rw - c3.lr * mhat / (std::sqrt(vhat) + c3.eps);
    REQUIRE(double(w.value[0]) == Catch::Approx(rw).margin(1e-6));
    REQUIRE(std::fabs(double(w.value[0])) < prev_abs);
    prev_abs = std::fabs(double(w.value[0]));
  }

  ParamStore<float> store4(1);
  auto& bad = store4.create("oem.w1", {2}, Init::Zero);
  bad.grad[0] = std::numeric_limits<float>::quiet_NaN();
  REQUIRE_THROWS_WITH(adamw_step(store4, cfg, 1),
                      Catch::Matchers::ContainsSubstring("oem.w1"));
}

TEST_CASE("grad_check: analytic cases") {
  ParamStore<double> store(7);
  auto& w = store.create("w", {6}, Init::XavierUniform);

  Parameter<double>* params[] = {&w};
  auto sum_fn = [&](Tape<double>& t) { return sum_all(t, t.use(w)); };
  auto r1 = grad_check(sum_fn, params, 6, 1);
  REQUIRE(r1.max_rel_err < 1e-6);

  auto const_fn = [&](Tape<double>& t) {
    t.use(w);
    return t.leaf(Tensor<double>::scalar(3.25));
  };
  // constant function: analytic and numeric gradients are both zero
  auto r2 = grad_check(const_fn, params, 6, 1);
  REQUIRE(r2.max_rel_err == 0.0);
}

TEST_CASE("checkpoint save/load round trip") {
  ParamStore<float> a(42);
  a.create("alpha", {3, 4});
  a.create("beta", {7});
  const std::string path = "/tmp/sgg_test_ckpt.bin";
  a.save(path);

  ParamStore<float> b(7);  // different seed -> different init values
  auto& pa = b.create("alpha", {3, 4});
  auto& pb = b.create("beta", {7});
  b.load(path);
  for (size_t i = 0; i < pa.value.size(); ++i)
    REQUIRE(pa.value[i] == a.find("alpha")->value[i]);
  for (size_t i = 0; i < pb.value.size(); ++i)
    REQUIRE(pb.value[i] == a.find("beta")->value[i]);

  ParamStore<float> c(7);
  c.create("alpha", {3, 5});
  c.create("beta", {7});
  REQUIRE_THROWS_AS(c.load(path), IoError);
}
