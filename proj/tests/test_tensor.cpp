#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dial/checkpoint.hpp"
#include "dial/gradcheck.hpp"
#include "dial/optim.hpp"
#include "dial/tensor.hpp"

using namespace dial;

namespace {

// Scalar objective against a fixed random weighting so that ops whose plain
// mean is constant (softmax rows, layer_norm) still produce informative
// gradients. The weight tensor must be drawn once, outside the forward
// closure, so that repeated evaluations see the same function.
Tensor fixed_weights(Shape shape, Rng& rng) {
  std::vector<float> w(shape_numel(shape));
  for (auto& v : w) v = rng.uniform(-1.0f, 1.0f);
  return Tensor::from(std::move(shape), std::move(w));
}

Tensor weighted_mean(const Tensor& out, const Tensor& w) {
  return scale(mean(mul(out, w)), 3.0f);
}

GradCheckReport check_op(const std::function<Tensor(std::vector<ParamGroup>&)>& make_loss,
                         std::vector<ParamGroup>& groups, double tol = 1e-3) {
  GradCheckOptions opts;
  opts.step = 1e-3;
  opts.tol = tol;
  opts.entries_per_param = 10;
  auto fwd = [&]() { return make_loss(groups); };
  return grad_check(fwd, groups, opts);
}

std::vector<ParamGroup> one_group(std::initializer_list<Tensor> params) {
  ParamGroup g;
  g.name = "p";
  for (auto& t : params) {
    Tensor c = t;
    c.set_requires_grad(true);
    g.params.push_back(c);
  }
  return {g};
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  Tensor r = matmul(eye, b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(r.value()[i] == b.value()[i]);

  Tensor a = Tensor::from({1, 2}, {1, 2});
  Tensor z = Tensor::from({2, 1}, {0, 0});
  CHECK(matmul(a, z).value()[0] == 0.0f);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::from({2, 3}, std::vector<float>(6, 1.0f));
  Tensor b = Tensor::from({2, 2}, std::vector<float>(4, 1.0f));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ContractError);
}

TEST_CASE("matmul gradient of sum matches column sums of b") {
  Rng rng(7);
  Tensor a = Tensor::randn({3, 4}, rng, 1.0f, true);
  Tensor b = Tensor::randn({4, 2}, rng);
  Tensor loss = scale(mean(matmul(a, b)), 6.0f);  // == sum of all entries
  backward(loss);
  // d sum(ab) / d a[i][k] = sum_j b[k][j]
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 4; ++k) {
      float want = b.value()[k * 2] + b.value()[k * 2 + 1];
      CHECK(a.grad()[i * 4 + k] == doctest::Approx(want).epsilon(1e-5));
    }
}

TEST_CASE("every primitive passes the finite-difference oracle at 10 points") {
  Rng seeds(2024);
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(seeds.next_u32());
    Rng wrng(seeds.next_u32());

    SUBCASE("") {}  // keep doctest quiet about loop structure

    {  // matmul
      auto groups = one_group({Tensor::randn({3, 4}, rng), Tensor::randn({4, 5}, rng)});
      Tensor w = fixed_weights({3, 5}, wrng);
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) {
            return weighted_mean(matmul(g[0].params[0], g[0].params[1]), w);
          },
          groups);
      CHECK_MESSAGE(rep.pass, "matmul: ", rep.summary());
    }
    {  // add (same shape + row broadcast + scalar) and mul
      auto groups = one_group({Tensor::randn({4, 6}, rng), Tensor::randn({4, 6}, rng),
                               Tensor::randn({6}, rng), Tensor::randn({1}, rng)});
      Tensor w = fixed_weights({4, 6}, wrng);
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) {
            Tensor s = add(mul(g[0].params[0], g[0].params[1]), g[0].params[2]);
            return weighted_mean(add(s, g[0].params[3]), w);
          },
          groups);
      CHECK_MESSAGE(rep.pass, "add/mul: ", rep.summary());
    }
    {  // concat + slice, both axes
      auto groups = one_group({Tensor::randn({3, 4}, rng), Tensor::randn({2, 4}, rng),
                               Tensor::randn({5, 3}, rng)});
      Tensor w = fixed_weights({3, 4}, wrng);
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) {
            Tensor cat0 = concat({g[0].params[0], g[0].params[1]}, 0);  // 5x4
            Tensor cat1 = concat({cat0, g[0].params[2]}, 1);            // 5x7
            Tensor sl = slice(slice(cat1, 0, 1, 4), 1, 2, 6);
            return weighted_mean(sl, w);
          },
          groups);
      CHECK_MESSAGE(rep.pass, "concat/slice: ", rep.summary());
    }
    {  // mean, gelu
      auto groups = one_group({Tensor::randn({4, 4}, rng)});
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) {
            return scale(mean(gelu(g[0].params[0])), 2.0f);
          },
          groups);
      CHECK_MESSAGE(rep.pass, "gelu/mean: ", rep.summary());
    }
    {  // softmax
      auto groups = one_group({Tensor::randn({3, 5}, rng)});
      Tensor w = fixed_weights({3, 5}, wrng);
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) { return weighted_mean(softmax(g[0].params[0]), w); },
          groups);
      CHECK_MESSAGE(rep.pass, "softmax: ", rep.summary());
    }
    {  // layer_norm
      auto groups = one_group({Tensor::randn({4, 8}, rng), Tensor::randn({8}, rng, 0.5f),
                               Tensor::randn({8}, rng, 0.5f)});
      Tensor w = fixed_weights({4, 8}, wrng);
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) {
            return weighted_mean(layer_norm(g[0].params[0], g[0].params[1], g[0].params[2]), w);
          },
          groups);
      CHECK_MESSAGE(rep.pass, "layer_norm: ", rep.summary());
    }
    {  // scaled_dot_attention (single head) and multihead
      auto groups = one_group({Tensor::randn({3, 8}, rng), Tensor::randn({5, 8}, rng),
                               Tensor::randn({5, 8}, rng)});
      Tensor w = fixed_weights({3, 16}, wrng);
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) {
            Tensor o1 = scaled_dot_attention(g[0].params[0], g[0].params[1], g[0].params[2]);
            Tensor o2 = multihead_attention(g[0].params[0], g[0].params[1], g[0].params[2], 2);
            return weighted_mean(concat({o1, o2}, 1), w);
          },
          groups);
      CHECK_MESSAGE(rep.pass, "attention: ", rep.summary());
    }
    {  // mse
      auto groups = one_group({Tensor::randn({4, 3}, rng), Tensor::randn({4, 3}, rng)});
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) { return mse(g[0].params[0], g[0].params[1]); }, groups);
      CHECK_MESSAGE(rep.pass, "mse: ", rep.summary());
    }
    {  // gather_rows
      auto groups = one_group({Tensor::randn({6, 4}, rng)});
      Tensor w = fixed_weights({4, 4}, wrng);
      auto rep = check_op(
          [&](std::vector<ParamGroup>& g) {
            return weighted_mean(gather_rows(g[0].params[0], {0, 3, 3, 5}), w);
          },
          groups);
      CHECK_MESSAGE(rep.pass, "gather_rows: ", rep.summary());
    }
  }
}

TEST_CASE("layer_norm handles degenerate and normalized rows") {
  Tensor gain = Tensor::full({4}, 1.0f);
  Tensor bias = Tensor::zeros({4});

  Tensor constant = Tensor::from({1, 4}, {5, 5, 5, 5});
  Tensor out = layer_norm(constant, gain, bias);
  for (float v : out.value()) CHECK(std::abs(v) < 1e-3f);

  // variance-1, mean-0 row stays put
  Tensor normed = Tensor::from({1, 4}, {-1.3416407865f, -0.4472135955f, 0.4472135955f, 1.3416407865f});
  Tensor out2 = layer_norm(normed, gain, bias);
  for (int j = 0; j < 4; ++j) CHECK(out2.value()[j] == doctest::Approx(normed.value()[j]).epsilon(1e-4));

  CHECK_THROWS_AS(Tensor::zeros({3, 0}), ContractError);
}

TEST_CASE("layer_norm output rows have unit variance") {
  Rng rng(3);
  Tensor x = Tensor::randn({8, 16}, rng, 2.0f);
  Tensor out = layer_norm(x, Tensor::full({16}, 1.0f), Tensor::zeros({16}));
  for (int i = 0; i < 8; ++i) {
    double m = 0, v = 0;
    for (int j = 0; j < 16; ++j) m += out.value()[i * 16 + j];
    m /= 16;
    for (int j = 0; j < 16; ++j) {
      double c = out.value()[i * 16 + j] - m;
      v += c * c;
    }
    v /= 16;
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("attention with a single key copies v[0] to every row") {
  Rng rng(11);
  Tensor q = Tensor::randn({4, 6}, rng);
  Tensor k = Tensor::randn({1, 6}, rng);
  Tensor v = Tensor::randn({1, 6}, rng);
  Tensor out = scaled_dot_attention(q, k, v);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) CHECK(out.value()[i * 6 + j] == doctest::Approx(v.value()[j]));
}

TEST_CASE("attention is invariant to per-row logit shifts") {
  Rng rng(12);
  const int s = 2, t = 3, d = 4;
  // All keys share k[j][0] == 1, so shifting q[i][0] adds a constant to row i's logits.
  std::vector<float> kv(t * d);
  for (int j = 0; j < t; ++j) {
    kv[j * d] = 1.0f;
    for (int c = 1; c < d; ++c) kv[j * d + c] = rng.normal();
  }
  Tensor k = Tensor::from({t, d}, kv);
  Tensor v = Tensor::randn({t, d}, rng);
  Tensor q = Tensor::randn({s, d}, rng);
  Tensor out1 = scaled_dot_attention(q, k, v);

  std::vector<float> q2(q.value().begin(), q.value().end());
  q2[0] += 7.5f;  // shifts every logit of row 0 by 7.5/sqrt(d)
  Tensor out2 = scaled_dot_attention(Tensor::from({s, d}, q2), k, v);
  for (int j = 0; j < d; ++j)
    CHECK(out1.value()[j] == doctest::Approx(out2.value()[j]).epsilon(2e-5));
}

TEST_CASE("attention matches a three-loop reference") {
  Rng rng(13);
  const int s = 2, t = 3, d = 4;
  Tensor q = Tensor::randn({s, d}, rng);
  Tensor k = Tensor::randn({t, d}, rng);
  Tensor v = Tensor::randn({t, d}, rng);
  Tensor out = scaled_dot_attention(q, k, v);

  // Reference: explicit loops, no shared code with the op.
  std::vector<double> ref(s * d, 0.0);
  for (int i = 0; i < s; ++i) {
    std::vector<double> logits(t);
    for (int j = 0; j < t; ++j) {
      double dot = 0;
      for (int c = 0; c < d; ++c) dot += double(q.value()[i * d + c]) * k.value()[j * d + c];
      logits[j] = dot / std::sqrt(double(d));
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0;
    for (int j = 0; j < t; ++j) denom += std::exp(logits[j] - mx);
    for (int j = 0; j < t; ++j) {
      double p = std::exp(logits[j] - mx) / denom;
      for (int c = 0; c < d; ++c) ref[i * d + c] += p * v.value()[j * d + c];
    }
  }
  for (int i = 0; i < s * d; ++i) CHECK(out.value()[i] == doctest::Approx(ref[i]).epsilon(1e-6));
}

TEST_CASE("backward fills ones for sum and zeros for mse(x,x)") {
  Rng rng(5);
  Tensor x = Tensor::randn({3, 5}, rng, 1.0f, true);
  Tensor loss = scale(mean(x), float(x.numel()));
  backward(loss);
  for (float g : x.grad()) CHECK(g == doctest::Approx(1.0f));

  Tensor y = Tensor::randn({4}, rng, 1.0f, true);
  Tensor loss2 = mse(y, y);
  CHECK(loss2.item() == 0.0f);
  backward(loss2);
  for (float g : y.grad()) CHECK(g == 0.0f);
}

TEST_CASE("backward twice without reset is a double-accumulation error") {
  Rng rng(6);
  Tensor x = Tensor::randn({3}, rng, 1.0f, true);
  Tensor loss = mean(x);
  backward(loss);
  CHECK_THROWS_WITH_AS(backward(loss), doctest::Contains("twice"), ContractError);
}

TEST_CASE("two-layer MLP gradients match finite differences") {
  Rng rng(21);
  Tensor x = Tensor::randn({4, 8}, rng);
  auto groups = one_group({Tensor::randn({8, 16}, rng, 0.5f), Tensor::zeros({16}),
                           Tensor::randn({16, 4}, rng, 0.5f), Tensor::zeros({4})});
  Rng wrng(22);
  Tensor w = fixed_weights({4, 4}, wrng);
  auto rep = check_op(
      [&](std::vector<ParamGroup>& g) {
        Tensor h = gelu(add(matmul(x, g[0].params[0]), g[0].params[1]));
        Tensor out = add(matmul(h, g[0].params[2]), g[0].params[3]);
        return weighted_mean(out, w);
      },
      groups);
  CHECK_MESSAGE(rep.pass, rep.summary());
  CHECK(rep.max_rel_err < 1e-3f);
}

TEST_CASE("adam: frozen group is bit-identical, basic step sizes") {
  Rng rng(31);
  ParamGroup frozen{"vit", {Tensor::randn({4, 4}, rng, 1.0f, true)}, false};
  ParamGroup live{"w", {Tensor::from({1}, {0.5f}, true)}, true};
  std::vector<ParamGroup> groups{frozen, live};
  AdamConfig cfg;
  cfg.lr = 0.1f;
  AdamState adam(groups, cfg);

  std::vector<float> before(groups[0].params[0].value().begin(), groups[0].params[0].value().end());
  // constant gradient of exactly 1 on the scalar
  Tensor loss = add(mean(groups[1].params[0]), scale(mean(groups[0].params[0]), 0.37f));
  backward(loss);
  adam.step(groups);

  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(groups[0].params[0].value()[i] == before[i]);  // bit identical
  // bias-corrected first step moves by ~lr
  CHECK(groups[1].params[0].value()[0] == doctest::Approx(0.4f).epsilon(1e-5));
  CHECK_FALSE(groups[1].params[0].has_grad());  // gradients cleared
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Rng rng(32);
  std::vector<ParamGroup> groups{{"w", {Tensor::randn({3}, rng, 1.0f, true)}, true}};
  AdamState adam(groups, {});
  std::vector<float> before(groups[0].params[0].value().begin(), groups[0].params[0].value().end());
  Tensor target = groups[0].params[0].detach();
  backward(mse(groups[0].params[0], target));
  adam.step(groups);
  for (std::size_t i = 0; i < 3; ++i) CHECK(groups[0].params[0].value()[i] == before[i]);
}

TEST_CASE("adam: missing gradient on a trainable parameter names it") {
  Rng rng(33);
  std::vector<ParamGroup> groups{{"policy", {Tensor::randn({2}, rng, 1.0f, true)}, true}};
  AdamState adam(groups, {});
  CHECK_THROWS_WITH_AS(adam.step(groups), doctest::Contains("policy"), ContractError);
}

TEST_CASE("grad_check: linear layer under 1e-4, frozen group flagged") {
  Rng rng(41);
  Tensor x = Tensor::randn({6, 8}, rng);
  std::vector<ParamGroup> groups{
      {"linear", {Tensor::randn({8, 4}, rng, 0.5f, true), Tensor::zeros({4}, true)}, true},
      {"frozen", {Tensor::randn({4, 4}, rng, 0.5f, true)}, false}};
  Rng wrng(42);
  std::vector<float> w(6 * 4);
  for (auto& v : w) v = wrng.uniform(-1.0f, 1.0f);
  Tensor wt = Tensor::from({6, 4}, w);
  auto fwd = [&]() {
    Tensor out = add(matmul(x, groups[0].params[0]), groups[0].params[1]);
    Tensor out2 = matmul(out, groups[1].params[0]);
    return scale(mean(mul(out2, matmul(wt, groups[1].params[0]))), 3.0f);
  };
  GradCheckOptions opts;
  // The objective is linear in these parameters, so the central difference is
  // truncation-free and a wider step just averages out float32 noise.
  opts.step = 1e-2;
  opts.tol = 1e-3;
  opts.entries_per_param = 12;
  auto rep = grad_check(fwd, groups, opts);
  CHECK_MESSAGE(rep.pass, rep.summary());
  bool saw_frozen = false;
  for (auto& e : rep.entries) {
    if (e.name.rfind("linear", 0) == 0) CHECK(e.max_rel_err < 1e-4f);
    if (e.name.rfind("frozen", 0) == 0) {
      saw_frozen = true;
      CHECK_FALSE(e.trainable);
    }
  }
  CHECK(saw_frozen);
}

TEST_CASE("forward and backward are bit-deterministic given the same seed") {
  auto run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::randn({5, 8}, rng);
    Tensor w = Tensor::randn({8, 8}, rng, 0.3f, true);
    Tensor out = multihead_attention(matmul(x, w), x, x, 2);
    Tensor loss = mse(out, Tensor::zeros({5, 8}));
    backward(loss);
    std::vector<float> r(out.value().begin(), out.value().end());
    r.insert(r.end(), w.grad().begin(), w.grad().end());
    return r;
  };
  auto a = run(99), b = run(99);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("non-finite results are an error, never silent") {
  Tensor big = Tensor::full({4}, 1e30f);
  CHECK_THROWS_AS(mul(big, big), NumericError);
  CHECK_THROWS_AS(Tensor::from({1}, {std::numeric_limits<float>::quiet_NaN()}), NumericError);
}

TEST_CASE("checkpoint round-trips groups, adam state and meta exactly") {
  Rng rng(51);
  std::vector<ParamGroup> groups{
      {"vit", {Tensor::randn({4, 6}, rng, 1.0f, true), Tensor::randn({6}, rng, 1.0f, true)}, false},
      {"system1", {Tensor::randn({3, 3}, rng, 1.0f, true)}, true}};
  AdamConfig cfg;
  cfg.lr = 0.01f;
  AdamState adam(groups, cfg);
  backward(scale(mean(groups[1].params[0]), 2.0f));
  adam.step(groups);

  CheckpointMeta meta;
  meta.global_step = 1234;
  meta.stage = 1;
  meta.norm_mean = {0.1f, 0.2f, 0.3f};
  meta.norm_std = {1.0f, 2.0f, 0.5f};
  const std::string path = "ckpt_test.bin";
  save_checkpoint(path, groups, &adam, meta);

  // fresh model, same topology
  Rng rng2(777);
  std::vector<ParamGroup> loaded{
      {"vit", {Tensor::randn({4, 6}, rng2, 1.0f, true), Tensor::randn({6}, rng2, 1.0f, true)}, false},
      {"system1", {Tensor::randn({3, 3}, rng2, 1.0f, true)}, true}};
  AdamState adam2(loaded, {});
  CheckpointMeta got = load_checkpoint(path, loaded, &adam2);
  CHECK(got.global_step == 1234);
  CHECK(got.stage == 1);
  CHECK(got.norm_mean == meta.norm_mean);
  CHECK(adam2.step_count() == adam.step_count());
  for (std::size_t gi = 0; gi < groups.size(); ++gi)
    for (std::size_t pi = 0; pi < groups[gi].params.size(); ++pi) {
      auto a = groups[gi].params[pi].value();
      auto b = loaded[gi].params[pi].value();
      for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }

  // save -> load -> save is byte identical
  const std::string path2 = "ckpt_test2.bin";
  save_checkpoint(path2, loaded, &adam2, got);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), {});
  std::string s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);

  // mismatched config names the group
  std::vector<ParamGroup> bad{
      {"vit", {Tensor::randn({4, 5}, rng2, 1.0f, true), Tensor::randn({6}, rng2, 1.0f, true)}, false},
      {"system1", {Tensor::randn({3, 3}, rng2, 1.0f, true)}, true}};
  CHECK_THROWS_WITH_AS(load_checkpoint(path, bad, nullptr), doctest::Contains("vit"), ContractError);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}
