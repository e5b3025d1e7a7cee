#include "qgc/checkpoint.hpp"
#include "qgc/tensor.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fd_check.hpp"

using namespace qgc;
using qgc::testutil::fd_check;

namespace {

Tensor randt(std::vector<int> shape, Rng& rng, bool requires_grad = true) {
  return Tensor::randn(std::move(shape), rng, 0.8, requires_grad);
}

}  // namespace

TEST_CASE("tensor construction enforces shape/data agreement") {
  CHECK_THROWS_AS(Tensor::from_data({2, 3}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({0, 3}), std::invalid_argument);
  Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(t.numel() == 4);
  CHECK(t.at(1, 0) == 3.0);
  CHECK(Tensor::scalar(2.5).value() == 2.5);
  CHECK_THROWS_AS(t.value(), std::invalid_argument);
}

TEST_CASE("matmul matches a hand-computed product") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({3, 2}, {7, 8, 9, 10, 11, 12});
  Tensor c = matmul(a, b);
  // row0 = [1*7+2*9+3*11, 1*8+2*10+3*12] = [58, 64]
  CHECK(c.at(0, 0) == 58.0);
  CHECK(c.at(0, 1) == 64.0);
  CHECK(c.at(1, 0) == 139.0);
  CHECK(c.at(1, 1) == 154.0);
}

TEST_CASE("matmul reports both shapes on mismatch") {
  Tensor a = Tensor::zeros({3, 4});
  Tensor b = Tensor::zeros({5, 2});
  try {
    matmul(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[3x4]") != std::string::npos);
    CHECK(msg.find("[5x2]") != std::string::npos);
  }
}

TEST_CASE("matmul_nt equals matmul against the explicit transpose") {
  Rng rng(7);
  Tensor a = randt({3, 5}, rng, false);
  Tensor b = randt({4, 5}, rng, false);
  Tensor direct = matmul_nt(a, b);
  Tensor ref = matmul(a, transpose(b));
  for (long i = 0; i < direct.numel(); ++i)
    CHECK(direct.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
}

TEST_CASE("gelu matches the exact erf form at pinned points") {
  Tensor x = Tensor::from_data({1, 5}, {-1.5, -0.5, 0.0, 0.5, 1.5});
  Tensor y = gelu(x);
  CHECK(y.data()[0] == doctest::Approx(-0.10021080190328713).epsilon(1e-14));
  CHECK(y.data()[1] == doctest::Approx(-0.15426876936299344).epsilon(1e-14));
  CHECK(y.data()[2] == 0.0);
  CHECK(y.data()[3] == doctest::Approx(0.34573123063700656).epsilon(1e-14));
  CHECK(y.data()[4] == doctest::Approx(1.399789198096713).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one and match pinned values") {
  Tensor x = Tensor::from_data({1, 3}, {1, 2, 3});
  Tensor y = softmax_rows(x);
  double sum = y.data()[0] + y.data()[1] + y.data()[2];
  CHECK(std::abs(sum - 1.0) < 1e-12);
  CHECK(y.data()[0] == doctest::Approx(0.090030573170380462).epsilon(1e-14));
  CHECK(y.data()[1] == doctest::Approx(0.24472847105479764).epsilon(1e-14));
  CHECK(y.data()[2] == doctest::Approx(0.66524095577482178).epsilon(1e-14));

  // large-magnitude rows stay finite thanks to max-subtraction
  Tensor big = Tensor::from_data({1, 2}, {1000.0, 1001.0});
  Tensor yb = softmax_rows(big);
  CHECK(std::isfinite(yb.data()[0]));
  CHECK(std::abs(yb.data()[0] + yb.data()[1] - 1.0) < 1e-12);
}

TEST_CASE("softmax rejects non-finite input") {
  Tensor x = Tensor::from_data({1, 2}, {std::nan(""), 1.0});
  CHECK_THROWS_AS(softmax_rows(x), std::runtime_error);
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Rng rng(11);
  Tensor x = randt({4, 6}, rng, false);
  Tensor ls = log_softmax_rows(x);
  Tensor s = softmax_rows(x);
  for (long i = 0; i < x.numel(); ++i)
    CHECK(ls.data()[i] == doctest::Approx(std::log(s.data()[i])).epsilon(1e-12));
}

TEST_CASE("layer_norm matches pinned values and identity params") {
  Tensor x = Tensor::from_data({1, 4}, {1, 2, 3, 4});
  Tensor gain = Tensor::full({1, 4}, 1.0);
  Tensor bias = Tensor::zeros({1, 4});
  Tensor y = layer_norm(x, gain, bias);
  CHECK(y.data()[0] == doctest::Approx(-1.3416354199689269).epsilon(1e-13));
  CHECK(y.data()[1] == doctest::Approx(-0.447211806656309).epsilon(1e-13));
  CHECK(y.data()[2] == doctest::Approx(0.447211806656309).epsilon(1e-13));
  CHECK(y.data()[3] == doctest::Approx(1.3416354199689269).epsilon(1e-13));
}

TEST_CASE("cross entropy matches pinned value and fused gradient") {
  Tensor logits = Tensor::from_data({1, 3}, {1, 2, 3}, true);
  Tape tape;
  Tensor loss = cross_entropy_rows(logits, {2});
  CHECK(loss.value() == doctest::Approx(0.40760596444438046).epsilon(1e-13));
  tape.backward(loss);
  // dlogits = softmax − onehot
  CHECK(logits.grad()[0] == doctest::Approx(0.090030573170380462).epsilon(1e-12));
  CHECK(logits.grad()[1] == doctest::Approx(0.24472847105479764).epsilon(1e-12));
  CHECK(logits.grad()[2] == doctest::Approx(0.66524095577482178 - 1.0).epsilon(1e-12));
}

TEST_CASE("kl matches pinned value, is zero at equality, and its gradient is q - p") {
  std::vector<double> p = {0.7, 0.2, 0.1};
  Tensor logits = Tensor::from_data({1, 3}, {0.5, 0.3, 0.2}, true);
  Tape tape;
  Tensor loss = kl_vs_const_rows(p, logits);
  CHECK(loss.value() == doctest::Approx(0.20801250830112264).epsilon(1e-13));
  tape.backward(loss);
  CHECK(logits.grad()[0] == doctest::Approx(0.39069383326981572 - 0.7).epsilon(1e-12));
  CHECK(logits.grad()[1] == doctest::Approx(0.31987305633591973 - 0.2).epsilon(1e-12));
  CHECK(logits.grad()[2] == doctest::Approx(0.28943311039426467 - 0.1).epsilon(1e-12));

  // KL(p‖p) = 0 when the student reproduces the teacher exactly
  Tensor match = Tensor::from_data({1, 3}, {std::log(0.7), std::log(0.2), std::log(0.1)});
  CHECK(kl_vs_const_rows(p, match).value() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("finite differences validate every op gradient") {
  Rng rng(42);

  SUBCASE("matmul") {
    Tensor a = randt({3, 4}, rng), b = randt({4, 2}, rng);
    auto r = fd_check([&] { return sum_all(gelu(matmul(a, b))); }, {a, b});
    CHECK(r.max_rel_err < 1e-6);
  }
  SUBCASE("matmul_nt and transpose") {
    Tensor a = randt({3, 4}, rng), b = randt({5, 4}, rng);
    auto r = fd_check([&] { return sum_all(mul(matmul_nt(a, b), transpose(matmul_nt(b, a)))); },
                      {a, b});
    CHECK(r.max_rel_err < 1e-6);
  }
  SUBCASE("add, add_row, mul, scale") {
    Tensor x = randt({3, 4}, rng), y = randt({3, 4}, rng), b = randt({1, 4}, rng);
    auto r = fd_check([&] { return sum_all(mul(add_row(add(x, y), b), scale(x, 0.7))); },
                      {x, y, b});
    CHECK(r.max_rel_err < 1e-6);
  }
  SUBCASE("mul with both arguments aliased accumulates both branches") {
    Tensor x = Tensor::from_data({1, 3}, {1.0, -2.0, 3.0}, true);
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    tape.backward(loss);
    for (int i = 0; i < 3; ++i)
      CHECK(x.grad()[i] == doctest::Approx(2.0 * x.data()[i]).epsilon(1e-12));
  }
  SUBCASE("gelu") {
    Tensor x = randt({2, 6}, rng);
    auto r = fd_check([&] { return sum_all(gelu(x)); }, {x});
    CHECK(r.max_rel_err < 1e-6);
  }
  SUBCASE("softmax_rows") {
    Tensor x = randt({3, 5}, rng), w = randt({3, 5}, rng);
    auto r = fd_check([&] { return sum_all(mul(softmax_rows(x), w)); }, {x, w});
    CHECK(r.max_rel_err < 1e-5);
  }
  SUBCASE("log_softmax_rows") {
    Tensor x = randt({3, 5}, rng), w = randt({3, 5}, rng);
    auto r = fd_check([&] { return sum_all(mul(log_softmax_rows(x), w)); }, {x, w});
    CHECK(r.max_rel_err < 1e-5);
  }
  SUBCASE("layer_norm") {
    Tensor x = randt({3, 6}, rng), g = randt({1, 6}, rng), b = randt({1, 6}, rng);
    Tensor w = randt({3, 6}, rng, false);
    auto r = fd_check([&] { return sum_all(mul(layer_norm(x, g, b), w)); }, {x, g, b});
    CHECK(r.max_rel_err < 1e-5);
  }
  SUBCASE("embedding with repeated ids accumulates into shared rows") {
    Tensor table = randt({5, 4}, rng);
    std::vector<int> ids = {1, 3, 1, 0, 1};
    auto r = fd_check([&] { return sum_all(gelu(embedding(table, ids))); }, {table});
    CHECK(r.max_rel_err < 1e-6);
  }
  SUBCASE("concat and slice") {
    Tensor a = randt({2, 3}, rng), b = randt({3, 3}, rng), c = randt({5, 2}, rng);
    auto r = fd_check(
        [&] {
          Tensor cat = concat_cols({concat_rows({a, b}), c});
          return sum_all(gelu(slice_cols(slice_rows(cat, 1, 3), 1, 3)));
        },
        {a, b, c});
    CHECK(r.max_rel_err < 1e-6);
  }
  SUBCASE("mean_rows, mean_all") {
    Tensor x = randt({4, 3}, rng);
    auto r = fd_check([&] { return mean_all(gelu(mean_rows(x))); }, {x});
    CHECK(r.max_rel_err < 1e-6);
  }
  SUBCASE("cross_entropy_rows") {
    Tensor x = randt({4, 7}, rng);
    std::vector<int> targets = {2, 0, 6, 3};
    auto r = fd_check([&] { return cross_entropy_rows(scale(x, 1.3), targets); }, {x});
    CHECK(r.max_rel_err < 1e-5);
  }
  SUBCASE("kl_vs_const_rows") {
    Rng prng(9);
    std::vector<double> teacher;
    for (int i = 0; i < 3; ++i) {
      double row[5], s = 0;
      for (double& v : row) {
        v = std::exp(prng.normal());
        s += v;
      }
      for (double v : row) teacher.push_back(v / s);
    }
    Tensor x = randt({3, 5}, rng);
    auto r = fd_check([&] { return kl_vs_const_rows(teacher, x); }, {x});
    CHECK(r.max_rel_err < 1e-5);
  }
}

TEST_CASE("backward requires a tracked scalar loss") {
  Tensor x = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  {
    Tape tape;
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);  // not scalar
  }
  {
    Tensor frozen = Tensor::from_data({2, 2}, {1, 2, 3, 4}, false);
    Tape tape;
    Tensor loss = sum_all(frozen);
    CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);  // nothing tracked
  }
}

TEST_CASE("frozen leaves receive no gradient") {
  Tensor train = Tensor::from_data({1, 3}, {1, 2, 3}, true);
  Tensor frozen = Tensor::from_data({1, 3}, {4, 5, 6}, false);
  Tape tape;
  Tensor loss = sum_all(mul(train, frozen));
  tape.backward(loss);
  CHECK(train.has_grad());
  CHECK_FALSE(frozen.has_grad());
  for (int i = 0; i < 3; ++i) CHECK(train.grad()[i] == frozen.data()[i]);
}

TEST_CASE("detach blocks gradient flow") {
  Tensor x = Tensor::from_data({1, 2}, {1, 2}, true);
  Tape tape;
  Tensor held = scale(x, 3.0);
  Tensor cut = held.detach();
  Tensor loss = sum_all(mul(cut, cut));
  CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
}

TEST_CASE("NoTape suspends recording") {
  Tensor x = Tensor::from_data({1, 2}, {1, 2}, true);
  Tape tape;
  {
    NoTape guard;
    Tensor y = scale(x, 2.0);
    CHECK_FALSE(y.tracked());
  }
  CHECK(tape.size() == 0);
  Tensor y = scale(x, 2.0);
  CHECK(y.tracked());
  CHECK(tape.size() == 1);
}

TEST_CASE("gradients are deterministic across identical replays") {
  auto run = [] {
    Rng rng(123);
    Tensor x = randt({4, 4}, rng);
    Tensor w = randt({4, 4}, rng);
    Tape tape;
    Tensor loss = sum_all(softmax_rows(matmul(gelu(x), w)));
    tape.backward(loss);
    std::vector<double> out = x.grad();
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.push_back(loss.value());
    return out;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);  // bitwise
}

TEST_CASE("rng is reproducible and ranges are respected") {
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(6);
  for (int i = 0; i < 1000; ++i) {
    int v = r.randint(-3, 4);
    CHECK(v >= -3);
    CHECK(v <= 4);
  }
  std::vector<int> v1 = {1, 2, 3, 4, 5}, v2 = v1;
  Rng s1(9), s2(9);
  s1.shuffle(v1);
  s2.shuffle(v2);
  CHECK(v1 == v2);
}

TEST_CASE("adam applies the bias-corrected update") {
  Tensor theta = Tensor::from_data({1}, {1.0}, true);
  AdamOptimizer opt({theta}, 0.1);
  theta.grad_ensure()[0] = 0.5;
  opt.step();
  CHECK(theta.data()[0] == doctest::Approx(0.90000000199999985).epsilon(1e-12));
  CHECK(opt.step_count() == 1);
}

TEST_CASE("adam refuses frozen tensors") {
  Tensor frozen = Tensor::zeros({2, 2}, false);
  CHECK_THROWS_AS(AdamOptimizer({frozen}, 0.1), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bit-exactly and hash changes with content") {
  Rng rng(21);
  NamedParams params = {{"emb", randt({6, 4}, rng, false)}, {"w", randt({4, 4}, rng, false)},
                        {"b", randt({1, 4}, rng, false)}};
  auto path = std::filesystem::temp_directory_path() / "qgc_test_ckpt.qgc";
  save_checkpoint(path.string(), params);

  NamedParams loaded = load_checkpoint(path.string());
  REQUIRE(loaded.size() == params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(loaded[i].name == params[i].name);
    CHECK(loaded[i].tensor.shape() == params[i].tensor.shape());
    for (size_t j = 0; j < params[i].tensor.data().size(); ++j)
      CHECK(loaded[i].tensor.data()[j] == params[i].tensor.data()[j]);  // bitwise
  }

  uint64_t h1 = params_hash(params);
  CHECK(h1 == params_hash(loaded));
  params[0].tensor.data()[0] += 1e-9;
  CHECK(params_hash(params) != h1);

  // loading into mismatched shapes is an error that names the tensor
  NamedParams wrong = {{"emb", Tensor::zeros({6, 5})}};
  try {
    load_checkpoint_into(path.string(), wrong);
    FAIL("expected throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("emb") != std::string::npos);
  }
  NamedParams missing = {{"nope", Tensor::zeros({1})}};
  CHECK_THROWS_AS(load_checkpoint_into(path.string(), missing), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint files are byte-identical across saves of equal params") {
  Rng rng(33);
  NamedParams params = {{"a", randt({3, 3}, rng, false)}, {"b", randt({2, 5}, rng, false)}};
  auto p1 = std::filesystem::temp_directory_path() / "qgc_ckpt_a.qgc";
  auto p2 = std::filesystem::temp_directory_path() / "qgc_ckpt_b.qgc";
  save_checkpoint(p1.string(), params);
  save_checkpoint(p2.string(), params);
  CHECK(file_hash(p1.string()) == file_hash(p2.string()));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}
