#include <doctest.h>

#include <array>
#include <cmath>
#include <fstream>

#include "citelm/backbone.hpp"
#include "citelm/gradcheck.hpp"
#include "citelm/model.hpp"
#include "support.hpp"

using namespace citelm;

namespace {

Matrix<double> random_inputs(Eigen::Index L, int H, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix<double> x(L, H);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

}  // namespace

TEST_CASE("forward trace shapes follow the input length") {
  const auto s = ModelState<double>::initialize(testing::small_config());
  const auto tr = forward(s, random_inputs(7, 16, 1));
  CHECK(tr.length() == 7);
  CHECK(tr.hidden.rows() == 7);
  CHECK(tr.queries.rows() == 7);
  CHECK(tr.keys.rows() == 7);
  CHECK(tr.logits.rows() == 7);
  CHECK(tr.logits.cols() == 512);
  CHECK(tr.attention.rows() == 7);
}

TEST_CASE("forward is causal") {
  const auto s = ModelState<double>::initialize(testing::small_config(4));
  Matrix<double> x = random_inputs(10, 16, 2);
  const auto base = forward(s, x);
  const Eigen::Index k = 6;
  x.row(k).array() += 0.5;
  const auto moved = forward(s, x);
  CHECK(moved.hidden.topRows(k) == base.hidden.topRows(k));
  CHECK_FALSE(moved.hidden.row(k).isApprox(base.hidden.row(k)));
}

TEST_CASE("zero layers pass the embeddings through") {
  BackboneConfig c = testing::small_config();
  c.n_layers = 0;
  auto s = ModelState<double>::initialize(c);
  s.position_embedding.setZero();
  const Matrix<double> x = random_inputs(5, 16, 3);
  CHECK(forward(s, x).hidden == x);
}

TEST_CASE("forward rejects over-long sequences") {
  const auto s = ModelState<double>::initialize(testing::small_config());
  CHECK_THROWS_AS(forward(s, random_inputs(97, 16, 0)), SequenceTooLong);
}

TEST_CASE("embed is a table lookup") {
  const auto s = ModelState<double>::initialize(testing::small_config());
  const std::array<TokenId, 3> ids{42, 42, 7};
  const auto e = embed(s, std::span<const TokenId>(ids));
  CHECK(e.row(0) == e.row(1));
  CHECK(e.row(2) == s.token_embedding.row(7));
  const std::array<TokenId, 1> bad{512};
  CHECK_THROWS_AS(embed(s, std::span<const TokenId>(bad)), UnknownToken);
}

TEST_CASE("gradient of sum(embed([k])) is all ones on row k") {
  const auto s = ModelState<double>::initialize(testing::small_config());
  auto g = ModelState<double>::zeros(s.config);
  const std::array<TokenId, 1> ids{99};
  const Matrix<double> upstream = Matrix<double>::Ones(1, 16);
  embed_backward(std::span<const TokenId>(ids), upstream, g);
  CHECK(g.token_embedding.row(99) == RowVector<double>::Ones(16));
  CHECK(g.token_embedding.sum() == doctest::Approx(16.0));
}

TEST_CASE("parameter count is reproducible from the config") {
  const BackboneConfig c = testing::small_config();
  CHECK(ModelState<double>::initialize(c).parameter_count() == parameter_count(c));
  CHECK(ModelState<double>::initialize(c).tensors().size() == 2 + 12 * 2 + 5);
}

TEST_CASE("initialization is seed-deterministic") {
  const auto a = ModelState<double>::initialize(testing::small_config(5));
  const auto b = ModelState<double>::initialize(testing::small_config(5));
  const auto c = ModelState<double>::initialize(testing::small_config(6));
  CHECK(a.layers[1].wq == b.layers[1].wq);
  CHECK(a.layers[1].wq != c.layers[1].wq);
}

TEST_CASE("checkpoint round trip reproduces forward outputs") {
  const auto dir = testing::scratch_dir("ckpt");
  const auto s = ModelState<double>::initialize(testing::small_config(8));
  save_checkpoint(dir / "m.ckpt", s, nlohmann::ordered_json{{"note", "x"}});
  const auto back = load_checkpoint<double>(dir / "m.ckpt");
  CHECK(back.config == s.config);
  const auto x = random_inputs(9, 16, 4);
  CHECK(forward(back, x).logits == forward(s, x).logits);
  CHECK(read_checkpoint_header(dir / "m.ckpt").at("training").at("note") == "x");

  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS_AS(load_checkpoint<double>(dir / "junk.ckpt"), CheckpointError);
}

TEST_CASE("grad_check accepts a quadratic and catches a wrong gradient") {
  BackboneConfig c = testing::small_config();
  c.n_layers = 0;
  const auto s = ModelState<double>::initialize(c);
  const LossFunction quad = [](const ModelState<double>& m, ModelState<double>* g) {
    if (g) g->align_weight = m.align_weight;
    return 0.5 * m.align_weight.squaredNorm();
  };
  GradCheckOptions o;
  o.eps = 1e-5;
  CHECK(grad_check(s, quad, o).passed());

  const LossFunction wrong = [](const ModelState<double>& m, ModelState<double>* g) {
    if (g) g->align_weight = 2.0 * m.align_weight;
    return 0.5 * m.align_weight.squaredNorm();
  };
  CHECK_FALSE(grad_check(s, wrong, o).passed());
}

TEST_CASE("grad_check reports non-finite losses") {
  const auto s = ModelState<double>::initialize(testing::small_config());
  const LossFunction nan = [](const ModelState<double>&, ModelState<double>*) { return std::nan(""); };
  CHECK_THROWS_AS(grad_check(s, nan, {}), NonFiniteLoss);
}

TEST_CASE("backbone gradient through hidden and logits") {
  const auto s = testing::probe_state(2);
  const Matrix<double> x = random_inputs(6, 16, 9);
  const Matrix<double> wh = random_inputs(6, 16, 10);
  const Matrix<double> wl = random_inputs(6, 512, 11);
  const LossFunction fn = [&](const ModelState<double>& m, ModelState<double>* g) {
    const auto tr = forward(m, x);
    const double loss = (tr.hidden.array() * wh.array()).sum() + 0.01 * (tr.logits.array() * wl.array()).sum();
    if (g) {
      TraceGradient<double> up;
      up.hidden = wh;
      up.logits = 0.01 * wl;
      backward(m, tr, up, *g);
    }
    return loss;
  };
  GradCheckOptions o;
  o.eps = 1e-5;
  o.n_samples = 400;
  const auto r = grad_check(s, fn, o);
  INFO("worst " << r.worst()->tensor << " rel " << r.max_rel_error);
  CHECK(r.passed());
}
