#include "ornn/training.hpp"

#include "test_support.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <numbers>
#include <utility>

using namespace ornn;

namespace {

Batch copy_batch(const CopyConfig& cfg, int n, SeededRng& rng) {
  std::vector<CopySample> s;
  for (int i = 0; i < n; ++i) s.push_back(gen_copy(cfg, rng));
  return make_batch(std::span<const CopySample>(s));
}

Batch adding_batch(int T, int n, SeededRng& rng) {
  std::vector<AddingSample> s;
  for (int i = 0; i < n; ++i) s.push_back(gen_adding(AddingConfig{T}, rng));
  return make_batch(std::span<const AddingSample>(s));
}

void expect_passes(const Model& model, const Batch& batch, const char* what) {
  const GradCheckReport r = grad_check(model, batch, 1e-4);
  std::size_t checked = 0, skipped = 0;
  for (const auto& t : r.tensors) {
    EXPECT_LT(t.max_rel_error, 1e-4) << what << " tensor " << t.name;
    checked += t.checked;
    skipped += t.skipped;
  }
  EXPECT_GT(checked, 20 * skipped) << what;
  std::printf("%s: max rel error %.3g, %zu checked, %zu skipped\n", what, r.max_rel_error(), checked,
              skipped);
}

}  // namespace

TEST(GradCheck, LtRnnCopy) {
  SeededRng rng(1, 0);
  const CopyConfig cfg{3, 2, 20};
  for (Nonlinearity nl : {Nonlinearity::identity, Nonlinearity::tanh, Nonlinearity::relu}) {
    const Model m = random_model({Architecture::ltrnn, 5, 8, 5, nl}, rng, 0.3);
    expect_passes(m, copy_batch(cfg, 3, rng), "ltrnn");
  }
}

TEST(GradCheck, SRnnCopy) {
  SeededRng rng(2, 0);
  for (Nonlinearity nl : {Nonlinearity::tanh, Nonlinearity::relu}) {
    const Model m = random_model({Architecture::srnn, 5, 8, 5, nl}, rng, 0.4);
    expect_passes(m, copy_batch(CopyConfig{3, 2, 16}, 3, rng), "srnn");
  }
}

TEST(GradCheck, LstmCopy) {
  SeededRng rng(3, 0);
  const Model m = random_model({Architecture::lstm, 5, 8, 5}, rng, 0.4);
  expect_passes(m, copy_batch(CopyConfig{3, 2, 16}, 3, rng), "lstm");
}

TEST(GradCheck, LstmPeepholeAdding) {
  SeededRng rng(4, 0);
  ModelShape shape{Architecture::lstm, 2, 6, 1};
  shape.peephole = true;
  const Model m = random_model(shape, rng, 0.4);
  expect_passes(m, adding_batch(15, 4, rng), "lstm peephole");
}

TEST(GradCheck, PooledCopyAndAdding) {
  SeededRng rng(5, 0);
  const Model a = random_model({Architecture::pooled, 5, 8, 5, Nonlinearity::identity}, rng, 0.3);
  expect_passes(a, copy_batch(CopyConfig{3, 2, 16}, 3, rng), "pooled copy");
  const Model b = random_model({Architecture::pooled, 2, 8, 1, Nonlinearity::relu}, rng, 0.4);
  expect_passes(b, adding_batch(20, 4, rng), "pooled adding");
}

TEST(GradCheck, AllArchitecturesOnAdding) {
  SeededRng rng(6, 0);
  for (Architecture a : {Architecture::srnn, Architecture::ltrnn, Architecture::lstm}) {
    const Model m = random_model({a, 2, 8, 1, Nonlinearity::tanh}, rng, 0.4);
    expect_passes(m, adding_batch(20, 4, rng), "adding");
  }
}

TEST(GradCheck, CorruptedGradientFails) {
  SeededRng rng(7, 0);
  const Model m = random_model({Architecture::ltrnn, 5, 8, 5, Nonlinearity::tanh}, rng, 0.3);
  const Batch batch = copy_batch(CopyConfig{3, 2, 16}, 2, rng);
  Gradients g = backward(m, forward(m, batch.inputs), batch);
  Matrix& gv = std::get<LtRnnParams>(g).V;
  Eigen::Index r = 0, c = 0;
  gv.cwiseAbs().maxCoeff(&r, &c);
  gv(r, c) = -gv(r, c);
  const GradCheckReport report = grad_check(m, batch, 1e-4, 1e-5, g);
  EXPECT_FALSE(report.passed());
  EXPECT_GT(report.tensors[1].max_rel_error, 1.0);
}

TEST(GradCheck, ZeroPoolIsSkipped) {
  // Hidden units 0 and 1 never receive input, so the first pool stays at the
  // zero vector, where the subgradient is taken as 0.
  SeededRng rng(8, 0);
  PooledLtRnnParams p = std::get<PooledLtRnnParams>(
      random_model({Architecture::pooled, 2, 6, 1, Nonlinearity::identity}, rng, 0.4));
  p.U.topRows(2).setZero();
  p.b.topRows(2).setZero();
  p.V.topRows(2).setZero();
  p.V.leftCols(2).setZero();
  const Model m = p;
  const Batch batch = adding_batch(12, 3, rng);
  const ForwardTrace trace = forward(m, batch.inputs);
  for (const auto& s : trace.steps) EXPECT_EQ(s.pooled.row(0).norm(), 0.0);
  const GradCheckReport report = grad_check(m, batch, 1e-4);
  EXPECT_TRUE(report.passed()) << report.max_rel_error();
  std::size_t skipped = 0;
  for (const auto& t : report.tensors) skipped += t.skipped;
  EXPECT_GT(skipped, 0u);
}

TEST(Backward, ExactAdderHasZeroGradient) {
  SeededRng rng(9, 0);
  const Model m = LtRnnParams{Matrix::Ones(1, 2), Matrix::Ones(1, 1), Matrix::Constant(1, 1, -1.0),
                              Matrix::Ones(1, 1), Nonlinearity::relu};
  const Batch batch = adding_batch(100, 50, rng);
  const Gradients g = backward(m, forward(m, batch.inputs), batch, GradNormalization::hidden);
  for (const auto& t : tensors(g)) EXPECT_LT(t.value->cwiseAbs().maxCoeff(), 1e-12) << t.name;
}

TEST(Backward, HiddenNormalizationScalesHiddenPathByOneOverT) {
  SeededRng rng(10, 0);
  const int T = 37;
  for (Architecture a : {Architecture::ltrnn, Architecture::srnn, Architecture::lstm, Architecture::pooled}) {
    const Model m = random_model({a, 2, 8, 1, Nonlinearity::tanh}, rng, 0.3);
    const Batch batch = adding_batch(T, 5, rng);
    const ForwardTrace trace = forward(m, batch.inputs);
    const Gradients plain = backward(m, trace, batch, GradNormalization::none);
    const Gradients scaled = backward(m, trace, batch, GradNormalization::hidden);
    const auto p = tensors(plain);
    const auto s = tensors(scaled);
    for (std::size_t k = 0; k < p.size(); ++k) {
      const bool decoder = p[k].name == "W" || p[k].name == "W_I" || p[k].name == "W_P";
      const double factor = decoder ? 1.0 : 1.0 / T;
      EXPECT_LT((*s[k].value - factor * *p[k].value).cwiseAbs().maxCoeff(),
                1e-14 * (1.0 + p[k].value->cwiseAbs().maxCoeff()))
          << p[k].name;
    }
    const Gradients whole = backward(m, trace, batch, GradNormalization::parameters);
    const auto w = tensors(whole);
    for (std::size_t k = 0; k < p.size(); ++k)
      EXPECT_TRUE(w[k].value->isApprox(*p[k].value / T, 1e-14) || p[k].value->norm() == 0.0);
  }
}

TEST(Backward, RejectsMismatchedTrace) {
  SeededRng rng(11, 0);
  const Model a = random_model({Architecture::ltrnn, 2, 4, 1}, rng, 0.3);
  const Model b = random_model({Architecture::srnn, 2, 4, 1}, rng, 0.3);
  const Model c = random_model({Architecture::ltrnn, 2, 6, 1}, rng, 0.3);
  const Batch batch = adding_batch(5, 2, rng);
  EXPECT_THROW(backward(a, forward(b, batch.inputs), batch), std::invalid_argument);
  EXPECT_THROW(backward(a, forward(c, batch.inputs), batch), std::invalid_argument);
  EXPECT_THROW(backward(a, forward(a, adding_batch(6, 2, rng).inputs), batch), std::invalid_argument);
}

TEST(Backward, ClippingActsAsConstantScale) {
  // With clipping active the gradient equals that of a model whose hidden
  // update is multiplied by the recorded (frozen) factors.
  SeededRng rng(12, 0);
  LtRnnParams p = std::get<LtRnnParams>(random_model({Architecture::ltrnn, 2, 4, 1}, rng, 0.5));
  p.V = 1.3 * Matrix::Identity(4, 4);
  const Batch batch = adding_batch(10, 1, rng);
  const ForwardTrace trace = ltrnn_forward(p, batch.inputs, 0.8);
  bool active = false;
  for (const auto& s : trace.steps) active = active || s.clip(0) < 1.0;
  ASSERT_TRUE(active);
  const Gradients g = backward(Model{p}, trace, batch);
  const auto frozen_loss = [&](const LtRnnParams& q) {
    Matrix h = Matrix::Zero(4, 1);
    for (int t = 0; t < 10; ++t) {
      h = (q.U * batch.inputs[t] + q.b + q.V * h) * trace.steps[t].clip(0);
    }
    const double y = (q.W * h)(0, 0);
    return (y - std::get<AddingTargets>(batch.targets).values(0)) *
           (y - std::get<AddingTargets>(batch.targets).values(0));
  };
  const double eps = 1e-6;
  for (Eigen::Index e = 0; e < 16; ++e) {
    LtRnnParams a = p, b = p;
    a.V.data()[e] += eps;
    b.V.data()[e] -= eps;
    const double fd = (frozen_loss(a) - frozen_loss(b)) / (2 * eps);
    EXPECT_NEAR(std::get<LtRnnParams>(g).V.data()[e], fd, 1e-6 * (1.0 + std::abs(fd)));
  }
}

TEST(RmsProp, ScalarHandComputation) {
  Model m = LtRnnParams{Matrix::Zero(1, 1), Matrix::Zero(1, 1), Matrix::Zero(1, 1), Matrix::Zero(1, 1)};
  const Gradients g = LtRnnParams{Matrix::Ones(1, 1), Matrix::Ones(1, 1), Matrix::Ones(1, 1), Matrix::Ones(1, 1)};
  RmsPropState st = RmsPropState::for_model(m, 0.1, 0.9);
  rmsprop_step(st, m, g);
  for (const auto& t : tensors(st.cache)) EXPECT_NEAR((*t.value)(0, 0), 0.1, 1e-15);
  for (const auto& t : tensors(m)) EXPECT_NEAR((*t.value)(0, 0), -0.1 / (std::sqrt(0.1) + 1e-8), 1e-15);
  EXPECT_NEAR(std::get<LtRnnParams>(m).V(0, 0), -0.31623, 1e-5);
  EXPECT_EQ(st.step, 1u);
}

TEST(RmsProp, ZeroGradientDecaysCache) {
  SeededRng rng(13, 0);
  Model m = random_model({Architecture::lstm, 2, 3, 1}, rng, 1.0);
  const Model before = m;
  RmsPropState st = RmsPropState::for_model(m, 0.01);
  for (auto& t : tensors(st.cache)) *t.value = rng.uniform_matrix(t.value->rows(), t.value->cols(), 0.0, 1.0);
  const Model cache_before = st.cache;
  rmsprop_step(st, m, zeros_like(m));
  const auto a = tensors(std::as_const(m)), b = tensors(before);
  const auto c = tensors(std::as_const(st.cache)), d = tensors(cache_before);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_TRUE(*a[k].value == *b[k].value);
    EXPECT_LT((*c[k].value - 0.9 * *d[k].value).cwiseAbs().maxCoeff(), 1e-16);
  }
}

TEST(RmsProp, ZeroLearningRateAndDeterminism) {
  SeededRng rng(14, 0);
  const Model m0 = random_model({Architecture::pooled, 2, 4, 1}, rng, 1.0);
  const Gradients g = random_model({Architecture::pooled, 2, 4, 1}, rng, 1.0);
  Model m = m0;
  RmsPropState st = RmsPropState::for_model(m, 0.0);
  rmsprop_step(st, m, g);
  for (std::size_t k = 0; k < tensors(m).size(); ++k)
    EXPECT_TRUE(*tensors(m)[k].value == *tensors(m0)[k].value);

  Model x = m0, y = m0;
  RmsPropState sx = RmsPropState::for_model(x, 1e-3), sy = RmsPropState::for_model(y, 1e-3);
  for (int i = 0; i < 3; ++i) {
    rmsprop_step(sx, x, g);
    rmsprop_step(sy, y, g);
  }
  for (std::size_t k = 0; k < tensors(x).size(); ++k)
    EXPECT_TRUE(*tensors(x)[k].value == *tensors(y)[k].value);
}

TEST(RmsProp, NonFiniteUpdateNamesParameterAndLeavesParamsIntact) {
  SeededRng rng(15, 0);
  Model m = random_model({Architecture::ltrnn, 2, 3, 1}, rng, 1.0);
  const Model before = m;
  Gradients g = zeros_like(m);
  std::get<LtRnnParams>(g).b(1, 0) = std::numeric_limits<double>::infinity();
  RmsPropState st = RmsPropState::for_model(m, 1e-3);
  try {
    rmsprop_step(st, m, g);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter b"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(std::get<LtRnnParams>(m).b == std::get<LtRnnParams>(before).b);
  EXPECT_THROW(RmsPropState::for_model(m, 1e-3, 1.0), std::invalid_argument);
}

TEST(InitTransition, Identity) {
  SeededRng rng(16, 0);
  EXPECT_TRUE(init_transition(TransitionInit::identity, 128, rng) == Matrix::Identity(128, 128));
}

TEST(InitTransition, OrthogonalIsOrthogonal) {
  SeededRng rng(17, 0);
  const Matrix v = init_transition(TransitionInit::orthogonal, 80, rng);
  EXPECT_LT(orthogonality_error(v), 1e-10);
}

TEST(InitTransition, GaussianVariance) {
  SeededRng rng(18, 0);
  const Matrix g = init_transition(TransitionInit::gaussian, 256, rng);
  const double var = g.array().square().mean();
  // Sample variance of 65536 draws of N(0, 1/16): standard error ≈ 3.5e-4.
  EXPECT_NEAR(var, 1.0 / 16.0, 5 * 3.5e-4);
}

TEST(InitTransition, OrthogonalEigenphasesAreUniform) {
  SeededRng rng(19, 0);
  std::vector<double> phases;
  for (int draw = 0; draw < 20; ++draw) {
    const Matrix v = init_transition(TransitionInit::orthogonal, 128, rng);
    const Eigen::EigenSolver<Matrix> es(v, false);
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
      EXPECT_NEAR(std::abs(es.eigenvalues()(i)), 1.0, 1e-8);
      phases.push_back(std::arg(es.eigenvalues()(i)));
    }
  }
  EXPECT_GT(ornn::testing::ks_uniform_pvalue(phases, -std::numbers::pi, std::numbers::pi), 1e-3);
}

TEST(OrthoPenalty, ZeroAtOrthogonalMatrices) {
  SeededRng rng(20, 0);
  const Matrix o = nearest_orthogonal(rng.gaussian(12, 12, 1.0));
  SeededRng copy = rng;
  const Matrix pts = stack_columns(sample_unit_sphere(12, 50, copy), 12);
  EXPECT_LT(ortho_penalty(o, pts), 1e-25);
  EXPECT_LT((ortho_penalty_step(o, 50, 0.1, rng) - o).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(OrthoPenalty, TwiceIdentityGivesNine) {
  SeededRng rng(21, 0);
  const Matrix pts = stack_columns(sample_unit_sphere(4, 17, rng), 4);
  EXPECT_NEAR(ortho_penalty(2.0 * Matrix::Identity(4, 4), pts), 9.0, 1e-13);
}

TEST(OrthoPenalty, GradientMatchesFiniteDifferences) {
  SeededRng rng(22, 0);
  const Matrix v = rng.gaussian(5, 5, 0.5);
  const Matrix pts = stack_columns(sample_unit_sphere(5, 7, rng), 5);
  const Matrix g = ortho_penalty_gradient(v, pts);
  const double h = 1e-6;
  for (Eigen::Index e = 0; e < v.size(); ++e) {
    Matrix a = v, b = v;
    a.data()[e] += h;
    b.data()[e] -= h;
    EXPECT_NEAR(g.data()[e], (ortho_penalty(a, pts) - ortho_penalty(b, pts)) / (2 * h), 1e-8);
  }
}

TEST(OrthoPenalty, ConvergesToOrthogonalManifold) {
  SeededRng rng(23, 0);
  Matrix v = 1.5 * nearest_orthogonal(rng.gaussian(8, 8, 1.0));
  for (int i = 0; i < 500; ++i) v = ortho_penalty_step(v, 50, 1e-2, rng);
  EXPECT_NEAR(spectral_norm(v), 1.0, 0.05);
}

TEST(OrthoPenalty, SmallStepsNeverIncreaseTheLoss) {
  SeededRng rng(24, 0);
  int increases = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto d = static_cast<Eigen::Index>(rng.uniform_int(2, 128));
    const double scale = 0.5 + rng.uniform();
    const Matrix v = scale * nearest_orthogonal(rng.gaussian(d, d, 1.0)) + rng.gaussian(d, d, 0.1 / std::sqrt(d));
    const double step = 1e-3 * rng.uniform();
    SeededRng replay = rng;
    const Matrix next = ortho_penalty_step(v, 50, step, rng);
    const Matrix pts = stack_columns(sample_unit_sphere(static_cast<std::size_t>(d), 50, replay), d);
    if (ortho_penalty(next, pts) > ortho_penalty(v, pts)) ++increases;
  }
  EXPECT_EQ(increases, 0);
}
