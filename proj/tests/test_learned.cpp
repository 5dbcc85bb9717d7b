#include "spct/learned_pd.hpp"
#include "test_support.hpp"

#include <catch_amalgamated.hpp>

#include <unistd.h>

using namespace spct;
using namespace spct::ad;
using Catch::Approx;

namespace {

struct Fixture {
  SpectralSystem sys;
  ScanGeometry geo;
  Projector P;
  PdProblem prob;

  Fixture(std::vector<std::string> mats, std::size_t nBins, std::size_t n = 8, std::size_t nAngles = 6)
      : sys(test::small_system(std::move(mats), nBins, 8, 1e6)),
        geo(ScanGeometry::parallel(n, n, 1.0, nAngles, n + 4, 1.0)),
        P(geo),
        prob(sys, P) {}

  // Noise-free sample from a random fraction image.
  Sample sample(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    const std::size_t N = sys.n_materials();
    MaterialImage q(N, geo.nPixY, geo.nPixX);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < q.plane(); ++i) {
      double s = 0.0;
      std::vector<double> w(N);
      for (auto& v : w) s += (v = u(rng));
      for (std::size_t k = 0; k < N; ++k) q.data[k * q.plane() + i] = w[k] / s;
    }
    Sample smp{q, P.project(q), {}};
    smp.y = forward_counts(sys, smp.beta);
    return smp;
  }
};

LearnedConfig small_config(std::size_t nIter = 2, std::size_t filters = 32) {
  LearnedConfig c;
  c.unmix.nIter = c.reco.nIter = nIter;
  c.unmix.filters = c.reco.filters = filters;
  return c;
}

template <class Build>
double op_grad_error(const std::vector<Tensor<double>>& inputs, Build build, double h = 1e-6) {
  Graph<double> g;
  std::vector<int> ids;
  for (const auto& t : inputs) ids.push_back(g.input(t, true));
  g.backward(build(g, ids));
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = g.grad(ids[k]);
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      auto eval = [&](double delta) {
        auto in = inputs;
        in[k].data[i] += delta;
        Graph<double> g2;
        std::vector<int> ids2;
        for (const auto& t : in) ids2.push_back(g2.input(t, true));
        return g2.value(build(g2, ids2)).data[0];
      };
      const double fd = (eval(h) - eval(-h)) / (2.0 * h);
      worst = std::max(worst, std::abs(fd - analytic[i]) / std::max(1.0, std::abs(fd)));
    }
  }
  return worst;
}

Tensor<double> rand_tensor(std::mt19937_64& rng, Shape s, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<double> t(std::move(s));
  for (auto& v : t.data) v = d(rng);
  return t;
}

template <class T>
void zero_weights(ParamSet<T>& ps) {
  for (auto& p : ps.items) std::fill(p.value.data.begin(), p.value.data.end(), T(0));
}

} // namespace

TEST_CASE("embedded physics ops have consistent gradients", "[ops]") {
  Fixture f({"bone", "tissue"}, 2, 4, 3);
  const auto& p = f.prob;
  std::mt19937_64 rng(1);
  const std::size_t R = f.geo.n_rays();
  Shape su{1, 1, 2, f.geo.n_angles(), f.geo.nDet}, sz{1, 1, 2, f.geo.n_angles(), f.geo.nDet};
  SECTION("spectral forward") {
    auto target = rand_tensor(rng, sz, 0.0, 1.0);
    CHECK(op_grad_error({rand_tensor(rng, su, 0.0, 0.2)}, [&](Graph<double>& g, const std::vector<int>& i) {
            return mse(g, ops::spectral_forward(g, i[0], *p.sys, p.binScale, p.betaScale), target);
          }) < 1e-6);
  }
  SECTION("spectral adjoint derivative in both arguments") {
    auto target = rand_tensor(rng, su, -1.0, 1.0);
    CHECK(op_grad_error({rand_tensor(rng, su, 0.0, 0.2), rand_tensor(rng, sz, -1.0, 1.0)},
                        [&](Graph<double>& g, const std::vector<int>& i) {
                          return mse(g, ops::spectral_adjoint(g, i[0], i[1], *p.sys, p.binScale, p.betaScale), target);
                        }) < 1e-6);
  }
  SECTION("adjoint op is the transpose of the forward derivative") {
    auto u = rand_tensor(rng, su, 0.0, 0.2), v = rand_tensor(rng, su, -1.0, 1.0), z = rand_tensor(rng, sz, -1.0, 1.0);
    auto fwd = [&](double t) {
      auto w = u;
      for (std::size_t i = 0; i < w.numel(); ++i) w.data[i] += t * v.data[i];
      Graph<double> g;
      return g.value(ops::spectral_forward(g, g.input(w), *p.sys, p.binScale, p.betaScale)).data;
    };
    const double h = 1e-6;
    auto a = fwd(h), b = fwd(-h);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) lhs += (a[i] - b[i]) / (2 * h) * z.data[i];
    Graph<double> g;
    const auto& adj = g.value(ops::spectral_adjoint(g, g.input(u), g.input(z), *p.sys, p.binScale, p.betaScale)).data;
    for (std::size_t i = 0; i < adj.size(); ++i) rhs += adj[i] * v.data[i];
    CHECK(test::rel_err(lhs, rhs) < 1e-7);
  }
  SECTION("scaled forward matches the physical model") {
    auto u = rand_tensor(rng, su, 0.0, 0.2);
    SinogramStack beta(2, f.geo.n_angles(), f.geo.nDet);
    for (std::size_t i = 0; i < beta.size(); ++i) beta.data[i] = u.data[i] * p.betaScale;
    const auto y = forward_counts(*p.sys, beta);
    Graph<double> g;
    const auto& out = g.value(ops::spectral_forward(g, g.input(u), *p.sys, p.binScale, p.betaScale)).data;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t r = 0; r < R; ++r)
        CHECK(out[b * R + r] == Approx(y.data[b * R + r] / p.binRef[b]).epsilon(1e-12));
  }
  SECTION("projection pair") {
    Shape si{2, 1, 1, f.geo.nPixY, f.geo.nPixX};
    Shape ss{2, 1, 1, f.geo.n_angles(), f.geo.nDet};
    auto t1 = rand_tensor(rng, ss, -1, 1), t2 = rand_tensor(rng, si, -1, 1);
    CHECK(op_grad_error({rand_tensor(rng, si, 0, 1)}, [&](Graph<double>& g, const std::vector<int>& i) {
            return mse(g, ops::project(g, i[0], f.P, 0.5), t1);
          }) < 1e-6);
    CHECK(op_grad_error({rand_tensor(rng, ss, 0, 1)}, [&](Graph<double>& g, const std::vector<int>& i) {
            return mse(g, ops::backproject(g, i[0], f.P, 0.5), t2);
          }) < 1e-6);
  }
}

TEST_CASE("block parameter shapes follow the channel bookkeeping", "[pd]") {
  Fixture f({"bone", "tissue", "air"}, 4);
  auto c = small_config(2, 16);
  auto m = init_model<float>(c, f.prob, 1);
  // 2-D unmixing folds depth into channels
  CHECK(m.unmix.at("unmix.0.dual.conv1.w").value.shape == Shape{16, 7 * 4, 1, 3, 3});
  CHECK(m.unmix.at("unmix.0.dual.conv3.w").value.shape == Shape{5 * 4, 16, 1, 3, 3});
  CHECK(m.unmix.at("unmix.1.primal.conv1.w").value.shape == Shape{16, 6 * 3, 1, 3, 3});
  CHECK(m.unmix.at("unmix.1.primal.conv3.w").value.shape == Shape{5 * 3, 16, 1, 3, 3});
  CHECK(m.unmix.at("unmix.0.primal.prelu2").value.shape == Shape{16});
  // imaging network treats materials as batch entries
  CHECK(m.reco.at("reco.0.dual.conv1.w").value.shape == Shape{16, 7, 1, 3, 3});
  CHECK(m.reco.at("reco.1.primal.conv3.w").value.shape == Shape{5, 16, 1, 3, 3});
  CHECK(m.unmix.items.size() == 2 * 2 * 8);

  c.unmix.convDims = 3;
  auto m3 = init_model<float>(c, f.prob, 1);
  CHECK(m3.unmix.at("unmix.0.dual.conv1.w").value.shape == Shape{16, 7, 3, 3, 3});
  CHECK(m3.unmix.at("unmix.0.primal.conv3.w").value.shape == Shape{5, 16, 3, 3, 3});
  auto y = f.sample(1).y;
  CHECK(t_unmix(m3, f.prob, y).shape == std::array<std::size_t, 3>{3, f.geo.n_angles(), f.geo.nDet});

  c.memoryBudgetBytes = 1e3;
  CHECK_THROWS_AS(init_model<float>(c, f.prob, 1), ConfigError);
  CHECK(unmix_memory_estimate(c, f.prob) > 1e3);
}

TEST_CASE("invalid network configurations are rejected", "[pd]") {
  LearnedConfig c;
  c.unmix.nPrimal = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.reco.convDims = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.unmix.nIter = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(learned_config_from_json({{"unmix", {{"convDims", 4}}}}), ConfigError);
}

TEST_CASE("zero weights give a zero reconstruction", "[pd]") {
  Fixture f({"bone", "tissue"}, 2);
  auto m = init_model<float>(small_config(), f.prob, 3);
  zero_weights(m.unmix);
  zero_weights(m.reco);
  auto y = f.sample(2).y;
  for (double v : t_unmix(m, f.prob, y).data) CHECK(v == 0.0);
  for (double v : learned_reconstruct(m, f.prob, y).data) CHECK(v == 0.0);
}

TEST_CASE("unrolled iterates do not depend on later iterations", "[pd]") {
  Fixture f({"bone", "tissue"}, 2);
  auto m = init_model<double>(small_config(3, 8), f.prob, 4);
  auto y = f.sample(3).y;
  Graph<double> g3;
  std::vector<int> it;
  unmix_forward(g3, m, f.prob, g3.input(unmix_data<double>(f.prob, y)), &it);
  REQUIRE(it.size() == 3);
  auto c2 = m.config.unmix;
  c2.nIter = 2;
  Graph<double> g2;
  const auto op = unmix_operator<double>(f.prob);
  int u2 = learned_pd_forward(g2, op, g2.input(unmix_data<double>(f.prob, y)), c2, m.unmix, "unmix");
  CHECK(g2.value(u2).data == g3.value(it[1]).data);
}

TEST_CASE("initialisation and inference are deterministic", "[pd]") {
  Fixture f({"bone", "tissue"}, 2);
  auto a = init_model<float>(small_config(), f.prob, 7), b = init_model<float>(small_config(), f.prob, 7);
  auto c = init_model<float>(small_config(), f.prob, 8);
  CHECK(a.unmix.items[0].value.data == b.unmix.items[0].value.data);
  CHECK(a.unmix.items[0].value.data != c.unmix.items[0].value.data);
  CHECK(a.unmix.items[0].value.data != a.reco.items[0].value.data);
  auto y = f.sample(4).y;
  CHECK(learned_reconstruct(a, f.prob, y).data == learned_reconstruct(b, f.prob, y).data);
}

TEST_CASE("connector is a reshape to one batch entry per material", "[pd]") {
  std::mt19937_64 rng(5);
  auto x = rand_tensor(rng, {1, 1, 3, 4, 5}, -1, 1);
  Graph<double> g;
  int c = connect_unmix_to_reco(g, g.input(x), false);
  CHECK(g.shape(c) == Shape{3, 1, 1, 4, 5});
  CHECK(g.value(c).data == x.data);
  CHECK(connect_unmix_to_reco(g, g.input(x), true) >= 0);
  auto target = rand_tensor(rng, {3, 1, 1, 4, 5}, -1, 1);
  CHECK(op_grad_error({x}, [&](Graph<double>& G, const std::vector<int>& i) {
          return mse(G, connect_unmix_to_reco(G, i[0], false), target);
        }) < 1e-9);
  CHECK_THROWS_AS(connect_unmix_to_reco(g, g.input(Tensor<double>({2, 1, 3, 4, 5})), false), std::invalid_argument);
}

TEST_CASE("t_reco on the unmixing output matches the composed pipeline", "[pd]") {
  Fixture f({"bone", "tissue"}, 2);
  auto m = init_model<double>(small_config(), f.prob, 9);
  auto y = f.sample(5).y;
  auto q1 = learned_reconstruct(m, f.prob, y);
  auto q2 = t_reco(m, f.prob, t_unmix(m, f.prob, y));
  for (std::size_t i = 0; i < q1.size(); ++i) CHECK(q1.data[i] == Approx(q2.data[i]).margin(1e-12));
}

TEST_CASE("end-to-end gradient through both networks matches finite differences", "[grad]") {
  Fixture f({"bone", "tissue"}, 2);
  auto mf = init_model<float>(small_config(2, 8), f.prob, 10);
  // perturb the PReLU slopes and biases so every parameter kind is exercised off its init
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> jitter(-0.05, 0.05);
  for (auto* ps : {&mf.unmix, &mf.reco})
    for (auto& p : ps->items)
      if (p.name.find(".b") != std::string::npos || p.name.find("prelu") != std::string::npos)
        for (auto& v : p.value.data) v += static_cast<float>(jitter(rng));
  auto md = mf.cast<double>();
  const auto smp = f.sample(6);
  const auto target = image_target<double>(f.prob, smp.q, false);
  const auto targetF = image_target<float>(f.prob, smp.q, false);

  auto loss_d = [&](LearnedModel<double>& m) {
    Graph<double> g;
    return g.value(ad::mse(g, pipeline_forward(g, m, f.prob, smp.y), target)).data[0];
  };
  {
    Graph<float> g;
    g.backward(ad::mse(g, pipeline_forward(g, mf, f.prob, smp.y), targetF));
  }
  {
    Graph<double> g;
    g.backward(ad::mse(g, pipeline_forward(g, md, f.prob, smp.y), target));
  }
  // gradient scale for the relative floor
  double rms = 0.0;
  std::size_t n = 0;
  std::vector<std::pair<ParamSet<double>*, std::size_t>> sets{{&md.unmix, 0}, {&md.reco, 1}};
  for (auto [ps, k] : sets)
    for (const auto& p : ps->items)
      for (double v : p.grad) rms += v * v, ++n;
  rms = std::sqrt(rms / static_cast<double>(n));
  REQUIRE(rms > 0.0);

  const double L0 = loss_d(md);
  std::mt19937_64 pick(12);
  int checked = 0;
  for (int t = 0; t < 50; ++t) {
    auto& ps = t % 2 ? md.reco : md.unmix;
    auto& psf = t % 2 ? mf.reco : mf.unmix;
    const std::size_t pi = std::uniform_int_distribution<std::size_t>(0, ps.items.size() - 1)(pick);
    auto& p = ps.items[pi];
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.value.numel() - 1)(pick);
    const double orig = p.value.data[i];
    // Richardson-extrapolated central difference
    auto cd = [&](double h) {
      p.value.data[i] = orig + h;
      const double a = loss_d(md);
      p.value.data[i] = orig - h;
      const double b = loss_d(md);
      p.value.data[i] = orig;
      return (a - b) / (2 * h);
    };
    const double h = 1e-6;
    const double fd = (4.0 * cd(h / 2) - cd(h)) / 3.0;
    const double gd = p.grad[i], gf = static_cast<double>(psf.items[pi].grad[i]);
    INFO(p.name << "[" << i << "] fd " << fd << " double " << gd << " float " << gf << " rms " << rms);
    // rounding noise of the difference quotient itself
    const double noise = 10.0 * std::numeric_limits<double>::epsilon() * std::abs(L0) / h;
    CHECK(std::abs(gd - fd) <= 1e-6 * std::max(std::abs(fd), 1e-2 * rms) + noise);
    CHECK(std::abs(gf - fd) <= 1e-3 * std::max(std::abs(fd), 1e-2 * rms) + noise);
    ++checked;
  }
  CHECK(checked == 50);
}

TEST_CASE("training reduces the loss and is reproducible", "[train]") {
  Fixture f({"bone", "tissue"}, 2, 12);
  std::vector<Sample> trainSet, val;
  for (int i = 0; i < 4; ++i) trainSet.push_back(f.sample(100 + i));
  val.push_back(f.sample(200));
  auto lc = small_config(2, 8);
  TrainConfig tc;
  tc.steps = 40;
  tc.valEvery = 20;
  tc.seed = 5;
  for (auto method : {TrainMethod::IL, TrainMethod::SL}) {
    tc.method = method;
    auto r1 = train<float>(trainSet, val, f.prob, lc, tc);
    auto r2 = train<float>(trainSet, val, f.prob, lc, tc);
    const std::string stage = method == TrainMethod::IL ? "il" : "sl-unmix";
    CHECK(r1.history.mean_loss(stage, 30, 40) < r1.history.mean_loss(stage, 0, 10));
    REQUIRE(r1.history.rows.size() == r2.history.rows.size());
    for (std::size_t i = 0; i < r1.history.rows.size(); ++i) CHECK(r1.history.rows[i].loss == r2.history.rows[i].loss);
    CHECK(r1.final.reco.items[0].value.data == r2.final.reco.items[0].value.data);
    CHECK(r1.bestValSsim > -1.0);
    if (method == TrainMethod::SL) {
      CHECK(r1.history.rows.size() == 80);
      CHECK(r1.history.mean_loss("sl-reco", 30, 40) < r1.history.mean_loss("sl-reco", 0, 10));
    }
  }
}

TEST_CASE("non-finite data aborts training with a diagnostic", "[train]") {
  Fixture f({"bone", "tissue"}, 2);
  auto s = f.sample(1);
  s.y.data[3] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.steps = 2;
  CHECK_THROWS_AS(train_il<float>({s}, {}, f.prob, small_config(1, 4), tc), NumericalError);
}

TEST_CASE("model checkpoints round trip", "[checkpoint]") {
  Fixture f({"bone", "tissue"}, 2);
  auto m = init_model<float>(small_config(2, 8), f.prob, 13);
  const auto dir = std::filesystem::temp_directory_path() / ("spct_model_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  save_model(dir / "joint", m, f.prob);
  save_model(dir / "split" / "unmix", m, f.prob, json::object(), true, false);
  save_model(dir / "split" / "reco", m, f.prob, json::object(), false, true);
  auto y = f.sample(7).y;
  const auto ref = learned_reconstruct(m, f.prob, y);
  for (auto sub : {"joint", "split"}) {
    auto back = load_model<float>(dir / sub, f.prob);
    CHECK(learned_reconstruct(back, f.prob, y).data == ref.data);
  }
  CHECK_THROWS_AS(load_model<float>(dir / "nothing", f.prob), IoError);
  Fixture other({"bone", "tissue"}, 3);
  CHECK_THROWS_AS(load_model<float>(dir / "joint", other.prob), ConfigError);
  std::filesystem::remove_all(dir);
}
