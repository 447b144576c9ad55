#include <catch2/catch_amalgamated.hpp>

#include "cbapm/encoder.hpp"
#include "test_support.hpp"

using namespace cbapm;
using Catch::Approx;
using test_support::random_matrix;

namespace {

MacroMatrix make_macro(const Matrix& values, int first_month = 0) {
  MacroMatrix m;
  m.first_month = first_month;
  m.values = values;
  for (Eigen::Index j = 0; j < values.cols(); ++j) m.names.push_back("m" + std::to_string(j));
  return m;
}

// Low-dimensional affine structure embedded in a wider space.
MacroMatrix subspace_macro(int T, int D, int rank, std::uint64_t seed) {
  Rng rng(seed);
  Matrix loadings = random_matrix(D, rank, rng, 0.5);
  Matrix factors = random_matrix(rank, T, rng, 0.8);
  return make_macro((loadings * factors).transpose());
}

AeConfig small_config() {
  AeConfig cfg;
  cfg.hidden = {16, 8};
  cfg.latent_dim = 3;
  cfg.dropout_p = 0.0;
  cfg.lr = 2e-3;
  cfg.batch_size = 16;
  cfg.max_epochs = 2500;
  cfg.early_stop_patience = 400;
  return cfg;
}

} // namespace

TEST_CASE("autoencoder learns an exact low-rank subspace") {
  MacroMatrix raw = subspace_macro(90, 10, 3, 17);
  MacroMatrix macro = minmax_normalize_macro(raw, {0, 89}).macro;
  AeTrainResult res = train_autoencoder(macro, {0, 89}, small_config(), 7);

  Matrix recon = res.model.reconstruct_batch(macro.values.transpose());
  double mse = (macro.values.transpose() - recon).squaredNorm() / double(macro.values.rows());
  REQUIRE(mse < 1e-3);

  // best-checkpoint validation sequence is non-increasing
  for (std::size_t i = 1; i < res.best_val_history.size(); ++i)
    REQUIRE(res.best_val_history[i] <= res.best_val_history[i - 1]);
}

TEST_CASE("autoencoder represents a constant series with biases") {
  Matrix values = Matrix::Constant(40, 6, 0.3);
  MacroMatrix macro = make_macro(values);
  AeConfig cfg = small_config();
  cfg.latent_dim = 2;
  cfg.max_epochs = 1500;
  AeTrainResult res = train_autoencoder(macro, {0, 39}, cfg, 3);

  Matrix recon = res.model.reconstruct_batch(values.transpose());
  double mse = (values.transpose() - recon).squaredNorm() / 40.0;
  REQUIRE(mse < 1e-5);
  // identical inputs map to identical latents
  Matrix z = res.model.encode_batch(values.transpose());
  for (Eigen::Index c = 1; c < z.cols(); ++c) REQUIRE(z.col(c) == z.col(0));
}

TEST_CASE("autoencoder training is deterministic in the seed") {
  MacroMatrix macro = subspace_macro(30, 8, 2, 5);
  AeConfig cfg = small_config();
  cfg.max_epochs = 40;
  AeTrainResult a = train_autoencoder(macro, {0, 29}, cfg, 11);
  AeTrainResult b = train_autoencoder(macro, {0, 29}, cfg, 11);
  for (int l = 0; l < a.model.encoder.n_layers(); ++l) {
    REQUIRE(a.model.encoder.layers[l].W == b.model.encoder.layers[l].W);
    REQUIRE(a.model.decoder.layers[l].W == b.model.decoder.layers[l].W);
  }
  REQUIRE_THROWS_AS(train_autoencoder(macro, {0, 0}, cfg, 1), std::invalid_argument);
}

TEST_CASE("encode contract") {
  MacroMatrix macro = subspace_macro(30, 8, 2, 9);
  AeConfig cfg = small_config();
  cfg.latent_dim = 2;
  cfg.max_epochs = 30;
  AutoencoderModel model = train_autoencoder(macro, {0, 29}, cfg, 2).model;

  Vector x = macro.values.row(4).transpose();
  // encode then decode equals reconstruct
  Vector z = model.encode(x);
  Vector via_parts = model.decoder.forward(Matrix(z), false).output.col(0);
  Vector direct = model.reconstruct_batch(Matrix(x)).col(0);
  REQUIRE(via_parts == direct);

  // pure function
  REQUIRE(model.encode(x) == model.encode(x));

  // latent is invariant to decoder perturbation
  AutoencoderModel mutated = model;
  mutated.decoder.layers[0].W.array() += 3.0;
  REQUIRE(mutated.encode(x) == model.encode(x));

  Vector wrong = Vector::Zero(5);
  REQUIRE_THROWS_AS(model.encode(wrong), std::invalid_argument);
}

TEST_CASE("no look-ahead: months after the fit range never matter") {
  MacroMatrix macro = subspace_macro(60, 8, 2, 21);
  AeConfig cfg = small_config();
  cfg.latent_dim = 2;
  cfg.max_epochs = 25;
  CompressorChoice choice{CompressorChoice::Kind::autoencoder, 2};

  TrainedCompressor base = train_compressor(macro, {0, 39}, choice, cfg, 5);
  MacroMatrix mutated = macro;
  mutated.values.bottomRows(20).setConstant(123.0);
  TrainedCompressor other = train_compressor(mutated, {0, 39}, choice, cfg, 5);

  for (int l = 0; l < base.ae.encoder.n_layers(); ++l) {
    REQUIRE(base.ae.encoder.layers[l].W == other.ae.encoder.layers[l].W);
    REQUIRE(base.ae.encoder.layers[l].b == other.ae.encoder.layers[l].b);
  }
  // normalization bounds are fit on the training range only
  REQUIRE(base.normalized.values.topRows(40) == other.normalized.values.topRows(40));
}

TEST_CASE("pca recovers exact subspaces") {
  // data on a 2-dim plane in 3 dims: projection reconstructs exactly
  Rng rng(33);
  Matrix A = random_matrix(3, 2, rng);
  Matrix S = random_matrix(2, 50, rng);
  MacroMatrix macro = make_macro((A * S).transpose());
  PcaBasis basis = pca_fit(macro, {0, 49}, 2);
  REQUIRE_FALSE(basis.rank_deficient);
  for (Eigen::Index i = 0; i < 50; ++i) {
    Vector x = macro.values.row(i).transpose();
    Vector z = pca_project(basis, x);
    Vector recon = basis.mean + basis.components * z;
    REQUIRE((x - recon).norm() < 1e-10);
  }

  // full dimension: an orthogonal rotation of centered data
  PcaBasis full = pca_fit(macro, {0, 49}, 3);
  Vector x = macro.values.row(7).transpose();
  Vector centered = x - full.mean;
  REQUIRE(pca_project(full, x).norm() == Approx(centered.norm()).margin(1e-10));

  // rank-deficient request: zero-filled tail components and a warning flag
  PcaBasis deficient = pca_fit(make_macro((A * S).transpose()), {0, 49}, 3);
  REQUIRE(deficient.rank_deficient);
  REQUIRE(deficient.components.col(2).isZero(0.0));
  REQUIRE(deficient.eigenvalues(2) == 0.0);
}

TEST_CASE("pca eigenvalues sorted descending, match power iteration") {
  Rng rng(71);
  MacroMatrix macro = make_macro(random_matrix(40, 5, rng));
  PcaBasis basis = pca_fit(macro, {0, 39}, 5);
  for (int j = 1; j < 5; ++j) REQUIRE(basis.eigenvalues(j) <= basis.eigenvalues(j - 1));

  // oracle: power iteration on the 5x5 unscaled covariance
  Matrix X = macro.values;
  Matrix centered = X.rowwise() - X.colwise().mean();
  Matrix cov = centered.transpose() * centered;
  Vector v = Vector::Ones(5).normalized();
  for (int it = 0; it < 3000; ++it) v = (cov * v).normalized();
  double top = v.dot(cov * v);
  REQUIRE(basis.eigenvalues(0) == Approx(top).epsilon(1e-8));
}

TEST_CASE("pca projections on the fit range are centered and decorrelated") {
  Rng rng(55);
  MacroMatrix macro = make_macro(random_matrix(80, 6, rng));
  PcaBasis basis = pca_fit(macro, {0, 79}, 4);
  Matrix Z(80, 4);
  for (Eigen::Index i = 0; i < 80; ++i)
    Z.row(i) = pca_project(basis, macro.values.row(i).transpose()).transpose();
  REQUIRE(Z.colwise().mean().cwiseAbs().maxCoeff() < 1e-10);
  Matrix cov = Z.transpose() * Z;
  double trace = cov.trace();
  for (int a = 0; a < 4; ++a)
    for (int b = 0; b < 4; ++b)
      if (a != b) REQUIRE(std::abs(cov(a, b)) <= 1e-8 * trace);
}

TEST_CASE("build_model_input concatenates firm block first") {
  Vector firm = Vector::LinSpaced(114, 0.0, 1.0);
  Vector z = Vector::Constant(32, -0.5);
  Vector input = build_model_input(firm, z);
  REQUIRE(input.size() == 146);
  REQUIRE(input.head(114) == firm);
  REQUIRE(input.tail(32) == z);

  // pass-through compressor keeps the raw macro width
  Vector wide = Vector::Zero(123);
  REQUIRE(build_model_input(firm, wide).size() == 237);

  REQUIRE_THROWS_AS(build_model_input(Vector(), z), std::invalid_argument);
}

TEST_CASE("compressor modes agree on the latent layout") {
  MacroMatrix macro = subspace_macro(50, 8, 2, 13);
  AeConfig cfg = small_config();
  cfg.latent_dim = 2;
  cfg.max_epochs = 10;

  TrainedCompressor none =
      train_compressor(macro, {0, 39}, {CompressorChoice::Kind::none, 0}, cfg, 1);
  REQUIRE(none.latent_dim() == 8);
  REQUIRE(none.latents == none.normalized.values);

  TrainedCompressor pca =
      train_compressor(macro, {0, 39}, {CompressorChoice::Kind::pca, 2}, cfg, 1);
  REQUIRE(pca.latent_dim() == 2);
  REQUIRE(pca.latent_at(10) == pca.latents.row(10).transpose());
}
