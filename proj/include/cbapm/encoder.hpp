#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "cbapm/macro.hpp"
#include "cbapm/mlp.hpp"
#include "cbapm/optim.hpp"
#include "cbapm/rng.hpp"

namespace cbapm {

/*
 Macro-state compression. The autoencoder narrows the monthly macro
 vector to a d-dimensional latent state; a PCA basis and a pass-through
 mode cover the ablations. Fitting only ever sees the fit range, so
 retraining is unaffected by anything dated after it.
*/

struct AeConfig {
  std::vector<int> hidden = {128, 64};
  int latent_dim = 32;
  double dropout_p = 0.2;
  double lr = 5e-5;
  double weight_decay = 0.0;
  int batch_size = 1;
  int early_stop_patience = 2500;
  int max_epochs = 2000;
  double val_fraction = 0.10;  // trailing share of fit months used for early stopping
};

struct AutoencoderModel {
  Mlp encoder;  // D -> hidden... -> d, GELU hidden, linear latent
  Mlp decoder;  // d -> reversed hidden... -> D, GELU hidden, linear output

  int input_dim() const { return encoder.input_dim(); }
  int latent_dim() const { return encoder.output_dim(); }

  Matrix encode_batch(const Matrix& X) const {
    if (X.rows() != encoder.input_dim())
      throw std::invalid_argument("encode: expected " + std::to_string(encoder.input_dim()) +
                                  " inputs, got " + std::to_string(X.rows()));
    return encoder.forward(X, /*training=*/false).output;
  }

  Vector encode(const Vector& x) const { return encode_batch(Matrix(x)).col(0); }

  Matrix reconstruct_batch(const Matrix& X) const {
    return decoder.forward(encode_batch(X), /*training=*/false).output;
  }
};

struct AeTrainResult {
  AutoencoderModel model;
  std::vector<double> val_history;       // per-epoch validation loss
  std::vector<double> best_val_history;  // best-so-far at each recorded checkpoint
  int epochs_run = 0;
};

inline AeTrainResult train_autoencoder(const MacroMatrix& macro, MonthRange fit_range,
                                       const AeConfig& config, std::uint64_t seed) {
  if (fit_range.length() < 2)
    throw std::invalid_argument("train_autoencoder: fit range must cover at least 2 months");
  const Eigen::Index lo = macro.row_of(fit_range.first);
  const Eigen::Index hi = macro.row_of(fit_range.last);
  const Eigen::Index T = hi - lo + 1;
  const int D = static_cast<int>(macro.values.cols());

  // column-per-example layout
  Matrix X = macro.values.middleRows(lo, T).transpose();

  Eigen::Index n_val = std::max<Eigen::Index>(1, static_cast<Eigen::Index>(
                                                     std::floor(config.val_fraction * double(T))));
  if (n_val >= T) n_val = T - 1;
  const Eigen::Index n_train = T - n_val;
  Matrix Xtrain = X.leftCols(n_train);
  Matrix Xval = X.rightCols(n_val);

  AeTrainResult result;
  AutoencoderModel& model = result.model;
  model.encoder.dims = {D};
  for (int hiddim : config.hidden) model.encoder.dims.push_back(hiddim);
  model.encoder.dims.push_back(config.latent_dim);
  model.encoder.dropout_p = config.dropout_p;
  model.decoder.dims = {config.latent_dim};
  for (auto it = config.hidden.rbegin(); it != config.hidden.rend(); ++it)
    model.decoder.dims.push_back(*it);
  model.decoder.dims.push_back(D);
  model.decoder.dropout_p = config.dropout_p;

  Rng rng(derive_seed(seed, {0xAE}));
  model.encoder.init(rng);
  model.decoder.init(rng);

  std::vector<Matrix*> params = model.encoder.params();
  for (Matrix* p : model.decoder.params()) params.push_back(p);
  AdamState adam;
  adam.lr = config.lr;
  adam.weight_decay = config.weight_decay;
  adam_init(adam, params);

  TrainControl control;
  control.early_stop_patience = config.early_stop_patience;
  control.scheduler_patience = std::numeric_limits<int>::max();  // no LR schedule here
  control.dropout_p = config.dropout_p;

  auto val_loss = [&]() {
    Matrix recon = model.decoder.forward(model.encoder.forward(Xval, false).output, false).output;
    return (Xval - recon).squaredNorm() / static_cast<double>(Xval.cols());
  };

  AutoencoderModel best = model;
  double best_seen = std::numeric_limits<double>::infinity();

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n_train));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    // deterministic reshuffle each epoch (Fisher-Yates on the seeded rng)
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
      std::swap(order[i - 1], order[j]);
    }
    for (Eigen::Index start = 0; start < n_train; start += config.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(config.batch_size, n_train - start);
      Matrix batch(D, b);
      for (Eigen::Index k = 0; k < b; ++k)
        batch.col(k) = Xtrain.col(order[static_cast<std::size_t>(start + k)]);
      MlpForward enc = model.encoder.forward(batch, true, &rng);
      MlpForward dec = model.decoder.forward(enc.output, true, &rng);
      Matrix d_out = 2.0 * (dec.output - batch) / static_cast<double>(b);
      Mlp::Backward dgrads = model.decoder.backward(dec, d_out);
      Mlp::Backward egrads = model.encoder.backward(enc, dgrads.dX);
      std::vector<Matrix> grads = std::move(egrads.grads);
      for (auto& g : dgrads.grads) grads.push_back(std::move(g));
      adam_step(params, grads, adam);
    }
    double vl = val_loss();
    result.val_history.push_back(vl);
    EpochDecision d = control.observe(vl, adam.lr);
    if (d.improved) {
      best = model;
      best_seen = vl;
      result.best_val_history.push_back(best_seen);
    }
    result.epochs_run = epoch + 1;
    if (d.stop) break;
  }
  result.model = best;
  return result;
}

// --- PCA alternative -----------------------------------------------------------

struct PcaBasis {
  Vector mean;         // per-column mean on the fit range
  Matrix components;   // D x d, eigenvectors of the fit covariance, descending
  Vector eigenvalues;  // descending, on the unscaled covariance X'X
  bool rank_deficient = false;
};

inline PcaBasis pca_fit(const MacroMatrix& macro, MonthRange fit_range, int d) {
  const Eigen::Index lo = macro.row_of(fit_range.first);
  const Eigen::Index hi = macro.row_of(fit_range.last);
  const Eigen::Index T = hi - lo + 1;
  if (T < d) throw std::invalid_argument("pca_fit: fit range has fewer rows than components");
  const Eigen::Index D = macro.values.cols();

  Matrix X = macro.values.middleRows(lo, T);
  PcaBasis basis;
  basis.mean = X.colwise().mean();
  Matrix centered = X.rowwise() - basis.mean.transpose();
  Matrix cov = centered.transpose() * centered;  // unscaled; eigenvectors are scale-free

  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success) throw std::runtime_error("pca_fit: eigensolver failed");
  // SelfAdjointEigenSolver sorts ascending; reverse to descending
  basis.components.resize(D, d);
  basis.eigenvalues.resize(d);
  const double tol = 1e-12 * std::max(1.0, std::abs(solver.eigenvalues().maxCoeff()));
  for (int j = 0; j < d; ++j) {
    Eigen::Index src = D - 1 - j;
    double ev = solver.eigenvalues()(src);
    if (ev <= tol) {
      basis.eigenvalues(j) = 0.0;
      basis.components.col(j).setZero();
      basis.rank_deficient = true;
      continue;
    }
    Vector v = solver.eigenvectors().col(src);
    // deterministic sign: largest-magnitude entry positive
    Eigen::Index argmax = 0;
    v.cwiseAbs().maxCoeff(&argmax);
    if (v(argmax) < 0) v = -v;
    basis.components.col(j) = v;
    basis.eigenvalues(j) = ev;
  }
  return basis;
}

inline Vector pca_project(const PcaBasis& basis, const Vector& x) {
  if (x.size() != basis.mean.size())
    throw std::invalid_argument("pca_project: dimension mismatch");
  return basis.components.transpose() * (x - basis.mean);
}

// --- Compressor selection --------------------------------------------------------

struct CompressorChoice {
  enum class Kind { autoencoder, pca, none };
  Kind kind = Kind::autoencoder;
  int d = 32;
};

inline CompressorChoice::Kind parse_compressor_kind(const std::string& s) {
  if (s == "autoencoder") return CompressorChoice::Kind::autoencoder;
  if (s == "pca") return CompressorChoice::Kind::pca;
  if (s == "none") return CompressorChoice::Kind::none;
  throw std::invalid_argument("unknown compressor kind '" + s + "'");
}

// Precomputed latent state per month, the only macro information the
// prediction model ever consumes.
struct LatentSeries {
  int first_month = 0;
  Matrix values;  // n_months x d

  int dim() const { return static_cast<int>(values.cols()); }
  Vector at(int month) const {
    Eigen::Index r = month - first_month;
    if (r < 0 || r >= values.rows())
      throw std::out_of_range("latent series: month " + format_month(month) + " outside data");
    return values.row(r).transpose();
  }
};

// A fitted compressor plus the normalized macro series and precomputed
// latent state for every month. Normalization bounds and all fitting see
// only the fit range.
struct TrainedCompressor {
  CompressorChoice choice;
  MacroMatrix normalized;
  AutoencoderModel ae;
  PcaBasis pca;
  Matrix latents;  // n_months x latent dim

  int latent_dim() const { return static_cast<int>(latents.cols()); }
  Vector latent_at(int month) const { return latents.row(normalized.row_of(month)).transpose(); }
  LatentSeries latent_series() const { return {normalized.first_month, latents}; }
};

inline TrainedCompressor train_compressor(const MacroMatrix& macro_raw, MonthRange fit_range,
                                          const CompressorChoice& choice, const AeConfig& ae_config,
                                          std::uint64_t seed) {
  TrainedCompressor out;
  out.choice = choice;
  out.normalized = minmax_normalize_macro(macro_raw, fit_range).macro;
  const Eigen::Index T = out.normalized.n_months();
  switch (choice.kind) {
    case CompressorChoice::Kind::autoencoder: {
      AeConfig cfg = ae_config;
      cfg.latent_dim = choice.d;
      out.ae = train_autoencoder(out.normalized, fit_range, cfg, seed).model;
      out.latents = out.ae.encode_batch(out.normalized.values.transpose()).transpose();
      break;
    }
    case CompressorChoice::Kind::pca: {
      out.pca = pca_fit(out.normalized, fit_range, choice.d);
      out.latents.resize(T, choice.d);
      for (Eigen::Index i = 0; i < T; ++i)
        out.latents.row(i) =
            pca_project(out.pca, out.normalized.values.row(i).transpose()).transpose();
      break;
    }
    case CompressorChoice::Kind::none:
      out.latents = out.normalized.values;
      break;
  }
  return out;
}

// Model input: firm characteristics first, then the macro latent state.
inline Vector build_model_input(const Vector& firm_vec, const Vector& z) {
  if (firm_vec.size() == 0) throw std::invalid_argument("build_model_input: empty firm vector");
  Vector out(firm_vec.size() + z.size());
  out.head(firm_vec.size()) = firm_vec;
  out.tail(z.size()) = z;
  return out;
}

} // namespace cbapm
