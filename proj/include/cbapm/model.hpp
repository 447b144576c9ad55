#pragma once

#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "cbapm/mlp.hpp"
#include "cbapm/optim.hpp"
#include "cbapm/rng.hpp"
#include "cbapm/serialize.hpp"

namespace cbapm {

/*
 The consensus-bottleneck model: a nonlinear consensus module mapping
 firm + macro inputs to the 9 consensus estimates, and a bare affine
 prediction head mapping those estimates to the expected excess return.
 There is no activation between the two modules; one backward pass
 through the joint loss updates both.

 lambda weights the consensus loss; +infinity selects the consensus-only
 mode that optimizes the summed consensus loss alone (the prediction
 head is frozen there).
*/

inline constexpr double kLambdaInf = std::numeric_limits<double>::infinity();

struct ModelConfig {
  std::vector<int> hidden = {64, 32};
  int n_consensus = 9;
  bool layer_norm = true;
  double dropout_p = 0.5;
};

struct CbapmModel {
  Mlp consensus_net;  // input -> hidden... -> n_consensus
  Mlp prediction_head;  // n_consensus -> 1, single affine layer
  double lambda = 0.0;
  int horizon = 12;

  int input_dim() const { return consensus_net.input_dim(); }
  int n_consensus() const { return consensus_net.output_dim(); }

  std::vector<Matrix*> params() {
    std::vector<Matrix*> out = consensus_net.params();
    for (Matrix* p : prediction_head.params()) out.push_back(p);
    return out;
  }

  // Trainable parameters: the head is frozen in consensus-only mode.
  std::vector<Matrix*> trainable_params() {
    if (std::isinf(lambda)) return consensus_net.params();
    return params();
  }
};

inline CbapmModel make_cbapm_model(int input_dim, const ModelConfig& config, Rng& rng) {
  CbapmModel m;
  m.consensus_net.dims.push_back(input_dim);
  for (int h : config.hidden) m.consensus_net.dims.push_back(h);
  m.consensus_net.dims.push_back(config.n_consensus);
  m.consensus_net.hidden_layer_norm = config.layer_norm;
  m.consensus_net.dropout_p = config.dropout_p;
  m.consensus_net.init(rng);
  m.prediction_head.dims = {config.n_consensus, 1};
  m.prediction_head.init(rng);
  return m;
}

// --- Forward -------------------------------------------------------------------

struct ModelForward {
  MlpForward consensus;
  MlpForward head;
  const Matrix& c_hat() const { return consensus.output; }
  const Matrix& r_hat() const { return head.output; }
};

inline ModelForward model_forward(const CbapmModel& model, const Matrix& X, bool training = false,
                                  Rng* rng = nullptr) {
  if (X.rows() != model.consensus_net.input_dim())
    throw std::invalid_argument("forward: expected " +
                                std::to_string(model.consensus_net.input_dim()) +
                                " inputs, got " + std::to_string(X.rows()));
  ModelForward f;
  f.consensus = model.consensus_net.forward(X, training, rng);
  f.head = model.prediction_head.forward(f.consensus.output, false);
  return f;
}

// --- Joint loss ------------------------------------------------------------------

struct JointLoss {
  double total = 0.0;
  double return_loss = 0.0;  // mean squared return error over the batch
  Vector consensus_loss;     // per-variable mean squared errors
  double consensus_sum() const { return consensus_loss.sum(); }
  double consensus_mean() const { return consensus_loss.mean(); }
};

inline JointLoss joint_loss_from_outputs(const Matrix& c_hat, const Matrix& r_hat,
                                         const Matrix& consensus_targets,
                                         const Matrix& return_targets, double lambda) {
  if (!consensus_targets.allFinite() || !return_targets.allFinite())
    throw std::invalid_argument("joint_loss: non-finite targets");
  if (c_hat.rows() != consensus_targets.rows() || c_hat.cols() != consensus_targets.cols() ||
      r_hat.cols() != return_targets.cols())
    throw std::invalid_argument("joint_loss: target shape mismatch");
  const double B = static_cast<double>(c_hat.cols());
  JointLoss loss;
  loss.return_loss = (r_hat - return_targets).squaredNorm() / B;
  loss.consensus_loss.resize(c_hat.rows());
  for (Eigen::Index j = 0; j < c_hat.rows(); ++j)
    loss.consensus_loss(j) = (c_hat.row(j) - consensus_targets.row(j)).squaredNorm() / B;
  if (std::isinf(lambda))
    loss.total = loss.consensus_sum();
  else
    loss.total = loss.return_loss + lambda * loss.consensus_sum();
  return loss;
}

inline JointLoss joint_loss(const CbapmModel& model, const Matrix& X,
                            const Matrix& consensus_targets, const Matrix& return_targets,
                            double lambda) {
  ModelForward f = model_forward(model, X);
  return joint_loss_from_outputs(f.c_hat(), f.r_hat(), consensus_targets, return_targets, lambda);
}

// --- Gradients --------------------------------------------------------------------

struct ModelGradients {
  std::vector<Matrix> grads;  // aligned with trainable_params()
  JointLoss loss;
};

inline ModelGradients gradients_from_forward(const CbapmModel& model, const ModelForward& f,
                                             const Matrix& consensus_targets,
                                             const Matrix& return_targets, double lambda) {
  ModelGradients out;
  out.loss =
      joint_loss_from_outputs(f.c_hat(), f.r_hat(), consensus_targets, return_targets, lambda);
  const double B = static_cast<double>(f.c_hat().cols());
  const bool consensus_only = std::isinf(lambda);

  Matrix d_chat;
  if (consensus_only) {
    d_chat = 2.0 * (f.c_hat() - consensus_targets) / B;
  } else {
    Matrix d_rhat = 2.0 * (f.r_hat() - return_targets) / B;
    Mlp::Backward head = model.prediction_head.backward(f.head, d_rhat);
    d_chat = head.dX;
    if (lambda > 0.0) d_chat += lambda * 2.0 * (f.c_hat() - consensus_targets) / B;
    Mlp::Backward body = model.consensus_net.backward(f.consensus, d_chat);
    out.grads = std::move(body.grads);
    for (auto& g : head.grads) out.grads.push_back(std::move(g));
    return out;
  }
  Mlp::Backward body = model.consensus_net.backward(f.consensus, d_chat);
  out.grads = std::move(body.grads);
  return out;
}

// Deterministic gradient entry point (no dropout); layer norm stays
// active exactly as in training.
inline ModelGradients compute_gradients(const CbapmModel& model, const Matrix& X,
                                        const Matrix& consensus_targets,
                                        const Matrix& return_targets, double lambda) {
  ModelForward f = model_forward(model, X, /*training=*/false);
  return gradients_from_forward(model, f, consensus_targets, return_targets, lambda);
}

// --- Training ---------------------------------------------------------------------

struct Dataset {
  Matrix inputs;     // in_dim x N
  Matrix consensus;  // n_consensus x N
  Matrix returns;    // 1 x N, horizon-h realized excess returns
  std::vector<int> months;  // formation month per column (kept for HAC grouping)

  Eigen::Index n() const { return inputs.cols(); }

  Dataset select(const std::vector<Eigen::Index>& idx) const {
    Dataset out;
    out.inputs.resize(inputs.rows(), static_cast<Eigen::Index>(idx.size()));
    out.consensus.resize(consensus.rows(), static_cast<Eigen::Index>(idx.size()));
    out.returns.resize(1, static_cast<Eigen::Index>(idx.size()));
    if (!months.empty()) out.months.resize(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      out.inputs.col(static_cast<Eigen::Index>(k)) = inputs.col(idx[k]);
      out.consensus.col(static_cast<Eigen::Index>(k)) = consensus.col(idx[k]);
      out.returns.col(static_cast<Eigen::Index>(k)) = returns.col(idx[k]);
      if (!months.empty()) out.months[k] = months[static_cast<std::size_t>(idx[k])];
    }
    return out;
  }
};

struct TrainConfig {
  ModelConfig model;
  int batch_size = 5000;
  double lr = 1e-3;
  double weight_decay = 5e-3;
  bool coupled_weight_decay = false;
  double grad_clip = 1.0;
  bool clip_elementwise = false;
  int scheduler_patience = 2;
  double scheduler_factor = 0.2;
  int early_stop_patience = 5;
  int max_epochs = 100;
};

struct EpochStats {
  double insample_return_loss = 0.0;   // L_R on the full training set, eval mode
  double insample_consensus_mean = 0.0;  // mean over the 9 consensus losses
  double val_loss = 0.0;
  double lr = 0.0;
  bool improved = false;
};

struct TrainResult {
  CbapmModel model;  // best-validation checkpoint
  std::vector<EpochStats> trace;
  std::vector<double> best_val_history;
  int epochs_run = 0;
};

inline TrainResult train_cbapm(const Dataset& train, const Dataset& val, double lambda,
                               const TrainConfig& config, std::uint64_t seed) {
  if (train.n() == 0) throw std::invalid_argument("train_cbapm: empty training set");
  if (val.n() == 0) throw std::invalid_argument("train_cbapm: empty validation set");

  Rng rng(derive_seed(seed, {0xCB}));
  TrainResult result;
  CbapmModel& model = result.model;
  ModelConfig mc = config.model;
  mc.n_consensus = static_cast<int>(train.consensus.rows());
  model = make_cbapm_model(static_cast<int>(train.inputs.rows()), mc, rng);
  model.lambda = lambda;

  std::vector<Matrix*> params = model.trainable_params();
  AdamState adam;
  adam.lr = config.lr;
  adam.weight_decay = config.weight_decay;
  adam.coupled_weight_decay = config.coupled_weight_decay;
  adam_init(adam, params);

  TrainControl control;
  control.scheduler_patience = config.scheduler_patience;
  control.scheduler_factor = config.scheduler_factor;
  control.early_stop_patience = config.early_stop_patience;
  control.grad_clip = config.grad_clip;
  control.dropout_p = config.model.dropout_p;

  CbapmModel best = model;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(train.n()));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i));
      std::swap(order[i - 1], order[j]);
    }
    for (Eigen::Index start = 0; start < train.n(); start += config.batch_size) {
      const Eigen::Index b = std::min<Eigen::Index>(config.batch_size, train.n() - start);
      Matrix X(train.inputs.rows(), b), C(train.consensus.rows(), b), R(1, b);
      for (Eigen::Index k = 0; k < b; ++k) {
        Eigen::Index src = order[static_cast<std::size_t>(start + k)];
        X.col(k) = train.inputs.col(src);
        C.col(k) = train.consensus.col(src);
        R.col(k) = train.returns.col(src);
      }
      ModelForward f = model_forward(model, X, /*training=*/true, &rng);
      ModelGradients g = gradients_from_forward(model, f, C, R, lambda);
      clip_gradients(g.grads, config.grad_clip, config.clip_elementwise);
      adam_step(params, g.grads, adam);
    }

    EpochStats stats;
    JointLoss insample = joint_loss(model, train.inputs, train.consensus, train.returns, lambda);
    stats.insample_return_loss = insample.return_loss;
    stats.insample_consensus_mean = insample.consensus_mean();
    JointLoss vloss = joint_loss(model, val.inputs, val.consensus, val.returns, lambda);
    stats.val_loss = vloss.total;
    EpochDecision d = control.observe(vloss.total, adam.lr);
    stats.lr = adam.lr;
    stats.improved = d.improved;
    if (d.improved) {
      best = model;
      result.best_val_history.push_back(vloss.total);
    }
    result.trace.push_back(stats);
    result.epochs_run = epoch + 1;
    if (d.stop) break;
  }
  best.lambda = lambda;
  result.model = std::move(best);
  return result;
}

// --- Ensembling and interpretation ----------------------------------------------

struct Ensemble {
  std::vector<CbapmModel> members;
};

struct Prediction {
  Matrix c_hat;  // n_consensus x N
  Matrix r_hat;  // 1 x N
};

inline Prediction predict(const CbapmModel& model, const Matrix& X) {
  ModelForward f = model_forward(model, X);
  return {f.c_hat(), f.r_hat()};
}

// Elementwise arithmetic mean of member outputs, for both the consensus
// estimates and the return forecast.
inline Prediction ensemble_predict(const Ensemble& ensemble, const Matrix& X) {
  if (ensemble.members.empty()) throw std::invalid_argument("ensemble_predict: no members");
  Prediction acc = predict(ensemble.members[0], X);
  for (std::size_t i = 1; i < ensemble.members.size(); ++i) {
    Prediction p = predict(ensemble.members[i], X);
    acc.c_hat += p.c_hat;
    acc.r_hat += p.r_hat;
  }
  const double n = static_cast<double>(ensemble.members.size());
  acc.c_hat /= n;
  acc.r_hat /= n;
  return acc;
}

struct PredictionCoefficients {
  Vector weights;  // loading of the return forecast on each consensus estimate
  double bias = 0.0;
};

inline PredictionCoefficients extract_prediction_coefficients(const CbapmModel& model) {
  PredictionCoefficients out;
  out.weights = model.prediction_head.layers[0].W.row(0).transpose();
  out.bias = model.prediction_head.layers[0].b(0, 0);
  return out;
}

inline PredictionCoefficients extract_prediction_coefficients(const Ensemble& ensemble) {
  if (ensemble.members.empty())
    throw std::invalid_argument("extract_prediction_coefficients: no members");
  PredictionCoefficients acc = extract_prediction_coefficients(ensemble.members[0]);
  for (std::size_t i = 1; i < ensemble.members.size(); ++i) {
    PredictionCoefficients p = extract_prediction_coefficients(ensemble.members[i]);
    acc.weights += p.weights;
    acc.bias += p.bias;
  }
  const double n = static_cast<double>(ensemble.members.size());
  acc.weights /= n;
  acc.bias /= n;
  return acc;
}

// --- Checkpointing -----------------------------------------------------------------

inline Checkpoint to_checkpoint(const CbapmModel& model, std::uint64_t seed) {
  Checkpoint ck;
  ck.seed = seed;
  model.consensus_net.append_tensors(ck.tensors, "consensus");
  model.prediction_head.append_tensors(ck.tensors, "head");
  Matrix meta(2, 1);
  meta << model.lambda, static_cast<double>(model.horizon);
  ck.tensors.push_back({"meta", meta});
  return ck;
}

inline CbapmModel from_checkpoint(const Checkpoint& ck) {
  CbapmModel model;
  // architecture recovered from tensor shapes
  bool layer_norm = false;
  std::vector<int> dims;
  for (int l = 0;; ++l) {
    std::string base = "consensus.l" + std::to_string(l) + ".";
    bool found = false;
    for (const auto& t : ck.tensors)
      if (t.name == base + "W") {
        if (dims.empty()) dims.push_back(static_cast<int>(t.value.cols()));
        dims.push_back(static_cast<int>(t.value.rows()));
        found = true;
      } else if (t.name == base + "ln_gamma") {
        layer_norm = true;
      }
    if (!found) break;
  }
  model.consensus_net.dims = dims;
  model.consensus_net.hidden_layer_norm = layer_norm;
  model.consensus_net.layers.resize(dims.size() - 1);
  for (std::size_t i = 0; i + 1 < dims.size(); ++i)
    if (layer_norm && i + 2 < dims.size()) {
      model.consensus_net.layers[i].ln_gamma.resize(dims[i + 1], 1);
      model.consensus_net.layers[i].ln_beta.resize(dims[i + 1], 1);
    }
  model.consensus_net.load_tensors(ck, "consensus");
  model.prediction_head.dims = {dims.back(), 1};
  model.prediction_head.layers.resize(1);
  model.prediction_head.load_tensors(ck, "head");
  const Matrix& meta = ck.tensor("meta");
  model.lambda = meta(0, 0);
  model.horizon = static_cast<int>(meta(1, 0));
  return model;
}

} // namespace cbapm
