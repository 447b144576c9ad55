#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "cbapm/linalg.hpp"

namespace cbapm {

/*
 Adam with decoupled weight decay (default) or the coupled L2-in-gradient
 variant, global-L2 gradient clipping (elementwise absolute clamp behind a
 flag), reduce-on-plateau learning-rate scheduling and early stopping.
 Parameters are handled as flat lists of matrices so the same machinery
 serves every network in the library.
*/

struct AdamState {
  std::vector<Matrix> m;  // first-moment accumulators, one per parameter tensor
  std::vector<Matrix> v;  // second-moment accumulators
  long step_count = 0;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool coupled_weight_decay = false;  // if true, decay enters the gradient instead
};

inline void adam_init(AdamState& state, const std::vector<Matrix*>& params) {
  state.m.clear();
  state.v.clear();
  for (const Matrix* p : params) {
    state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  state.step_count = 0;
}

inline void adam_step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
                      AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].allFinite()) throw std::invalid_argument("adam_step: non-finite gradient");
    if (grads[i].rows() != params[i]->rows() || grads[i].cols() != params[i]->cols())
      throw std::invalid_argument("adam_step: gradient shape mismatch");
  }
  ++state.step_count;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix g = grads[i];
    if (state.weight_decay > 0.0) {
      if (state.coupled_weight_decay)
        g += state.weight_decay * p;
      else
        p -= state.lr * state.weight_decay * p;
    }
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g.cwiseProduct(g);
    Matrix m_hat = state.m[i] / bc1;
    Matrix v_hat = state.v[i] / bc2;
    p.array() -= state.lr * m_hat.array() / (v_hat.array().sqrt() + state.eps);
  }
}

// Scales all gradients by max_norm/||g|| when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm. The elementwise mode clamps each
// entry to [-max_norm, max_norm] instead.
inline double clip_gradients(std::vector<Matrix>& grads, double max_norm,
                             bool elementwise_abs = false) {
  double sq = 0.0;
  for (const Matrix& g : grads) {
    if (!g.allFinite()) throw std::invalid_argument("clip_gradients: non-finite gradient");
    sq += g.squaredNorm();
  }
  double norm = std::sqrt(sq);
  if (elementwise_abs) {
    for (Matrix& g : grads)
      g = g.unaryExpr([max_norm](double v) { return std::clamp(v, -max_norm, max_norm); });
    return norm;
  }
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (Matrix& g : grads) g *= scale;
  }
  return norm;
}

// --- Plateau scheduling and early stopping -----------------------------------

struct EpochDecision {
  bool improved = false;
  bool lr_decayed = false;
  bool stop = false;
};

struct TrainControl {
  int scheduler_patience = 2;
  double scheduler_factor = 0.2;
  int early_stop_patience = 5;
  double grad_clip = 1.0;
  double dropout_p = 0.5;
  double best_val = std::numeric_limits<double>::infinity();
  int bad_epochs_sched = 0;
  int bad_epochs_stop = 0;

  // One call per epoch. Improvement means a strictly lower validation
  // loss; the scheduler counter resets after a decay while the stop
  // counter keeps accumulating.
  EpochDecision observe(double val_loss, double& lr) {
    if (!std::isfinite(val_loss)) throw std::invalid_argument("observe: non-finite val loss");
    EpochDecision d;
    if (val_loss < best_val) {
      best_val = val_loss;
      bad_epochs_sched = 0;
      bad_epochs_stop = 0;
      d.improved = true;
      return d;
    }
    ++bad_epochs_sched;
    ++bad_epochs_stop;
    if (bad_epochs_sched >= scheduler_patience) {
      lr *= scheduler_factor;
      bad_epochs_sched = 0;
      d.lr_decayed = true;
    }
    if (bad_epochs_stop >= early_stop_patience) d.stop = true;
    return d;
  }
};

// Thin wrappers matching the standalone usage in tests: each advances the
// shared improvement bookkeeping exactly once.
inline bool lr_on_plateau(TrainControl& control, double val_loss, double& lr) {
  return control.observe(val_loss, lr).lr_decayed;
}

inline bool early_stop(TrainControl& control, double val_loss) {
  double lr_unused = 0.0;
  return control.observe(val_loss, lr_unused).stop;
}

} // namespace cbapm
