#pragma once

#include <string>
#include <vector>

#include "cbapm/nn.hpp"
#include "cbapm/rng.hpp"
#include "cbapm/serialize.hpp"

namespace cbapm {

/*
 Feedforward stack: affine -> (layer norm) -> GELU -> (dropout) on every
 hidden layer, bare affine on the output layer. Parameters are plain
 matrices (biases and norm parameters as n x 1 columns) so one optimizer
 state covers any stack.
*/

struct MlpLayer {
  Matrix W;
  Matrix b;         // n x 1
  Matrix ln_gamma;  // n x 1, empty when layer norm is off or on the output layer
  Matrix ln_beta;
};

struct MlpForward {
  Matrix output;
  // per hidden layer
  std::vector<Matrix> inputs;        // layer input (also holds the output layer's input last)
  std::vector<Matrix> affine;        // pre-normalization activations
  std::vector<LayerNormCache> ln;    // valid when layer norm enabled
  std::vector<Matrix> pre_act;       // input to GELU
  std::vector<DropoutOut> drop;      // masks when training
};

struct Mlp {
  std::vector<int> dims;  // input, hidden..., output
  bool hidden_layer_norm = false;
  double dropout_p = 0.0;
  std::vector<MlpLayer> layers;

  int n_layers() const { return static_cast<int>(layers.size()); }
  int input_dim() const { return dims.front(); }
  int output_dim() const { return dims.back(); }

  void init(Rng& rng) {
    layers.clear();
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      DenseLayer d = he_init(dims[i + 1], dims[i], rng);
      MlpLayer layer;
      layer.W = std::move(d.W);
      layer.b = Matrix::Zero(dims[i + 1], 1);
      const bool hidden = i + 2 < dims.size();
      if (hidden && hidden_layer_norm) {
        layer.ln_gamma = Matrix::Ones(dims[i + 1], 1);
        layer.ln_beta = Matrix::Zero(dims[i + 1], 1);
      }
      layers.push_back(std::move(layer));
    }
  }

  std::vector<Matrix*> params() {
    std::vector<Matrix*> out;
    for (auto& l : layers) {
      out.push_back(&l.W);
      out.push_back(&l.b);
      if (l.ln_gamma.size() > 0) {
        out.push_back(&l.ln_gamma);
        out.push_back(&l.ln_beta);
      }
    }
    return out;
  }

  std::vector<std::string> param_names(const std::string& prefix) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      std::string base = prefix + ".l" + std::to_string(i) + ".";
      out.push_back(base + "W");
      out.push_back(base + "b");
      if (layers[i].ln_gamma.size() > 0) {
        out.push_back(base + "ln_gamma");
        out.push_back(base + "ln_beta");
      }
    }
    return out;
  }

  MlpForward forward(const Matrix& X, bool training, Rng* rng = nullptr) const {
    MlpForward f;
    Matrix cur = X;
    const int n = n_layers();
    f.inputs.resize(n);
    f.affine.resize(n);
    f.ln.resize(n);
    f.pre_act.resize(n);
    f.drop.resize(n);
    for (int i = 0; i < n; ++i) {
      f.inputs[i] = cur;
      const MlpLayer& l = layers[i];
      Matrix a = (l.W * cur).colwise() + Vector(l.b.col(0));
      const bool hidden = i + 1 < n;
      if (!hidden) {
        f.output = std::move(a);
        break;
      }
      f.affine[i] = a;
      Matrix pre;
      if (l.ln_gamma.size() > 0) {
        LayerNormOut ln = layer_norm(a, Vector(l.ln_gamma.col(0)), Vector(l.ln_beta.col(0)));
        f.ln[i] = std::move(ln.cache);
        pre = std::move(ln.Y);
      } else {
        pre = std::move(a);
      }
      f.pre_act[i] = pre;
      Matrix h = gelu(pre);
      if (training && dropout_p > 0.0) {
        if (!rng) throw std::invalid_argument("mlp forward: training dropout needs an rng");
        f.drop[i] = dropout(h, dropout_p, *rng, true);
        cur = f.drop[i].Y;
      } else {
        cur = std::move(h);
      }
    }
    return f;
  }

  struct Backward {
    std::vector<Matrix> grads;  // aligned with params()
    Matrix dX;
  };

  Backward backward(const MlpForward& f, const Matrix& dOut) const {
    Backward out;
    const int n = n_layers();
    std::vector<std::vector<Matrix>> per_layer(n);
    Matrix upstream = dOut;
    for (int i = n - 1; i >= 0; --i) {
      const MlpLayer& l = layers[i];
      const bool hidden = i + 1 < n;
      Matrix d_affine;
      if (!hidden) {
        d_affine = upstream;
      } else {
        Matrix d_h = upstream;
        if (f.drop[i].mask.size() > 0) d_h = dropout_backward(f.drop[i], dropout_p, d_h);
        Matrix d_pre = gelu_backward(f.pre_act[i], d_h);
        if (l.ln_gamma.size() > 0) {
          LayerNormGrads lg = layer_norm_backward(f.ln[i], Vector(l.ln_gamma.col(0)), d_pre);
          per_layer[i].push_back(lg.dgamma);  // stored, reordered below
          per_layer[i].push_back(lg.dbeta);
          d_affine = std::move(lg.dX);
        } else {
          d_affine = std::move(d_pre);
        }
      }
      DenseLayer view{l.W, Vector(l.b.col(0))};
      DenseGrads dg = dense_backward(view, f.inputs[i], d_affine);
      per_layer[i].insert(per_layer[i].begin(), Matrix(dg.db));
      per_layer[i].insert(per_layer[i].begin(), std::move(dg.dW));
      upstream = std::move(dg.dX);
    }
    for (int i = 0; i < n; ++i)
      for (auto& g : per_layer[i]) out.grads.push_back(std::move(g));
    out.dX = std::move(upstream);
    return out;
  }

  void append_tensors(std::vector<NamedTensor>& out, const std::string& prefix) const {
    auto names = param_names(prefix);
    std::size_t k = 0;
    for (const auto& l : layers) {
      out.push_back({names[k++], l.W});
      out.push_back({names[k++], l.b});
      if (l.ln_gamma.size() > 0) {
        out.push_back({names[k++], l.ln_gamma});
        out.push_back({names[k++], l.ln_beta});
      }
    }
  }

  void load_tensors(const Checkpoint& ck, const std::string& prefix) {
    auto names = param_names(prefix);
    std::size_t k = 0;
    for (auto& l : layers) {
      l.W = ck.tensor(names[k++]);
      l.b = ck.tensor(names[k++]);
      if (l.ln_gamma.size() > 0) {
        l.ln_gamma = ck.tensor(names[k++]);
        l.ln_beta = ck.tensor(names[k++]);
      }
    }
  }
};

} // namespace cbapm
