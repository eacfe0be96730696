#pragma once

#include <map>
#include <string>
#include <vector>

#include "xmal/nn.hpp"

namespace xmal::optim {

using ad::Matrix;

/// Serializable optimizer state: named arrays plus a step counter.
struct OptimizerState {
  long step = 0;
  std::map<std::string, Matrix> slots;
};

/// Adaptive-moment optimizer. With `decoupled` set, weight decay is applied
/// directly to the weights (AdamW) instead of being folded into the gradient.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool decoupled = true;
  };

  Adam(nn::ParamList params, Options options);

  void step();
  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }
  const nn::ParamList& params() const { return params_; }

  OptimizerState state() const;
  void load_state(const OptimizerState& state);

 private:
  nn::ParamList params_;
  Options options_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

/// SGD with classical momentum and L2 weight decay folded into the gradient.
class Sgd {
 public:
  struct Options {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
  };

  Sgd(nn::ParamList params, Options options);

  void step();
  double lr() const { return options_.lr; }
  void set_lr(double lr) { options_.lr = lr; }

  OptimizerState state() const;
  void load_state(const OptimizerState& state);

 private:
  nn::ParamList params_;
  Options options_;
  std::vector<Matrix> velocity_;
  long t_ = 0;
};

/// Piecewise-constant schedule: base lr divided by `factor` once for every
/// milestone already passed. Epochs are 1-based; the lr for epoch e uses the
/// milestones m with m < e ("after the m-th epoch").
double multistep_lr(double base_lr, int epoch, const std::vector<int>& milestones, double factor = 10.0);

}  // namespace xmal::optim
