#include "xmal/optim.hpp"

#include <cmath>

#include "xmal/error.hpp"

namespace xmal::optim {

namespace {
void load_slots(const OptimizerState& state, const nn::ParamList& params, const std::string& slot,
                std::vector<Matrix>& dst) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto it = state.slots.find(params[i].name + "." + slot);
    if (it == state.slots.end()) {
      fail(ErrorKind::kConfigMismatch, "optimizer state lacks slot " + params[i].name + "." + slot);
    }
    if (it->second.rows() != params[i].var.rows() || it->second.cols() != params[i].var.cols()) {
      fail(ErrorKind::kConfigMismatch, "optimizer slot shape mismatch for " + params[i].name);
    }
    dst[i] = it->second;
  }
}
}  // namespace

Adam::Adam(nn::ParamList params, Options options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
    v_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& var = params_[i].var;
    if (!var.has_grad()) continue;
    Matrix g = var.grad();
    Matrix& w = var.mutable_value();
    if (options_.weight_decay > 0.0) {
      if (options_.decoupled) {
        w *= (1.0 - options_.lr * options_.weight_decay);
      } else {
        g += options_.weight_decay * w;
      }
    }
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    const Matrix m_hat = m_[i] / bc1;
    const Matrix denom = ((v_[i] / bc2).array().sqrt() + options_.eps).matrix();
    w -= options_.lr * m_hat.cwiseQuotient(denom);
  }
}

OptimizerState Adam::state() const {
  OptimizerState s;
  s.step = t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    s.slots[params_[i].name + ".m"] = m_[i];
    s.slots[params_[i].name + ".v"] = v_[i];
  }
  return s;
}

void Adam::load_state(const OptimizerState& state) {
  load_slots(state, params_, "m", m_);
  load_slots(state, params_, "v", v_);
  t_ = state.step;
}

Sgd::Sgd(nn::ParamList params, Options options) : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) velocity_.push_back(Matrix::Zero(p.var.rows(), p.var.cols()));
}

void Sgd::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& var = params_[i].var;
    if (!var.has_grad()) continue;
    Matrix& w = var.mutable_value();
    Matrix g = var.grad() + options_.weight_decay * w;
    velocity_[i] = options_.momentum * velocity_[i] + g;
    w -= options_.lr * velocity_[i];
  }
}

OptimizerState Sgd::state() const {
  OptimizerState s;
  s.step = t_;
  for (std::size_t i = 0; i < params_.size(); ++i) s.slots[params_[i].name + ".velocity"] = velocity_[i];
  return s;
}

void Sgd::load_state(const OptimizerState& state) {
  load_slots(state, params_, "velocity", velocity_);
  t_ = state.step;
}

double multistep_lr(double base_lr, int epoch, const std::vector<int>& milestones, double factor) {
  double lr = base_lr;
  for (int m : milestones) {
    if (epoch > m) lr /= factor;
  }
  return lr;
}

}  // namespace xmal::optim
