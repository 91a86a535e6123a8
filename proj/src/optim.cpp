#include "multitalk/optim.hpp"

#include <cmath>

namespace multitalk {

void Adam::step(ad::ParameterStore& store) {
  for (ad::Parameter* p : store.all()) {
    if (!p->touched) continue;
    State& s = state_[p->name];
    if (s.step == 0) {
      s.m = ad::Matrix::Zero(p->value.rows(), p->value.cols());
      s.v = ad::Matrix::Zero(p->value.rows(), p->value.cols());
    }
    ++s.step;
    if (config_.weight_decay > 0.0) {
      p->value *= (1.0 - config_.lr * config_.weight_decay);
    }
    s.m = config_.beta1 * s.m + (1.0 - config_.beta1) * p->grad;
    s.v = config_.beta2 * s.v + (1.0 - config_.beta2) * p->grad.cwiseAbs2();
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.step));
    const double step_size = config_.lr / bc1;
    const double sqrt_bc2 = std::sqrt(bc2);
    p->value.array() -=
        step_size * s.m.array() / (s.v.array().sqrt() / sqrt_bc2 + config_.eps);
  }
}

}  // namespace multitalk
