#pragma once

#include "multitalk/autograd.hpp"

#include <map>
#include <string>

namespace multitalk {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled weight decay (AdamW). Zero gives plain Adam.
  double weight_decay = 0.0;
};

// Adam / AdamW with per-parameter step counts. Parameters that received no
// gradient in the last backward pass (Parameter::touched == false) are skipped
// entirely, so their moments and values stay put.
class Adam {
 public:
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(ad::ParameterStore& store);
  const AdamConfig& config() const { return config_; }

 private:
  struct State {
    ad::Matrix m;
    ad::Matrix v;
    long step = 0;
  };
  AdamConfig config_;
  std::map<std::string, State> state_;
};

}  // namespace multitalk
