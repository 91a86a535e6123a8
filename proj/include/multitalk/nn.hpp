#pragma once

// Transformer building blocks on top of the autograd tape.

#include "multitalk/autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>

namespace multitalk::nn {

using ad::Graph;
using ad::Matrix;
using ad::ParameterStore;
using ad::Var;

// Binds a parameter store to one graph. Each parameter becomes a single leaf
// node per graph no matter how many times it is referenced.
class Scope {
 public:
  // Trainable: gradients land in the store's Parameter::grad.
  Scope(Graph& graph, ParameterStore& store) : graph_(graph), store_(store), mutable_(&store) {}
  // Frozen: parameters enter the graph as constants.
  Scope(Graph& graph, const ParameterStore& store) : graph_(graph), store_(store) {}

  Var param(const std::string& name);
  Graph& graph() { return graph_; }
  bool trainable() const { return mutable_ != nullptr; }

 private:
  Graph& graph_;
  const ParameterStore& store_;
  ParameterStore* mutable_ = nullptr;
  std::unordered_map<std::string, Var> cache_;
};

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev,
                       std::mt19937_64& rng);

void init_linear(ParameterStore& store, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng);
Var linear(Scope& s, const std::string& prefix, const Var& x);

void init_layer_norm(ParameterStore& store, const std::string& prefix, int width);
Var layer_norm(Scope& s, const std::string& prefix, const Var& x);

void init_attention(ParameterStore& store, const std::string& prefix, int width,
                    std::mt19937_64& rng);
// Multi-head scaled dot-product attention. `mask` is additive (rows = queries,
// cols = keys) and may be null.
Var attention(Scope& s, const std::string& prefix, const Var& queries,
              const Var& keys_values, int heads, const Matrix* mask);

void init_feed_forward(ParameterStore& store, const std::string& prefix, int width,
                       int hidden, std::mt19937_64& rng);
Var feed_forward(Scope& s, const std::string& prefix, const Var& x);

// Pre-norm self-attention block.
void init_encoder_block(ParameterStore& store, const std::string& prefix, int width,
                        int hidden, std::mt19937_64& rng);
Var encoder_block(Scope& s, const std::string& prefix, const Var& x, int heads,
                  const Matrix* self_mask);

// Pre-norm block: masked self-attention, cross-attention over `memory`, FFN.
void init_decoder_block(ParameterStore& store, const std::string& prefix, int width,
                        int hidden, std::mt19937_64& rng);
Var decoder_block(Scope& s, const std::string& prefix, const Var& x,
                  const Var& memory, int heads, const Matrix* self_mask);

Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index width);
// 0 on and below the diagonal, -inf above.
Matrix causal_mask(Eigen::Index length);

}  // namespace multitalk::nn
