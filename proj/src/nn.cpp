#include "multitalk/nn.hpp"

#include "multitalk/error.hpp"

#include <cmath>
#include <limits>

namespace multitalk::nn {

Var Scope::param(const std::string& name) {
  auto it = cache_.find(name);
  if (it != cache_.end()) return it->second;
  Var v = mutable_ != nullptr ? graph_.param(mutable_->at(name))
                              : graph_.constant(store_.at(name).value);
  cache_.emplace(name, v);
  return v;
}

Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void init_linear(ParameterStore& store, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng) {
  // Xavier-normal.
  const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
  store.add(prefix + ".w", gaussian_matrix(in, out, stddev, rng));
  store.add(prefix + ".b", Matrix::Zero(1, out));
}

Var linear(Scope& s, const std::string& prefix, const Var& x) {
  return ad::add_row(ad::matmul(x, s.param(prefix + ".w")), s.param(prefix + ".b"));
}

void init_layer_norm(ParameterStore& store, const std::string& prefix, int width) {
  store.add(prefix + ".gamma", Matrix::Ones(1, width));
  store.add(prefix + ".beta", Matrix::Zero(1, width));
}

Var layer_norm(Scope& s, const std::string& prefix, const Var& x) {
  return ad::layer_norm(x, s.param(prefix + ".gamma"), s.param(prefix + ".beta"));
}

void init_attention(ParameterStore& store, const std::string& prefix, int width,
                    std::mt19937_64& rng) {
  init_linear(store, prefix + ".q", width, width, rng);
  init_linear(store, prefix + ".k", width, width, rng);
  init_linear(store, prefix + ".v", width, width, rng);
  init_linear(store, prefix + ".o", width, width, rng);
}

Var attention(Scope& s, const std::string& prefix, const Var& queries,
              const Var& keys_values, int heads, const Matrix* mask) {
  const Eigen::Index width = queries.cols();
  if (heads < 1 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) +
                     " not divisible by heads " + std::to_string(heads));
  }
  const Eigen::Index head_dim = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  Var q = linear(s, prefix + ".q", queries);
  Var k = linear(s, prefix + ".k", keys_values);
  Var v = linear(s, prefix + ".v", keys_values);

  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = ad::slice_cols(q, h * head_dim, head_dim);
    Var kh = ad::slice_cols(k, h * head_dim, head_dim);
    Var vh = ad::slice_cols(v, h * head_dim, head_dim);
    Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    Var weights = ad::softmax_rows(scores, mask);
    outs.push_back(ad::matmul(weights, vh));
  }
  Var merged = heads == 1 ? outs.front() : ad::concat_cols(outs);
  return linear(s, prefix + ".o", merged);
}

void init_feed_forward(ParameterStore& store, const std::string& prefix, int width,
                       int hidden, std::mt19937_64& rng) {
  init_linear(store, prefix + ".fc1", width, hidden, rng);
  init_linear(store, prefix + ".fc2", hidden, width, rng);
}

Var feed_forward(Scope& s, const std::string& prefix, const Var& x) {
  return linear(s, prefix + ".fc2", ad::gelu(linear(s, prefix + ".fc1", x)));
}

void init_encoder_block(ParameterStore& store, const std::string& prefix, int width,
                        int hidden, std::mt19937_64& rng) {
  init_layer_norm(store, prefix + ".ln1", width);
  init_attention(store, prefix + ".attn", width, rng);
  init_layer_norm(store, prefix + ".ln2", width);
  init_feed_forward(store, prefix + ".ffn", width, hidden, rng);
}

Var encoder_block(Scope& s, const std::string& prefix, const Var& x, int heads,
                  const Matrix* self_mask) {
  Var h = layer_norm(s, prefix + ".ln1", x);
  Var y = ad::add(x, attention(s, prefix + ".attn", h, h, heads, self_mask));
  Var h2 = layer_norm(s, prefix + ".ln2", y);
  return ad::add(y, feed_forward(s, prefix + ".ffn", h2));
}

void init_decoder_block(ParameterStore& store, const std::string& prefix, int width,
                        int hidden, std::mt19937_64& rng) {
  init_layer_norm(store, prefix + ".ln1", width);
  init_attention(store, prefix + ".self", width, rng);
  init_layer_norm(store, prefix + ".ln2", width);
  init_attention(store, prefix + ".cross", width, rng);
  init_layer_norm(store, prefix + ".ln3", width);
  init_feed_forward(store, prefix + ".ffn", width, hidden, rng);
}

Var decoder_block(Scope& s, const std::string& prefix, const Var& x,
                  const Var& memory, int heads, const Matrix* self_mask) {
  Var h = layer_norm(s, prefix + ".ln1", x);
  Var y = ad::add(x, attention(s, prefix + ".self", h, h, heads, self_mask));
  Var h2 = layer_norm(s, prefix + ".ln2", y);
  Var z = ad::add(y, attention(s, prefix + ".cross", h2, memory, heads, nullptr));
  Var h3 = layer_norm(s, prefix + ".ln3", z);
  return ad::add(z, feed_forward(s, prefix + ".ffn", h3));
}

Matrix sinusoidal_positions(Eigen::Index length, Eigen::Index width) {
  Matrix pe(length, width);
  for (Eigen::Index t = 0; t < length; ++t) {
    for (Eigen::Index i = 0; i < width; ++i) {
      const double rate =
          std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(t) * rate;
      pe(t, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Matrix causal_mask(Eigen::Index length) {
  Matrix m = Matrix::Zero(length, length);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < length; ++r) {
    for (Eigen::Index c = r + 1; c < length; ++c) m(r, c) = neg_inf;
  }
  return m;
}

}  // namespace multitalk::nn
