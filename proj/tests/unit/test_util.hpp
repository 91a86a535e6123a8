#pragma once

#include "multitalk/autograd.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <random>
#include <string>

namespace mt_test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("multitalk_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline multitalk::ad::Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng,
                                           double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  multitalk::ad::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

// Central differences of a scalar function of one matrix.
inline multitalk::ad::Matrix numeric_grad(const std::function<double(const multitalk::ad::Matrix&)>& f,
                                          multitalk::ad::Matrix x, double h = 1e-6) {
  multitalk::ad::Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    x.data()[i] = v + h;
    const double a = f(x);
    x.data()[i] = v - h;
    const double b = f(x);
    x.data()[i] = v;
    g.data()[i] = (a - b) / (2 * h);
  }
  return g;
}

}  // namespace mt_test
