#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "arob/network.hpp"
#include "arob/phantom.hpp"
#include "arob/tensor.hpp"

namespace arob::fixtures {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("arob-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename T = float>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (T& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

// Reduced spec small enough for exhaustive finite differences.
inline NetworkSpec tiny_spec() {
  NetworkSpec s;
  s.in_channels = 2;
  s.spatial = {6, 6, 6};
  s.blocks = {{3, 2}, {3, 1}, {4, 1}, {4, 1}};
  s.dense_hidden = 6;
  return s;
}

// Flatten -> Dense over a (C, D, H, W) input: y = W x + b.
template <typename T = float>
Network<T> linear_model(const Shape& sample, const Tensor<T>& weight, const Tensor<T>& bias) {
  Dense<T> d{weight, bias};
  return Network<T>(sample, {Flatten{}, d});
}

// Single-channel 6³ net for training tests.
inline NetworkSpec toy_spec() {
  NetworkSpec s;
  s.spatial = {6, 6, 6};
  s.blocks = {{2, 2}, {2, 1}, {2, 1}, {2, 1}};
  s.dense_hidden = 4;
  return s;
}

// Linearly separable noise-free 6³ cohort: each subject has its own flat
// background level b, and a central 2³ cube at b + 0.4 (patient) or
// b - 0.2 (control). The cube is mirror-symmetric along W and stays inside
// the volume under a +-2 shift along H.
inline std::vector<VolumeSample> toy_samples(std::size_t per_class, std::uint64_t seed, const std::string& prefix) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.3, 0.5);
  std::vector<VolumeSample> out;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    const bool patient = i % 2 == 1;
    const double b = u(rng);
    Tensor<float> v({1, 6, 6, 6}, static_cast<float>(b));
    for (std::size_t d = 2; d < 4; ++d)
      for (std::size_t h = 2; h < 4; ++h)
        for (std::size_t w = 2; w < 4; ++w) v[(d * 6 + h) * 6 + w] = static_cast<float>(patient ? b + 0.4 : b - 0.2);
    VolumeSample s;
    s.volume = std::move(v);
    s.subject_id = prefix + std::to_string(i);
    s.label = patient ? ClassLabel::patient : ClassLabel::control;
    out.push_back(std::move(s));
  }
  return out;
}

inline DatasetSplit toy_split(std::size_t train_per_class = 8) {
  DatasetSplit d;
  d.train = toy_samples(train_per_class, 1, "train-");
  d.validation = toy_samples(3, 2, "val-");
  d.test = toy_samples(5, 3, "test-");
  return d;
}

}  // namespace arob::fixtures
