#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "unlearn/dataset.hpp"
#include "unlearn/model.hpp"
#include "unlearn/rng.hpp"

namespace unlearn::test_support {

// Regression data: rows of x are samples; every label is 0 in a one-class set.
inline DatasetSplit regression_split(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, SampleId first_id = 0) {
  DatasetSplit d;
  const auto n = static_cast<std::size_t>(x.rows());
  const auto dim = static_cast<std::size_t>(x.cols());
  d.inputs = Tensor({n, dim});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) d.inputs[i * dim + j] = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  d.labels.assign(n, 0);
  d.targets.assign(y.data(), y.data() + y.size());
  for (std::size_t i = 0; i < n; ++i) d.ids.push_back(first_id + i);
  d.class_count = 1;
  d.name = "regression";
  return d;
}

inline DatasetSplit classification_split(Tensor inputs, std::vector<int> labels, int classes) {
  DatasetSplit d;
  d.inputs = std::move(inputs);
  d.labels = std::move(labels);
  for (std::size_t i = 0; i < d.labels.size(); ++i) d.ids.push_back(i);
  d.class_count = classes;
  d.name = "classification";
  return d;
}

inline Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  }
  return m;
}

inline Eigen::VectorXd to_eigen(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline ModelSpec vector_spec(ModelKind kind, std::size_t dim, int classes, std::vector<std::size_t> hidden = {8}) {
  ModelSpec s;
  s.kind = kind;
  s.input_shape = {dim};
  s.classes = kind == ModelKind::LinearRegression ? 1 : classes;
  s.hidden = std::move(hidden);
  return s;
}

inline ModelSpec tiny_cnn_spec(std::vector<std::size_t> channels = {3, 4}, std::size_t side = 8, int classes = 3) {
  ModelSpec s;
  s.kind = ModelKind::SmallCNN;
  s.input_shape = {1, side, side};
  s.classes = classes;
  s.channels = std::move(channels);
  return s;
}

// Random images with labels cycling through the classes.
inline DatasetSplit random_images(std::size_t n, std::size_t side, int classes, std::uint64_t seed) {
  auto rng = make_rng(seed, {0x696d67});
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor x({n, 1, side, side});
  for (auto& v : x.data()) v = noise(rng);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  // a class-dependent bright square so the classes are learnable
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(labels[i]) * 2 % (side - 1);
    x[i * side * side + off * side + off] += 4.0;
  }
  return classification_split(std::move(x), std::move(labels), classes);
}

inline std::filesystem::path data_dir() { return std::filesystem::path(UNLEARN_TEST_DATA_DIR) / "mnist5k"; }

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("unlearn-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace unlearn::test_support
