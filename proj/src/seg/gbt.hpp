// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multiclass gradient-boosted trees with a softmax objective and
// second-order (Newton) leaf weights.

#include <cstdint>
#include <span>
#include <vector>

namespace dinolens::seg {

struct GbtParams {
  size_t n_trees = 100;  // boosting rounds; each grows one tree per class
  size_t max_depth = 6;
  double learning_rate = 0.3;
  double lambda = 1.0;            // L2 penalty on leaf weights
  double min_child_weight = 1.0;  // minimum hessian sum per child
  double min_gain = 1e-6;
  double subsample = 1.0;
  uint64_t seed = 0;

  void validate() const;
};

struct Tree {
  // Node i splits on feature[i] < threshold[i] (left) when feature[i] >= 0,
  // else it is a leaf holding value[i] (already scaled by the learning rate).
  std::vector<int> feature;
  std::vector<float> threshold;
  std::vector<int> left;
  std::vector<int> right;
  std::vector<double> value;

  double eval(const float* row) const;
  size_t depth() const;
};

class GbtClassifier {
 public:
  /// `x` is row-major [n, features]; labels are 0..classes-1, each present.
  static GbtClassifier fit(std::span<const float> x, size_t features, std::span<const int> labels, size_t classes,
                           const GbtParams& params);

  size_t classes() const { return classes_; }
  size_t features() const { return features_; }
  const std::vector<Tree>& trees() const { return trees_; }  // round-major, one per class

  /// Raw per-class scores for one row.
  void scores(const float* row, double* out) const;
  /// Highest score; ties go to the lowest class.
  int predict(const float* row) const;

 private:
  size_t classes_ = 0;
  size_t features_ = 0;
  std::vector<Tree> trees_;
};

}  // namespace dinolens::seg
