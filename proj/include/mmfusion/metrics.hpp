#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mmf {

// Unweighted by default. Degenerate chance agreement (p_e = 1) yields 1 for perfect agreement
// and 0 otherwise; `degenerate` is set when non-null.
double cohen_kappa(std::span<const int64_t> y_true, std::span<const int64_t> y_pred, int64_t num_classes,
                   bool quadratic = false, bool* degenerate = nullptr);

// Mann-Whitney form: mean over (positive, negative) pairs of [s_pos > s_neg], ties 0.5.
double auc(std::span<const int64_t> y_true, std::span<const double> scores);

// Area under the empirical ROC curve by trapezoidal integration over distinct thresholds.
double auc_trapezoid(std::span<const int64_t> y_true, std::span<const double> scores);

// score >= threshold counts as positive. Returns {sensitivity, specificity}.
std::pair<double, double> sens_spec(std::span<const int64_t> y_true, std::span<const double> scores,
                                    double threshold);

// Threshold among the observed scores maximizing sensitivity + specificity - 1; the smallest
// such score wins ties.
double youden_threshold(std::span<const int64_t> y_true, std::span<const double> scores);

struct MetricsReport {
  int64_t num_classes = 0;
  int64_t n = 0;
  double accuracy = 0.0;
  double kappa = 0.0;
  bool kappa_degenerate = false;
  bool quadratic_kappa = false;
  // Binary only.
  bool has_binary = false;
  double auc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double threshold = 0.5;
  std::vector<std::vector<int64_t>> confusion;  // [true][pred]

  std::string key_values() const;
  static std::string csv_header();
  std::string csv_row() const;
};

// probs is row-major [n, K]. Predictions are the argmax (first index on ties). For K = 2
// the positive score is probs[:, 1], thresholded at `threshold`.
MetricsReport evaluate(std::span<const int64_t> y_true, std::span<const double> probs, int64_t num_classes,
                       double threshold = 0.5, bool quadratic_kappa = false);

// Primary model-selection metric: AUC for K = 2 (0.5 when one class is absent), kappa otherwise.
double selection_metric(std::span<const int64_t> y_true, std::span<const double> probs, int64_t num_classes);

}  // namespace mmf
