#include "mmfusion/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mmfusion/errors.hpp"

namespace mmf {

namespace {

void check_labels(std::span<const int64_t> y, int64_t k, const char* what) {
  for (auto v : y)
    if (v < 0 || v >= k)
      throw InputError(std::string(what) + ": label " + std::to_string(v) + " outside [0, " + std::to_string(k) +
                       ")");
}

std::pair<int64_t, int64_t> check_binary(std::span<const int64_t> y, size_t n_scores, const char* what) {
  if (y.size() != n_scores) throw InputError(std::string(what) + ": labels and scores differ in length");
  check_labels(y, 2, what);
  const auto pos = std::count(y.begin(), y.end(), int64_t{1});
  const auto neg = static_cast<int64_t>(y.size()) - pos;
  if (pos == 0 || neg == 0) throw InputError(std::string(what) + ": both classes must be present");
  return {pos, neg};
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

}  // namespace

double cohen_kappa(std::span<const int64_t> y_true, std::span<const int64_t> y_pred, int64_t num_classes,
                   bool quadratic, bool* degenerate) {
  if (y_true.empty()) throw InputError("cohen_kappa: empty input");
  if (y_true.size() != y_pred.size()) throw InputError("cohen_kappa: inputs differ in length");
  if (num_classes < 1) throw InputError("cohen_kappa: num_classes must be >= 1");
  check_labels(y_true, num_classes, "cohen_kappa");
  check_labels(y_pred, num_classes, "cohen_kappa");
  const auto K = static_cast<size_t>(num_classes);
  std::vector<double> conf(K * K, 0.0), rows(K, 0.0), cols(K, 0.0);
  for (size_t i = 0; i < y_true.size(); ++i) {
    conf[static_cast<size_t>(y_true[i]) * K + static_cast<size_t>(y_pred[i])] += 1.0;
    rows[static_cast<size_t>(y_true[i])] += 1.0;
    cols[static_cast<size_t>(y_pred[i])] += 1.0;
  }
  const double n = static_cast<double>(y_true.size());
  // Disagreement weights: 1 - identity for unweighted, squared distance for quadratic.
  auto w = [&](size_t i, size_t j) {
    if (!quadratic) return i == j ? 0.0 : 1.0;
    const double d = static_cast<double>(i) - static_cast<double>(j);
    return K > 1 ? d * d / static_cast<double>((K - 1) * (K - 1)) : 0.0;
  };
  double obs = 0.0, exp = 0.0;
  for (size_t i = 0; i < K; ++i)
    for (size_t j = 0; j < K; ++j) {
      obs += w(i, j) * conf[i * K + j] / n;
      exp += w(i, j) * rows[i] * cols[j] / (n * n);
    }
  if (degenerate) *degenerate = false;
  if (exp == 0.0) {
    if (degenerate) *degenerate = true;
    return obs == 0.0 ? 1.0 : 0.0;
  }
  // With p_o = 1 - obs and p_e = 1 - exp this is (p_o - p_e) / (1 - p_e).
  return 1.0 - obs / exp;
}

double auc(std::span<const int64_t> y_true, std::span<const double> scores) {
  const auto [pos, neg] = check_binary(y_true, scores.size(), "auc");
  // Rank-sum with midranks for ties.
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
    for (size_t k = i; k < j; ++k)
      if (y_true[order[k]] == 1) pos_rank_sum += midrank;
    i = j;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double auc_trapezoid(std::span<const int64_t> y_true, std::span<const double> scores) {
  const auto [pos, neg] = check_binary(y_true, scores.size(), "auc_trapezoid");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double area = 0.0;
  int64_t tp = 0, fp = 0, prev_tp = 0, prev_fp = 0;
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (y_true[order[j]] == 1 ? tp : fp) += 1;
      ++j;
    }
    area += static_cast<double>(fp - prev_fp) * static_cast<double>(tp + prev_tp) / 2.0;
    prev_tp = tp;
    prev_fp = fp;
    i = j;
  }
  return area / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::pair<double, double> sens_spec(std::span<const int64_t> y_true, std::span<const double> scores,
                                    double threshold) {
  const auto [pos, neg] = check_binary(y_true, scores.size(), "sens_spec");
  int64_t tp = 0, tn = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    if (y_true[i] == 1 && predicted) ++tp;
    if (y_true[i] == 0 && !predicted) ++tn;
  }
  return {static_cast<double>(tp) / static_cast<double>(pos), static_cast<double>(tn) / static_cast<double>(neg)};
}

double youden_threshold(std::span<const int64_t> y_true, std::span<const double> scores) {
  const auto [pos, neg] = check_binary(y_true, scores.size(), "youden_threshold");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  // Sweep thresholds upwards. J = tp/pos + tn/neg - 1 is compared exactly as tp*neg + tn*pos.
  int64_t tp = pos, tn = 0;
  int64_t best_key = -1;
  double best = scores[order.front()];
  for (size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    const int64_t key = tp * neg + tn * pos;
    if (key > best_key) {
      best_key = key;
      best = t;
    }
    for (; i < order.size() && scores[order[i]] == t; ++i) {
      if (y_true[order[i]] == 1)
        --tp;
      else
        ++tn;
    }
  }
  return best;
}

MetricsReport evaluate(std::span<const int64_t> y_true, std::span<const double> probs, int64_t num_classes,
                       double threshold, bool quadratic_kappa) {
  if (y_true.empty()) throw InputError("evaluate: empty input");
  if (num_classes < 2) throw InputError("evaluate: num_classes must be >= 2");
  if (probs.size() != y_true.size() * static_cast<size_t>(num_classes))
    throw InputError("evaluate: probabilities must be [n, K]");
  check_labels(y_true, num_classes, "evaluate");
  const auto K = static_cast<size_t>(num_classes);
  MetricsReport r;
  r.num_classes = num_classes;
  r.n = static_cast<int64_t>(y_true.size());
  r.quadratic_kappa = quadratic_kappa;
  r.confusion.assign(K, std::vector<int64_t>(K, 0));
  std::vector<int64_t> pred(y_true.size());
  std::vector<double> pos_scores;
  for (size_t i = 0; i < y_true.size(); ++i) {
    const double* row = probs.data() + i * K;
    if (K == 2) {
      pos_scores.push_back(row[1]);
      pred[i] = row[1] >= threshold ? 1 : 0;
    } else {
      pred[i] = std::max_element(row, row + K) - row;
    }
    r.confusion[static_cast<size_t>(y_true[i])][static_cast<size_t>(pred[i])] += 1;
  }
  int64_t correct = 0;
  for (size_t k = 0; k < K; ++k) correct += r.confusion[k][k];
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
  r.kappa = cohen_kappa(y_true, pred, num_classes, quadratic_kappa, &r.kappa_degenerate);
  if (K == 2) {
    r.threshold = threshold;
    const auto positives = std::count(y_true.begin(), y_true.end(), int64_t{1});
    if (positives > 0 && positives < r.n) {
      r.has_binary = true;
      r.auc = auc(y_true, pos_scores);
      std::tie(r.sensitivity, r.specificity) = sens_spec(y_true, pos_scores, threshold);
    }
  }
  return r;
}

double selection_metric(std::span<const int64_t> y_true, std::span<const double> probs, int64_t num_classes) {
  if (num_classes == 2) {
    std::vector<double> s;
    for (size_t i = 0; i < y_true.size(); ++i) s.push_back(probs[i * 2 + 1]);
    const auto positives = std::count(y_true.begin(), y_true.end(), int64_t{1});
    if (positives == 0 || positives == static_cast<int64_t>(y_true.size())) return 0.5;
    return auc(y_true, s);
  }
  return evaluate(y_true, probs, num_classes).kappa;
}

std::string MetricsReport::key_values() const {
  std::ostringstream os;
  os << "n=" << n << "\n";
  os << "classes=" << num_classes << "\n";
  os << "accuracy=" << fmt(accuracy) << "\n";
  os << (quadratic_kappa ? "kappa_quadratic=" : "kappa=") << fmt(kappa) << "\n";
  if (kappa_degenerate) os << "kappa_degenerate=1\n";
  if (has_binary) {
    os << "auc=" << fmt(auc) << "\n";
    os << "sensitivity=" << fmt(sensitivity) << "\n";
    os << "specificity=" << fmt(specificity) << "\n";
    os << "threshold=" << fmt(threshold) << "\n";
  }
  os << "confusion=";
  for (size_t i = 0; i < confusion.size(); ++i) {
    if (i) os << ';';
    for (size_t j = 0; j < confusion[i].size(); ++j) os << (j ? " " : "") << confusion[i][j];
  }
  os << "\n";
  return os.str();
}

std::string MetricsReport::csv_header() { return "n,classes,accuracy,kappa,auc,sensitivity,specificity,threshold"; }

std::string MetricsReport::csv_row() const {
  std::ostringstream os;
  os << n << ',' << num_classes << ',' << fmt(accuracy) << ',' << fmt(kappa) << ',';
  if (has_binary)
    os << fmt(auc) << ',' << fmt(sensitivity) << ',' << fmt(specificity) << ',' << fmt(threshold);
  else
    os << ",,,";
  return os.str();
}

}  // namespace mmf
