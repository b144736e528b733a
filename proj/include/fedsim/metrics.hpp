#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/nn.hpp"

namespace fedsim {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;

  static ConfusionMatrix zeros(int num_classes) {
    ConfusionMatrix m;
    m.num_classes = num_classes;
    m.counts.assign(static_cast<std::size_t>(num_classes) * num_classes, 0);
    return m;
  }

  std::int64_t& at(int true_class, int predicted) {
    return counts[static_cast<std::size_t>(true_class) * num_classes + predicted];
  }
  std::int64_t at(int true_class, int predicted) const {
    return counts[static_cast<std::size_t>(true_class) * num_classes + predicted];
  }
  std::int64_t row_sum(int true_class) const {
    std::int64_t s = 0;
    for (int p = 0; p < num_classes; ++p) s += at(true_class, p);
    return s;
  }
  std::int64_t trace() const {
    std::int64_t s = 0;
    for (int c = 0; c < num_classes; ++c) s += at(c, c);
    return s;
  }
  std::int64_t total() const {
    std::int64_t s = 0;
    for (auto v : counts) s += v;
    return s;
  }
  bool operator==(const ConfusionMatrix& o) const {
    return num_classes == o.num_classes && counts == o.counts;
  }
};

struct RoundLog {
  int round = -1;
  double top1_accuracy = 0.0;
  std::vector<double> per_class_recall;
  // false where the test set has no examples of the class (recall reported 0)
  std::vector<bool> recall_defined;
  ConfusionMatrix confusion;

  bool operator==(const RoundLog& o) const {
    return round == o.round && top1_accuracy == o.top1_accuracy &&
           per_class_recall == o.per_class_recall &&
           recall_defined == o.recall_defined && confusion == o.confusion;
  }
};

// trace/total and recall/row-sum identities; checked every time a log is built.
inline void validate_round_log(const RoundLog& log) {
  const auto total = log.confusion.total();
  if (total <= 0) throw domain_error("round log: empty confusion matrix");
  if (log.top1_accuracy !=
      static_cast<double>(log.confusion.trace()) / static_cast<double>(total))
    throw domain_error("round log: accuracy does not equal trace/total");
  for (int c = 0; c < log.confusion.num_classes; ++c) {
    const auto rs = log.confusion.row_sum(c);
    const double want =
        rs == 0 ? 0.0
                : static_cast<double>(log.confusion.at(c, c)) /
                      static_cast<double>(rs);
    if (log.per_class_recall[c] != want)
      throw domain_error("round log: recall identity broken for class " +
                         std::to_string(c));
    if (log.recall_defined[c] != (rs != 0))
      throw domain_error("round log: recall_defined flag wrong for class " +
                         std::to_string(c));
  }
}

// Argmax with ties broken toward the lowest class index.
inline int argmax_class(const float* row, int num_classes) {
  int best = 0;
  for (int k = 1; k < num_classes; ++k)
    if (row[k] > row[best]) best = k;
  return best;
}

// Scores the model on a test set: top-1 accuracy, per-class recall, confusion
// matrix. The caller fills in the round index.
inline RoundLog evaluate(const ModelParams& model, const LabeledDataset& test) {
  validate_dataset(test, "evaluate");
  if (test.empty()) throw domain_error("evaluate: empty test set");
  const int K = test.num_classes;
  RoundLog log;
  log.confusion = ConfusionMatrix::zeros(K);
  constexpr std::size_t kBatch = 256;
  std::vector<int> indices;
  for (std::size_t start = 0; start < test.size(); start += kBatch) {
    const std::size_t end = std::min(test.size(), start + kBatch);
    indices.resize(end - start);
    for (std::size_t i = start; i < end; ++i)
      indices[i - start] = static_cast<int>(i);
    Tensor features;
    std::vector<int> labels;
    batch_of(test, indices, features, labels);
    const Tensor logp = forward(model, features);
    if (logp.shape[1] != K)
      throw domain_error("evaluate: model emits " + std::to_string(logp.shape[1]) +
                         " classes, test set declares " + std::to_string(K));
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const int pred =
          argmax_class(&logp.data[i * static_cast<std::size_t>(K)], K);
      log.confusion.at(labels[i], pred) += 1;
    }
  }
  log.top1_accuracy = static_cast<double>(log.confusion.trace()) /
                      static_cast<double>(log.confusion.total());
  log.per_class_recall.resize(K);
  log.recall_defined.resize(K);
  for (int c = 0; c < K; ++c) {
    const auto rs = log.confusion.row_sum(c);
    log.recall_defined[c] = rs != 0;
    log.per_class_recall[c] =
        rs == 0 ? 0.0
                : static_cast<double>(log.confusion.at(c, c)) /
                      static_cast<double>(rs);
  }
  validate_round_log(log);
  return log;
}

struct RunSummary {
  std::vector<double> final_accuracies;  // one per seed, input order
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;             // sample std (n-1); 0 for a single run
  std::vector<double> mean_recall;       // per class, averaged across runs
};

namespace detail {

// Sum in sorted order so aggregate statistics ignore run ordering exactly.
inline double stable_mean(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

inline RunSummary summarize(const std::vector<RoundLog>& finals) {
  if (finals.empty()) throw domain_error("summarize: no runs");
  const std::size_t n = finals.size();
  const int K = finals.front().confusion.num_classes;
  RunSummary s;
  s.final_accuracies.reserve(n);
  for (const auto& log : finals) {
    if (log.confusion.num_classes != K)
      throw domain_error("summarize: runs disagree on class count");
    s.final_accuracies.push_back(log.top1_accuracy);
  }
  s.mean_accuracy = detail::stable_mean(s.final_accuracies);
  if (n >= 2) {
    std::vector<double> sq;
    sq.reserve(n);
    for (double a : s.final_accuracies) {
      const double d = a - s.mean_accuracy;
      sq.push_back(d * d);
    }
    std::sort(sq.begin(), sq.end());
    double acc = 0.0;
    for (double x : sq) acc += x;
    s.std_accuracy = std::sqrt(acc / static_cast<double>(n - 1));
  }
  s.mean_recall.resize(K);
  std::vector<double> col(n);
  for (int c = 0; c < K; ++c) {
    for (std::size_t r = 0; r < n; ++r) col[r] = finals[r].per_class_recall[c];
    s.mean_recall[c] = detail::stable_mean(col);
  }
  return s;
}

// "28.30±2.20%" given fractions in [0,1].
inline std::string format_mean_std_percent(double mean, double stddev) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f%%", mean * 100.0,
                stddev * 100.0);
  return std::string(buf);
}

inline std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", fraction * 100.0);
  return std::string(buf);
}

}  // namespace fedsim
