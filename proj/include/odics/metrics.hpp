#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "odics/error.hpp"
#include "odics/model.hpp"
#include "odics/tensor.hpp"

namespace odics {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return classes_; }
  std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * classes_ + pred]; }
  std::uint64_t& at(std::size_t gt, std::size_t pred) { return counts_[gt * classes_ + pred]; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw ConfigError("confusion matrix size mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

inline void accumulate(ConfusionMatrix& cm, const LabelTensor& pred, const LabelTensor& gt,
                       std::int32_t ignore_index) {
  if (pred.shape() != gt.shape()) throw ConfigError("prediction and ground truth shapes differ");
  const auto c = static_cast<std::int32_t>(cm.classes());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto g = gt[i];
    if (g == ignore_index) continue;
    const auto p = pred[i];
    if (g < 0 || g >= c || p < 0 || p >= c)
      throw DataError("label out of range in confusion accumulation");
    ++cm.at(static_cast<std::size_t>(g), static_cast<std::size_t>(p));
  }
}

/// IoU_c = tp / (row_c + col_c − tp); nullopt when the union is empty.
inline std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const std::size_t n = cm.classes();
  std::vector<std::optional<double>> out(n);
  for (std::size_t c = 0; c < n; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t uni = row + col - tp;
    if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

/// Mean IoU over classes with a non-empty union; 0 if none qualifies.
inline double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : per_class_iou(cm))
    if (v) {
      sum += *v;
      ++n;
    }
  return n ? sum / static_cast<double>(n) : 0.0;
}

/// Fixed evaluation set of one domain, pre-batched.
template <class T>
struct TestSet {
  std::string domain;
  std::vector<LabeledBatch<T>> chunks;
  std::size_t classes = 0;
};

template <class T>
ConfusionMatrix confusion_on(const ParamSet<T>& params, const TestSet<T>& test) {
  ConfusionMatrix cm(test.classes);
  for (const auto& chunk : test.chunks) accumulate(cm, predict(params, chunk.images), chunk.labels, chunk.ignore_index);
  return cm;
}

/// One confusion matrix over the whole test set.
template <class T>
double evaluate_domain(const ModelSnapshot<T>& snap, const TestSet<T>& test) {
  return miou(confusion_on(snap.params(), test));
}

/// R[i][j] = mIoU on domain j after finishing training on domain i.
class TransferMatrix {
 public:
  explicit TransferMatrix(std::size_t domains = 0)
      : n_(domains), values_(domains * domains, 0.0), row_filled_(domains, false) {}

  std::size_t size() const noexcept { return n_; }
  double at(std::size_t i, std::size_t j) const { return values_[i * n_ + j]; }

  void set_row(std::size_t i, const std::vector<double>& row) {
    if (i >= n_ || row.size() != n_) throw ConfigError("transfer matrix row out of range");
    for (std::size_t j = 0; j < n_; ++j) {
      if (!(row[j] >= 0.0 && row[j] <= 1.0)) throw NumericError("transfer matrix value outside [0,1]");
      values_[i * n_ + j] = row[j];
    }
    row_filled_[i] = true;
  }

  bool row_filled(std::size_t i) const { return row_filled_[i]; }
  bool complete() const {
    for (bool f : row_filled_)
      if (!f) return false;
    return true;
  }

  std::vector<std::vector<double>> rows() const {
    std::vector<std::vector<double>> out(n_, std::vector<double>(n_));
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j) out[i][j] = at(i, j);
    return out;
  }

  static TransferMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    TransferMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) m.set_row(i, rows[i]);
    return m;
  }

 private:
  std::size_t n_;
  std::vector<double> values_;
  std::vector<bool> row_filled_;
};

struct TransferStats {
  /// R[last][j] − R[j][j]; negative means forgetting. Last domain is 0.
  std::vector<double> backward;
  /// R[j][j] − R[j−1][j]; undefined for the first domain.
  std::vector<std::optional<double>> forward;
  /// forward_column[j] = R[i][j] for every i < j.
  std::vector<std::vector<double>> forward_column;
  double mean_backward = 0.0;  // over all but the last domain
  double mean_forward = 0.0;   // over all but the first domain
};

inline TransferStats transfer_stats(const TransferMatrix& r) {
  if (!r.complete()) throw ConfigError("transfer matrix is not fully populated");
  const std::size_t n = r.size();
  TransferStats s;
  s.backward.resize(n);
  s.forward.resize(n);
  s.forward_column.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    s.backward[j] = r.at(n - 1, j) - r.at(j, j);
    if (j > 0) s.forward[j] = r.at(j, j) - r.at(j - 1, j);
    for (std::size_t i = 0; i < j; ++i) s.forward_column[j].push_back(r.at(i, j));
  }
  if (n > 1) {
    for (std::size_t j = 0; j + 1 < n; ++j) s.mean_backward += s.backward[j];
    s.mean_backward /= static_cast<double>(n - 1);
    for (std::size_t j = 1; j < n; ++j) s.mean_forward += *s.forward[j];
    s.mean_forward /= static_cast<double>(n - 1);
  }
  return s;
}

}  // namespace odics
