// Segmentation and uncertainty metrics: mIoU, ECE, AUROC, AUPR, FPR at 95% TPR,
// and dataset-level aggregation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "uqseg/core.hpp"
#include "uqseg/io.hpp"

namespace uqseg {

/// Square count matrix indexed (gt, pred).
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int num_classes)
      : n_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {}

  int num_classes() const { return n_; }
  std::uint64_t& operator()(int gt, int pred) { return counts_[gt * n_ + pred]; }
  std::uint64_t operator()(int gt, int pred) const { return counts_[gt * n_ + pred]; }

  std::uint64_t total() const {
    return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    detail::require(o.n_ == n_, "confusion matrix class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  int n_ = 0;
  std::vector<std::uint64_t> counts_;
};

/// Counts (gt, pred) pairs over pixels whose gt is neither ignore nor OOD.
inline ConfusionMatrix confusion_matrix(const ClassMap& pred, const ClassMap& gt,
                                        const ClassIdSet& ood_ids = {kIgnoreId}) {
  detail::require(pred.same_shape(gt), "shape mismatch between prediction and ground truth");
  detail::require(pred.num_classes() == gt.num_classes(), "num_classes mismatch");
  ConfusionMatrix cm(gt.num_classes());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!is_labelled(gt[i], ood_ids)) continue;
    detail::require(pred[i] != kIgnoreId,
                    "prediction holds the ignore id at a labelled pixel");
    ++cm(gt[i], pred[i]);
  }
  return cm;
}

/// Per-class IoU; nullopt for classes without support (TP + FP + FN == 0).
inline std::vector<std::optional<double>> per_class_iou(const ConfusionMatrix& cm) {
  const int n = cm.num_classes();
  std::vector<std::optional<double>> iou(n);
  for (int c = 0; c < n; ++c) {
    std::uint64_t tp = cm(c, c), fp = 0, fn = 0;
    for (int k = 0; k < n; ++k) {
      if (k == c) continue;
      fp += cm(k, c);
      fn += cm(c, k);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom > 0) iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return iou;
}

inline std::optional<double> miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int count = 0;
  for (const auto& v : per_class_iou(cm)) {
    if (!v) continue;
    sum += *v;
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

// ---------------------------------------------------------------------------
// calibration error

/// Equal-width reliability bins over [0, 1]; half-open except the last bin.
class BinnedCalibration {
 public:
  struct Bin {
    std::uint64_t count = 0;
    double confidence_sum = 0.0;
    std::uint64_t correct = 0;
  };

  explicit BinnedCalibration(int num_bins = 15) : bins_(num_bins) {
    detail::require(num_bins >= 1, "num_bins must be positive");
  }

  int num_bins() const { return static_cast<int>(bins_.size()); }

  int bin_index(double confidence) const {
    const int b = static_cast<int>(std::floor(confidence * num_bins()));
    return std::clamp(b, 0, num_bins() - 1);
  }

  void add(double confidence, bool correct) {
    Bin& bin = bins_[bin_index(confidence)];
    ++bin.count;
    bin.confidence_sum += confidence;
    bin.correct += correct ? 1 : 0;
  }

  BinnedCalibration& operator+=(const BinnedCalibration& o) {
    detail::require(o.bins_.size() == bins_.size(), "bin count mismatch");
    for (std::size_t k = 0; k < bins_.size(); ++k) {
      bins_[k].count += o.bins_[k].count;
      bins_[k].confidence_sum += o.bins_[k].confidence_sum;
      bins_[k].correct += o.bins_[k].correct;
    }
    return *this;
  }

  const Bin& bin(int k) const { return bins_[k]; }
  double mean_confidence(int k) const {
    return bins_[k].count ? bins_[k].confidence_sum / bins_[k].count : 0.0;
  }
  double mean_accuracy(int k) const {
    return bins_[k].count ? static_cast<double>(bins_[k].correct) / bins_[k].count : 0.0;
  }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (const auto& b : bins_) n += b.count;
    return n;
  }

  /// sum_k (n_k / n) |acc_k - conf_k|; nullopt when no pixel was binned.
  std::optional<double> ece() const {
    const std::uint64_t n = total();
    if (n == 0) return std::nullopt;
    double e = 0.0;
    for (int k = 0; k < num_bins(); ++k) {
      if (bins_[k].count == 0) continue;
      e += static_cast<double>(bins_[k].count) / static_cast<double>(n) *
           std::abs(mean_accuracy(k) - mean_confidence(k));
    }
    return e;
  }

 private:
  std::vector<Bin> bins_;
};

inline BinnedCalibration calibration_bins(const ConfidenceMap& conf, const ClassMap& pred,
                                          const ClassMap& gt, int num_bins = 15,
                                          const ClassIdSet& ood_ids = {kIgnoreId}) {
  detail::require(conf.same_shape(gt) && pred.same_shape(gt),
                  "shape mismatch between confidence, prediction and ground truth");
  BinnedCalibration bins(num_bins);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!is_labelled(gt[i], ood_ids)) continue;
    bins.add(conf[i], pred[i] == gt[i]);
  }
  return bins;
}

inline std::optional<double> ece(const ConfidenceMap& conf, const ClassMap& pred,
                                 const ClassMap& gt, int num_bins = 15,
                                 const ClassIdSet& ood_ids = {kIgnoreId}) {
  return calibration_bins(conf, pred, gt, num_bins, ood_ids).ece();
}

// ---------------------------------------------------------------------------
// OOD detection: positives are OOD pixels, higher score = more likely OOD.

namespace detail {

struct LabelledScore {
  double score;
  bool positive;
};

inline std::vector<LabelledScore> zip_scores(std::span<const double> scores,
                                             std::span<const std::uint8_t> positives) {
  require(scores.size() == positives.size(), "score and label lengths differ");
  std::vector<LabelledScore> v(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) v[i] = {scores[i], positives[i] != 0};
  return v;
}

/// Groups of equal score in descending order, as (positives, negatives) counts.
struct TieGroup {
  std::uint64_t pos = 0;
  std::uint64_t neg = 0;
};

inline std::vector<TieGroup> descending_groups(std::span<const double> scores,
                                               std::span<const std::uint8_t> positives) {
  auto v = zip_scores(scores, positives);
  std::sort(v.begin(), v.end(),
            [](const LabelledScore& a, const LabelledScore& b) { return a.score > b.score; });
  std::vector<TieGroup> groups;
  for (std::size_t i = 0; i < v.size();) {
    TieGroup g;
    std::size_t j = i;
    for (; j < v.size() && v[j].score == v[i].score; ++j) (v[j].positive ? g.pos : g.neg)++;
    groups.push_back(g);
    i = j;
  }
  return groups;
}

}  // namespace detail

/// Area under the ROC curve as the Mann-Whitney statistic
/// P(s_pos > s_neg) + P(s_pos == s_neg) / 2.
inline std::optional<double> auroc(std::span<const double> scores,
                                   std::span<const std::uint8_t> positives) {
  const auto groups = detail::descending_groups(scores, positives);
  std::uint64_t total_pos = 0, total_neg = 0;
  for (const auto& g : groups) {
    total_pos += g.pos;
    total_neg += g.neg;
  }
  if (total_pos == 0 || total_neg == 0) return std::nullopt;
  // Twice the U statistic, kept integral until the final division.
  double twice_u = 0.0;
  std::uint64_t neg_below = total_neg;
  for (const auto& g : groups) {
    neg_below -= g.neg;
    twice_u += 2.0 * static_cast<double>(g.pos) * static_cast<double>(neg_below) +
               static_cast<double>(g.pos) * static_cast<double>(g.neg);
  }
  return twice_u / (2.0 * static_cast<double>(total_pos) * static_cast<double>(total_neg));
}

/// Step-wise average precision over descending distinct thresholds.
inline std::optional<double> aupr(std::span<const double> scores,
                                  std::span<const std::uint8_t> positives) {
  const auto groups = detail::descending_groups(scores, positives);
  std::uint64_t total_pos = 0;
  for (const auto& g : groups) total_pos += g.pos;
  if (total_pos == 0) return std::nullopt;
  double ap = 0.0, prev_recall = 0.0;
  std::uint64_t tp = 0, fp = 0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    const double recall = static_cast<double>(tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

/// False-positive rate at the highest observed threshold reaching TPR >= 0.95.
/// A pixel is flagged when its score is >= the threshold.
inline std::optional<double> fpr_at_95_tpr(std::span<const double> scores,
                                           std::span<const std::uint8_t> positives) {
  const auto groups = detail::descending_groups(scores, positives);
  std::uint64_t total_pos = 0, total_neg = 0;
  for (const auto& g : groups) {
    total_pos += g.pos;
    total_neg += g.neg;
  }
  if (total_pos == 0 || total_neg == 0) return std::nullopt;
  std::uint64_t tp = 0, fp = 0;
  for (const auto& g : groups) {
    tp += g.pos;
    fp += g.neg;
    if (100 * tp >= 95 * total_pos) break;
  }
  return static_cast<double>(fp) / static_cast<double>(total_neg);
}

/// OOD score samples of one image: score = 1 - confidence; positives are
/// gt in ood_ids. Ignore pixels that are not OOD are dropped.
struct OodSamples {
  std::vector<double> scores;
  std::vector<std::uint8_t> positives;

  void append(const OodSamples& o) {
    scores.insert(scores.end(), o.scores.begin(), o.scores.end());
    positives.insert(positives.end(), o.positives.begin(), o.positives.end());
  }
};

inline OodSamples ood_samples(const ConfidenceMap& conf, const ClassMap& gt,
                              const ClassIdSet& ood_ids = {kIgnoreId}) {
  detail::require(conf.same_shape(gt), "shape mismatch between confidence and ground truth");
  OodSamples s;
  s.scores.reserve(gt.size());
  s.positives.reserve(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool ood = ood_ids.contains(gt[i]);
    if (!ood && gt[i] == kIgnoreId) continue;
    s.scores.push_back(1.0 - static_cast<double>(conf[i]));
    s.positives.push_back(ood ? 1 : 0);
  }
  return s;
}

// ---------------------------------------------------------------------------
// dataset evaluation

enum class Aggregation { kGlobal, kPerImage };

struct EvalConfig {
  Aggregation aggregation = Aggregation::kGlobal;
  int num_bins = 15;
  unsigned num_threads = 1;
};

struct PixelCounts {
  std::uint64_t total = 0;
  std::uint64_t labelled = 0;
  std::uint64_t ood = 0;
  std::uint64_t ignored = 0;
};

/// Metrics in the column order mAUROC, mAUPR, mFPR, mECE, mIoU.
/// nullopt marks an undefined metric.
struct EvalReport {
  std::optional<double> mauroc;
  std::optional<double> maupr;
  std::optional<double> mfpr;
  std::optional<double> mece;
  std::optional<double> miou;
  std::vector<std::optional<double>> per_class_iou;
  PixelCounts pixel_counts;
  std::size_t num_images = 0;
  Aggregation aggregation = Aggregation::kGlobal;
};

/// Everything one record contributes; merging is done by record index.
struct RecordStats {
  ConfusionMatrix confusion;
  BinnedCalibration bins;
  OodSamples samples;
  PixelCounts counts;
};

inline RecordStats record_stats(const ClassMap& gt, const ClassMap& pred,
                                const ConfidenceMap& conf, int num_bins,
                                const ClassIdSet& ood_ids) {
  RecordStats s{confusion_matrix(pred, gt, ood_ids),
                calibration_bins(conf, pred, gt, num_bins, ood_ids),
                ood_samples(conf, gt, ood_ids),
                {}};
  s.counts.total = gt.size();
  for (std::uint8_t g : gt.values()) {
    if (ood_ids.contains(g)) ++s.counts.ood;
    else if (g == kIgnoreId) ++s.counts.ignored;
    else ++s.counts.labelled;
  }
  return s;
}

/// Error raised while loading or evaluating one manifest record.
class RecordError : public DataError {
 public:
  RecordError(std::size_t index, const std::string& what)
      : DataError("record " + std::to_string(index) + ": " + what), index_(index) {}
  std::size_t index() const { return index_; }

 private:
  std::size_t index_;
};

inline RecordStats load_record_stats(const ManifestRecord& r, int num_classes,
                                     int num_bins, const ClassIdSet& ood_ids) {
  const ClassMap gt = load_class_map(r.gt, num_classes);
  const ClassMap pred = load_class_map(r.pred, num_classes);
  const ConfidenceMap conf = load_confidence(r.conf);
  return record_stats(gt, pred, conf, num_bins, ood_ids);
}

inline void accumulate_metrics(EvalReport& report, const RecordStats& s) {
  report.miou = miou(s.confusion);
  report.per_class_iou = per_class_iou(s.confusion);
  report.mece = s.bins.ece();
  report.mauroc = auroc(s.samples.scores, s.samples.positives);
  report.maupr = aupr(s.samples.scores, s.samples.positives);
  report.mfpr = fpr_at_95_tpr(s.samples.scores, s.samples.positives);
}

namespace detail {

struct RunningMean {
  double sum = 0.0;
  int count = 0;
  void add(const std::optional<double>& v) {
    if (!v) return;
    sum += *v;
    ++count;
  }
  std::optional<double> value() const {
    return count ? std::optional<double>(sum / count) : std::nullopt;
  }
};

/// Runs fn(i) for i in [0, n) on up to num_threads workers; strided split.
template <typename Fn>
void parallel_for(std::size_t n, unsigned num_threads, Fn&& fn) {
  const unsigned workers = std::max(1u, std::min<unsigned>(num_threads, static_cast<unsigned>(n)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Merges per-record statistics in record order. `global` pools all pixels;
/// `per-image` averages the defined per-record values.
inline EvalReport aggregate(const std::vector<RecordStats>& stats, int num_classes,
                            int num_bins, Aggregation mode) {
  EvalReport report;
  report.aggregation = mode;
  report.num_images = stats.size();
  ConfusionMatrix cm(num_classes);
  for (const auto& s : stats) {
    cm += s.confusion;
    report.pixel_counts.total += s.counts.total;
    report.pixel_counts.labelled += s.counts.labelled;
    report.pixel_counts.ood += s.counts.ood;
    report.pixel_counts.ignored += s.counts.ignored;
  }
  if (mode == Aggregation::kGlobal) {
    RecordStats pooled{cm, BinnedCalibration(num_bins), {}, {}};
    for (const auto& s : stats) {
      pooled.bins += s.bins;
      pooled.samples.append(s.samples);
    }
    accumulate_metrics(report, pooled);
    return report;
  }
  detail::RunningMean m_iou, m_ece, m_auroc, m_aupr, m_fpr;
  for (const auto& s : stats) {
    m_iou.add(miou(s.confusion));
    m_ece.add(s.bins.ece());
    m_auroc.add(auroc(s.samples.scores, s.samples.positives));
    m_aupr.add(aupr(s.samples.scores, s.samples.positives));
    m_fpr.add(fpr_at_95_tpr(s.samples.scores, s.samples.positives));
  }
  report.miou = m_iou.value();
  report.mece = m_ece.value();
  report.mauroc = m_auroc.value();
  report.maupr = m_aupr.value();
  report.mfpr = m_fpr.value();
  // Per-class IoU is always reported from the pooled confusion matrix.
  report.per_class_iou = per_class_iou(cm);
  return report;
}

/// Loads every record (in parallel when configured) and aggregates.
/// Load failures are collected and rethrown with their record indices.
inline EvalReport evaluate_dataset(const DatasetManifest& manifest,
                                   const EvalConfig& cfg = {}) {
  if (manifest.records.empty()) throw DataError("empty manifest");
  const std::size_t n = manifest.records.size();
  std::vector<std::optional<RecordStats>> stats(n);
  std::vector<std::string> failures(n);
  detail::parallel_for(n, cfg.num_threads, [&](std::size_t i) {
    try {
      stats[i] = load_record_stats(manifest.records[i], manifest.num_classes,
                                   cfg.num_bins, manifest.ood_ids);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  std::string message;
  for (std::size_t i = 0; i < n; ++i) {
    if (failures[i].empty()) continue;
    if (!message.empty()) message += "\n";
    message += RecordError(i, failures[i]).what();
  }
  if (!message.empty()) throw DataError(message);
  std::vector<RecordStats> merged;
  merged.reserve(n);
  for (auto& s : stats) merged.push_back(std::move(*s));
  return aggregate(merged, manifest.num_classes, cfg.num_bins, cfg.aggregation);
}

}  // namespace uqseg
