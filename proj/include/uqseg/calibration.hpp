// Post-hoc calibration: temperature scaling, polynomial temperature scaling
// on min-normalized logits, and temperature scaling of mask-classification
// outputs.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "uqseg/core.hpp"
#include "uqseg/metrics.hpp"

namespace uqseg {

struct TemperatureParams {
  double tau = 1.0;

  void validate() const {
    detail::require(std::isfinite(tau) && tau > 0.0, "temperature must be positive");
  }
};

/// softmax(G/tau1 + (G/tau2)^2 + (G/tau3)^3) on min-normalized logits G.
/// Disabled terms contribute nothing.
struct PolyTemperatureParams {
  std::array<double, 3> tau{1.0, 1.0, 1.0};
  std::array<bool, 3> enabled{true, false, false};

  void validate() const {
    for (int k = 0; k < 3; ++k) {
      if (!enabled[k]) continue;
      detail::require(std::isfinite(tau[k]) && tau[k] != 0.0,
                      "enabled polynomial temperatures must be finite and nonzero");
    }
  }

  double transform(double g) const {
    double z = 0.0;
    if (enabled[0]) z += g / tau[0];
    if (enabled[1]) z += (g / tau[1]) * (g / tau[1]);
    if (enabled[2]) z += (g / tau[2]) * (g / tau[2]) * (g / tau[2]);
    return z;
  }

  /// Whether transform() is nondecreasing on [0, g_max]. Its derivative is
  /// the quadratic a + b g + c g^2, so checking both ends and the vertex suffices.
  bool monotone_on(double g_max) const {
    const double a = enabled[0] ? 1.0 / tau[0] : 0.0;
    const double b = enabled[1] ? 2.0 / (tau[1] * tau[1]) : 0.0;
    const double c = enabled[2] ? 3.0 / (tau[2] * tau[2] * tau[2]) : 0.0;
    auto deriv = [&](double g) { return a + b * g + c * g * g; };
    if (deriv(0.0) < 0.0 || deriv(g_max) < 0.0) return false;
    if (c != 0.0) {
      const double vertex = -b / (2.0 * c);
      if (vertex > 0.0 && vertex < g_max && deriv(vertex) < 0.0) return false;
    }
    return true;
  }
};

/// Softmax of logits / tau.
inline ProbabilityMap apply_temperature(const LogitMap& logits, const TemperatureParams& t) {
  t.validate();
  return softmax(logits, t.tau);
}

/// Subtracts the per-pixel minimum over classes.
inline LogitMap normalize_logits(const LogitMap& logits) {
  std::vector<float> out(logits.vector());
  const std::size_t n = logits.pixels();
  for (std::size_t p = 0; p < n; ++p) {
    float m = logits.at(0, p);
    for (std::size_t c = 1; c < logits.channels(); ++c) m = std::min(m, logits.at(c, p));
    for (std::size_t c = 0; c < logits.channels(); ++c) out[c * n + p] -= m;
  }
  return LogitMap(logits.channels(), logits.height(), logits.width(), std::move(out));
}

inline ProbabilityMap apply_poly_temperature(const LogitMap& logits,
                                             const PolyTemperatureParams& params) {
  params.validate();
  const LogitMap g = normalize_logits(logits);
  const std::size_t n = g.pixels(), nc = g.channels();
  std::vector<float> out(g.size());
  std::vector<double> z(nc);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t c = 0; c < nc; ++c) z[c] = params.transform(g.at(c, p));
    softmax_inplace(z);
    for (std::size_t c = 0; c < nc; ++c) out[c * n + p] = static_cast<float>(z[c]);
  }
  return ProbabilityMap(nc, g.height(), g.width(), std::move(out));
}

// ---------------------------------------------------------------------------
// fitting

enum class CalibrationObjective { kEce, kNll };

inline CalibrationObjective parse_objective(const std::string& s) {
  if (s == "ece") return CalibrationObjective::kEce;
  if (s == "nll") return CalibrationObjective::kNll;
  throw DataError("unknown calibration objective: " + s);
}

/// Labelled validation pixels flattened to (pixel, class) rows of doubles.
class CalibrationSet {
 public:
  CalibrationSet() = default;

  void add(const LogitMap& logits, const ClassMap& gt) {
    detail::require(logits.height() == gt.height() && logits.width() == gt.width(),
                    "shape mismatch between logits and ground truth");
    if (num_classes_ == 0) num_classes_ = logits.channels();
    detail::require(logits.channels() == num_classes_, "class count differs across maps");
    for (std::size_t p = 0; p < logits.pixels(); ++p) {
      if (gt[p] >= num_classes_) continue;  // ignore and OOD labels
      for (std::size_t c = 0; c < num_classes_; ++c) logits_.push_back(logits.at(c, p));
      labels_.push_back(gt[p]);
    }
  }

  std::size_t size() const { return labels_.size(); }
  std::size_t num_classes() const { return num_classes_; }
  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(logits_).subspan(i * num_classes_, num_classes_);
  }
  int label(std::size_t i) const { return labels_[i]; }

  /// Largest min-normalized logit over all rows.
  double max_normalized_logit() const {
    double g = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
      auto r = row(i);
      const auto [lo, hi] = std::minmax_element(r.begin(), r.end());
      g = std::max(g, *hi - *lo);
    }
    return g;
  }

 private:
  std::size_t num_classes_ = 0;
  std::vector<double> logits_;
  std::vector<int> labels_;
};

/// Objective of softmax(transform(row)) over the set. transform rewrites a
/// logit row in place.
template <typename Transform>
double calibration_objective(const CalibrationSet& set, CalibrationObjective objective,
                             int num_bins, Transform&& transform) {
  detail::require(set.size() > 0, "no evaluable pixels for calibration");
  std::vector<double> z;
  BinnedCalibration bins(num_bins);
  double nll = 0.0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto r = set.row(i);
    z.assign(r.begin(), r.end());
    transform(z);
    softmax_inplace(z);
    if (objective == CalibrationObjective::kNll) {
      nll -= std::log(std::max(z[set.label(i)], 1e-300));
    } else {
      const auto best = std::max_element(z.begin(), z.end());
      bins.add(*best, best - z.begin() == set.label(i));
    }
  }
  if (objective == CalibrationObjective::kNll) return nll / static_cast<double>(set.size());
  return *bins.ece();
}

inline double temperature_objective(const CalibrationSet& set, double tau,
                                    CalibrationObjective objective, int num_bins = 15) {
  return calibration_objective(set, objective, num_bins, [tau](std::vector<double>& z) {
    for (double& v : z) v /= tau;
  });
}

inline double poly_objective(const CalibrationSet& set, const PolyTemperatureParams& p,
                             CalibrationObjective objective, int num_bins = 15) {
  return calibration_objective(set, objective, num_bins, [&p](std::vector<double>& z) {
    const double m = *std::min_element(z.begin(), z.end());
    for (double& v : z) v = p.transform(v - m);
  });
}

struct SearchOptions {
  double lo = 0.05;
  double hi = 20.0;
  int grid_points = 200;
  double tolerance = 1e-3;
};

struct SearchResult {
  double x = 0.0;
  double value = 0.0;
};

/// Log-spaced grid search followed by golden-section refinement inside the
/// bracket around the best grid point. The grid optimum is kept unless the
/// refinement strictly improves on it.
inline SearchResult minimize_1d(const std::function<double(double)>& f,
                                const SearchOptions& opt = {}) {
  const int n = std::max(opt.grid_points, 2);
  std::vector<double> grid(n);
  const double log_lo = std::log(opt.lo), log_hi = std::log(opt.hi);
  for (int i = 0; i < n; ++i) grid[i] = std::exp(log_lo + (log_hi - log_lo) * i / (n - 1));
  grid.front() = opt.lo;
  grid.back() = opt.hi;

  int best = 0;
  double best_value = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    const double v = f(grid[i]);
    if (v < best_value) {
      best_value = v;
      best = i;
    }
  }
  SearchResult result{grid[best], best_value};

  double a = grid[std::max(best - 1, 0)], b = grid[std::min(best + 1, n - 1)];
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > opt.tolerance) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(d);
    }
  }
  const double x = fc <= fd ? c : d;
  const double fx = std::min(fc, fd);
  if (fx < result.value) result = {x, fx};
  return result;
}

struct FitOptions {
  CalibrationObjective objective = CalibrationObjective::kEce;
  int num_bins = 15;
  SearchOptions search;
};

struct TemperatureFit {
  TemperatureParams params;
  double objective_before = 0.0;  // at tau = 1
  double objective_after = 0.0;
};

inline TemperatureFit fit_temperature(const CalibrationSet& set, const FitOptions& opt = {}) {
  detail::require(set.size() > 0, "no evaluable pixels for calibration");
  auto f = [&](double tau) { return temperature_objective(set, tau, opt.objective, opt.num_bins); };
  const SearchResult r = minimize_1d(f, opt.search);
  return {TemperatureParams{r.x}, f(1.0), r.value};
}

struct PolyTemperatureFit {
  PolyTemperatureParams params;
  double objective_before = 0.0;  // identity calibration
  double objective_after = 0.0;
  std::vector<double> history;    // objective after each accepted step
};

/// Coordinate descent over (tau1, tau2, tau3). The start is the best
/// single-term fit, the linear one being plain temperature scaling. Each
/// coordinate is searched with minimize_1d and any term may be switched off
/// while another stays on. A step is accepted only when it lowers the
/// objective and the transform stays monotone over the observed
/// normalized-logit range.
inline PolyTemperatureFit fit_poly_temperature(const CalibrationSet& set,
                                               const FitOptions& opt = {}, int sweeps = 3) {
  const TemperatureFit ts = fit_temperature(set, opt);
  const double g_max = set.max_normalized_logit();
  auto objective = [&](const PolyTemperatureParams& p) {
    return poly_objective(set, p, opt.objective, opt.num_bins);
  };

  PolyTemperatureFit fit;
  fit.objective_before = ts.objective_before;
  fit.params.tau = {ts.params.tau, 1.0, 1.0};
  fit.params.enabled = {true, false, false};
  double current = objective(fit.params);
  for (int k = 1; k < 3; ++k) {
    PolyTemperatureParams single;
    single.enabled = {false, false, false};
    single.enabled[k] = true;
    const SearchResult r = minimize_1d(
        [&](double tau) {
          PolyTemperatureParams p = single;
          p.tau[k] = tau;
          return objective(p);
        },
        opt.search);
    single.tau[k] = r.x;
    if (r.value < current && single.monotone_on(g_max)) {
      fit.params = single;
      current = r.value;
    }
  }
  fit.history.push_back(current);

  auto try_accept = [&](const PolyTemperatureParams& trial, double value) {
    if (!(value < current) || !trial.monotone_on(g_max)) return;
    fit.params = trial;
    current = value;
    fit.history.push_back(current);
  };

  for (int sweep = 0; sweep < sweeps; ++sweep) {
    for (int k = 0; k < 3; ++k) {
      PolyTemperatureParams trial = fit.params;
      trial.enabled[k] = true;
      const SearchResult r = minimize_1d(
          [&](double tau) {
            PolyTemperatureParams p = trial;
            p.tau[k] = tau;
            return objective(p);
          },
          opt.search);
      trial.tau[k] = r.x;
      try_accept(trial, r.value);

      const int on = fit.params.enabled[0] + fit.params.enabled[1] + fit.params.enabled[2];
      if (fit.params.enabled[k] && on > 1) {
        PolyTemperatureParams off = fit.params;
        off.enabled[k] = false;
        try_accept(off, objective(off));
      }
    }
    if (!fit.params.monotone_on(g_max))
      throw Error("polynomial temperature lost monotonicity during fitting");
  }
  fit.objective_after = current;
  return fit;
}

// ---------------------------------------------------------------------------
// mask-classification outputs

/// N query class-score rows over num_classes, and N mask-logit planes of H x W.
struct MaskFormerOutput {
  std::size_t num_queries = 0;
  std::size_t num_classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> class_scores;  // N x num_classes
  std::vector<double> mask_logits;   // N x (H * W)

  void validate() const {
    detail::require(num_queries >= 1, "mask output needs at least one query");
    detail::require(num_classes >= 1, "mask output needs at least one class");
    detail::require(class_scores.size() == num_queries * num_classes,
                    "class score matrix does not match N x num_classes");
    detail::require(mask_logits.size() == num_queries * height * width,
                    "mask logits do not match N x H x W");
    for (double v : class_scores) detail::require(std::isfinite(v), "non-finite class score");
    for (double v : mask_logits) detail::require(std::isfinite(v), "non-finite mask logit");
  }
};

struct MaskPrediction {
  ClassMap prediction;
  ConfidenceMap confidence;
};

/// Per-pixel class scores softmax(C / t)^T . sigmoid(M); softmax runs over the
/// classes of each query row. Confidence is the max score, prediction its argmax.
/// With several queries a class score can pass 1, so confidence is capped there.
inline MaskPrediction maskformer_output(const MaskFormerOutput& out,
                                        const TemperatureParams& t = {}) {
  out.validate();
  t.validate();
  detail::require(out.num_classes < kIgnoreId, "too many classes for an 8-bit class map");
  const std::size_t nq = out.num_queries, nc = out.num_classes;
  const std::size_t npix = out.height * out.width;
  std::vector<double> probs(nq * nc);
  std::vector<double> row(nc);
  for (std::size_t q = 0; q < nq; ++q) {
    for (std::size_t c = 0; c < nc; ++c) row[c] = out.class_scores[q * nc + c] / t.tau;
    softmax_inplace(row);
    std::copy(row.begin(), row.end(), probs.begin() + q * nc);
  }
  std::vector<double> sig(nq);
  std::vector<double> scores(nc);
  std::vector<std::uint8_t> pred(npix);
  std::vector<float> conf(npix);
  for (std::size_t p = 0; p < npix; ++p) {
    for (std::size_t q = 0; q < nq; ++q)
      sig[q] = 1.0 / (1.0 + std::exp(-out.mask_logits[q * npix + p]));
    std::fill(scores.begin(), scores.end(), 0.0);
    for (std::size_t q = 0; q < nq; ++q)
      for (std::size_t c = 0; c < nc; ++c) scores[c] += probs[q * nc + c] * sig[q];
    const auto best = std::max_element(scores.begin(), scores.end());
    pred[p] = static_cast<std::uint8_t>(best - scores.begin());
    conf[p] = static_cast<float>(std::min(*best, 1.0));
  }
  return {ClassMap(out.height, out.width, static_cast<int>(nc), std::move(pred)),
          ConfidenceMap(out.height, out.width, std::move(conf))};
}

}  // namespace uqseg
