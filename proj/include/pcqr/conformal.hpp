#pragma once

#include "pcqr/forest.hpp"

#include <Eigen/Core>

#include <compare>
#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace pcqr {

/// Raised when calibration statistics contain exact duplicates, which means
/// the tie-breaking noise was not applied upstream.
class TieError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Conformity score |1/2 - F(y|x)| with the distance outside the weighted
/// support as a secondary key. The secondary key only matters for scores of
/// exactly 1/2, where the CDF has saturated.
struct ScoreKey {
    double score = 0.0;
    double excess = 0.0;

    friend auto operator<=>(const ScoreKey&, const ScoreKey&) = default;
};

ScoreKey conformity_key(const WeightedCdf& dist, double y);

/// |1/2 - F(y|x)|, in [0, 1/2].
double conformity_score(const ForestModel& model, const FeatureRef& x, double y);

/// Sorted calibration conformity scores S_(1) <= ... <= S_(n).
class ConformalScores {
  public:
    /// Sorts the keys and throws TieError on exact duplicates.
    explicit ConformalScores(std::vector<ScoreKey> keys);

    std::size_t size() const { return keys_.size(); }
    /// 1-based order statistic.
    const ScoreKey& order_statistic(std::size_t i) const;
    std::span<const ScoreKey> keys() const { return keys_; }
    Eigen::VectorXd values() const;

  private:
    std::vector<ScoreKey> keys_;
};

ConformalScores calibrate(const ForestModel& model, const LabeledData& calibration);

enum class IntervalKind { lower_bound, upper_bound };

struct PredictionInterval {
    double lo = 0.0;
    double hi = 0.0;
    IntervalKind kind = IntervalKind::upper_bound;
    double delta = 0.0;

    bool contains(double y) const { return lo <= y && y <= hi; }
};

/// 1-based order-statistic index: floor((1-delta)(n+1)) for I-,
/// ceil((1-delta)(n+1)) for I+. Products within 1e-9 of an integer are
/// snapped to it. Throws std::domain_error when the index falls outside
/// [1, n], i.e. where the interval is undefined.
std::size_t order_statistic_index(std::size_t n, double delta, IntervalKind kind);

/// The interval [Q(1/2 - s), Q(1/2 + s)] for a selected score key. A
/// saturated score (1/2) widens the support by the key's excess, which keeps
/// y in PCQR(x, s) equivalent to conformity_key(x, y) <= s.
std::pair<double, double> pcqr_bounds(const WeightedCdf& dist, const ScoreKey& s);

PredictionInterval pcqr_interval(const WeightedCdf& dist, const ConformalScores& scores, double delta,
                                 IntervalKind kind);
PredictionInterval pcqr_interval(const ForestModel& model, const ConformalScores& scores, const FeatureRef& x,
                                 double delta, IntervalKind kind);

/// Quantile-space correction [qhat_lo - c, qhat_hi + c]. Rejects crossed
/// inputs and corrections that cross the endpoints.
PredictionInterval cqr_interval(double qhat_lo, double qhat_hi, double c_delta);

/// One score per line, ascending.
void write_scores_csv(const ConformalScores& scores, const std::filesystem::path& path);

}  // namespace pcqr
