#pragma once

#include "pcqr/conformal.hpp"
#include "pcqr/forest.hpp"

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <vector>

namespace pcqr {

/// Sorted calibration cumulative probabilities alpha_(1) <= ... <= alpha_(n),
/// alpha_i = F(y_i | x_i), each carried with its excess key.
class CalibrationAlphas {
  public:
    /// Sorts; throws TieError on exact duplicates.
    explicit CalibrationAlphas(std::vector<ExtendedProbability> alphas);
    /// Convenience for in-support values (excess zero).
    explicit CalibrationAlphas(std::span<const double> alphas);

    std::size_t size() const { return alphas_.size(); }
    std::span<const ExtendedProbability> keys() const { return alphas_; }
    Eigen::VectorXd values() const;

    friend bool operator==(const CalibrationAlphas&, const CalibrationAlphas&) = default;

  private:
    std::vector<ExtendedProbability> alphas_;
};

struct TargetInterval {
    double lower = 0.0;
    double upper = 0.0;

    /// Throws std::invalid_argument when lower > upper or either is NaN.
    /// Infinite endpoints are allowed.
    void validate() const;
    TargetInterval shifted(double offset) const { return {lower + offset, upper + offset}; }
    bool contains(double y) const { return lower <= y && y <= upper; }
};

struct RankStats {
    std::size_t rank_lo = 0;  // smallest i with alpha_(i) >= a_lo, n+1 if none
    std::size_t rank_hi = 0;  // largest i with alpha_(i) <= a_hi, 0 if none
};

struct CoverageBounds {
    double p_lower = 0.0;
    double p_upper = 0.0;
    std::size_t rank_lo = 0;
    std::size_t rank_hi = 0;
    std::size_t n = 0;
    double a_lo = 0.0;  // F(y- | x)
    double a_hi = 0.0;  // F(y+ | x)
};

CalibrationAlphas calibrate_alphas(const ForestModel& model, const LabeledData& calibration);

/// Rank statistics comparing CDF values only.
RankStats interval_rank_stats(const CalibrationAlphas& alphas, double a_lo, double a_hi);
/// Rank statistics on extended positions; this is what coverage_bounds uses.
RankStats interval_rank_stats(const CalibrationAlphas& alphas, const ExtendedProbability& lo,
                              const ExtendedProbability& hi);

/// p- = (rank_hi - rank_lo)/(n+1), p+ = p- + 2/(n+1), both clamped to [0, 1].
CoverageBounds coverage_bounds(const CalibrationAlphas& alphas, const ExtendedProbability& lo,
                               const ExtendedProbability& hi);
CoverageBounds coverage_bounds(const WeightedCdf& dist, const CalibrationAlphas& alphas,
                               const TargetInterval& target);
CoverageBounds coverage_bounds(const ForestModel& model, const CalibrationAlphas& alphas, const FeatureRef& x,
                               const TargetInterval& target);

/// Conformity scores carried by the same calibration data: S_i = |1/2 - alpha_i|.
ConformalScores scores_from_alphas(const CalibrationAlphas& alphas);

}  // namespace pcqr
