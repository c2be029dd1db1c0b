#include "pcqr/inverse.hpp"

#include "pcqr/io.hpp"
#include "pcqr/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pcqr {

namespace {

std::vector<ExtendedProbability> to_keys(std::span<const double> alphas) {
    std::vector<ExtendedProbability> keys;
    keys.reserve(alphas.size());
    for (double a : alphas) keys.push_back({a, 0.0});
    return keys;
}

}  // namespace

CalibrationAlphas::CalibrationAlphas(std::vector<ExtendedProbability> alphas) : alphas_(std::move(alphas)) {
    if (alphas_.empty()) throw std::invalid_argument("calibration set is empty");
    for (const auto& a : alphas_)
        if (!(a.prob >= 0.0 && a.prob <= 1.0) || std::isnan(a.excess))
            throw std::invalid_argument("calibration probability outside [0, 1]");
    std::sort(alphas_.begin(), alphas_.end());
    const auto tie = std::adjacent_find(alphas_.begin(), alphas_.end());
    if (tie != alphas_.end())
        throw TieError("tied calibration probabilities (" + format_double(tie->prob) +
                       "); add tie-breaking noise to the responses");
}

CalibrationAlphas::CalibrationAlphas(std::span<const double> alphas) : CalibrationAlphas(to_keys(alphas)) {}

Eigen::VectorXd CalibrationAlphas::values() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(alphas_.size()));
    for (std::size_t i = 0; i < alphas_.size(); ++i) out(static_cast<Eigen::Index>(i)) = alphas_[i].prob;
    return out;
}

void TargetInterval::validate() const {
    if (std::isnan(lower) || std::isnan(upper)) throw std::invalid_argument("target interval endpoint is NaN");
    if (lower > upper) throw std::invalid_argument("target interval has y- > y+");
}

CalibrationAlphas calibrate_alphas(const ForestModel& model, const LabeledData& calibration) {
    calibration.validate(1);
    std::vector<ExtendedProbability> keys(static_cast<std::size_t>(calibration.size()));
    parallel_for(keys.size(), [&](std::size_t i) {
        const auto row = static_cast<Eigen::Index>(i);
        keys[i] = model.conditional(calibration.features.row(row).transpose()).extended(calibration.responses(row));
    });
    return CalibrationAlphas(std::move(keys));
}

RankStats interval_rank_stats(const CalibrationAlphas& alphas, double a_lo, double a_hi) {
    const auto keys = alphas.keys();
    const auto first_at_least =
        std::partition_point(keys.begin(), keys.end(), [&](const ExtendedProbability& a) { return a.prob < a_lo; });
    const auto first_above =
        std::partition_point(keys.begin(), keys.end(), [&](const ExtendedProbability& a) { return a.prob <= a_hi; });
    return {static_cast<std::size_t>(first_at_least - keys.begin()) + 1,
            static_cast<std::size_t>(first_above - keys.begin())};
}

RankStats interval_rank_stats(const CalibrationAlphas& alphas, const ExtendedProbability& lo,
                              const ExtendedProbability& hi) {
    const auto keys = alphas.keys();
    const auto first_at_least = std::lower_bound(keys.begin(), keys.end(), lo);
    const auto first_above = std::upper_bound(keys.begin(), keys.end(), hi);
    return {static_cast<std::size_t>(first_at_least - keys.begin()) + 1,
            static_cast<std::size_t>(first_above - keys.begin())};
}

CoverageBounds coverage_bounds(const CalibrationAlphas& alphas, const ExtendedProbability& lo,
                               const ExtendedProbability& hi) {
    if (hi < lo) throw std::invalid_argument("target interval has y- > y+");
    const auto ranks = interval_rank_stats(alphas, lo, hi);
    const double denominator = static_cast<double>(alphas.size() + 1);
    const double spread = static_cast<double>(ranks.rank_hi) - static_cast<double>(ranks.rank_lo);
    CoverageBounds bounds;
    bounds.p_lower = std::clamp(spread / denominator, 0.0, 1.0);
    bounds.p_upper = std::clamp((spread + 2.0) / denominator, 0.0, 1.0);
    bounds.rank_lo = ranks.rank_lo;
    bounds.rank_hi = ranks.rank_hi;
    bounds.n = alphas.size();
    bounds.a_lo = lo.prob;
    bounds.a_hi = hi.prob;
    return bounds;
}

CoverageBounds coverage_bounds(const WeightedCdf& dist, const CalibrationAlphas& alphas,
                               const TargetInterval& target) {
    target.validate();
    return coverage_bounds(alphas, dist.extended(target.lower), dist.extended(target.upper));
}

CoverageBounds coverage_bounds(const ForestModel& model, const CalibrationAlphas& alphas, const FeatureRef& x,
                               const TargetInterval& target) {
    target.validate();
    return coverage_bounds(model.conditional(x), alphas, target);
}

ConformalScores scores_from_alphas(const CalibrationAlphas& alphas) {
    std::vector<ScoreKey> keys;
    keys.reserve(alphas.size());
    for (const auto& a : alphas.keys()) keys.push_back({std::abs(0.5 - a.prob), std::abs(a.excess)});
    return ConformalScores(std::move(keys));
}

}  // namespace pcqr
