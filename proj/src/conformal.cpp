#include "pcqr/conformal.hpp"

#include "pcqr/io.hpp"
#include "pcqr/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pcqr {

ScoreKey conformity_key(const WeightedCdf& dist, double y) {
    const auto position = dist.extended(y);
    return {std::abs(0.5 - position.prob), std::abs(position.excess)};
}

double conformity_score(const ForestModel& model, const FeatureRef& x, double y) {
    return std::abs(0.5 - model.conditional(x).cdf(y));
}

ConformalScores::ConformalScores(std::vector<ScoreKey> keys) : keys_(std::move(keys)) {
    if (keys_.empty()) throw std::invalid_argument("calibration set is empty");
    std::sort(keys_.begin(), keys_.end());
    const auto tie = std::adjacent_find(keys_.begin(), keys_.end());
    if (tie != keys_.end())
        throw TieError("tied conformity scores (" + format_double(tie->score) +
                       "); add tie-breaking noise to the responses");
}

const ScoreKey& ConformalScores::order_statistic(std::size_t i) const {
    if (i < 1 || i > keys_.size()) throw std::out_of_range("order statistic index out of range");
    return keys_[i - 1];
}

Eigen::VectorXd ConformalScores::values() const {
    Eigen::VectorXd out(static_cast<Eigen::Index>(keys_.size()));
    for (std::size_t i = 0; i < keys_.size(); ++i) out(static_cast<Eigen::Index>(i)) = keys_[i].score;
    return out;
}

ConformalScores calibrate(const ForestModel& model, const LabeledData& calibration) {
    calibration.validate(1);
    std::vector<ScoreKey> keys(static_cast<std::size_t>(calibration.size()));
    parallel_for(keys.size(), [&](std::size_t i) {
        const auto row = static_cast<Eigen::Index>(i);
        const auto dist = model.conditional(calibration.features.row(row).transpose());
        keys[i] = conformity_key(dist, calibration.responses(row));
    });
    return ConformalScores(std::move(keys));
}

std::size_t order_statistic_index(std::size_t n, double delta, IntervalKind kind) {
    if (n == 0) throw std::invalid_argument("empty calibration scores");
    if (!(delta > 0.0 && delta < 1.0)) throw std::domain_error("delta must lie in (0, 1)");
    double position = (1.0 - delta) * static_cast<double>(n + 1);
    const double nearest = std::round(position);
    if (std::abs(position - nearest) <= 1e-9) position = nearest;
    const double index = kind == IntervalKind::lower_bound ? std::floor(position) : std::ceil(position);
    if (index < 1.0)
        throw std::domain_error("I- undefined: floor((1-delta)(n+1)) < 1 for delta=" + format_double(delta) +
                                ", n=" + std::to_string(n));
    if (index > static_cast<double>(n))
        throw std::domain_error("I+ undefined: delta=" + format_double(delta) + " is below 1/(n+1) for n=" +
                                std::to_string(n));
    return static_cast<std::size_t>(index);
}

std::pair<double, double> pcqr_bounds(const WeightedCdf& dist, const ScoreKey& s) {
    if (s.score < 0.5) return {dist.quantile(0.5 - s.score), dist.quantile(0.5 + s.score)};
    return {dist.support_min() - s.excess, dist.support_max() + s.excess};
}

PredictionInterval pcqr_interval(const WeightedCdf& dist, const ConformalScores& scores, double delta,
                                 IntervalKind kind) {
    const auto& s = scores.order_statistic(order_statistic_index(scores.size(), delta, kind));
    const auto [lo, hi] = pcqr_bounds(dist, s);
    return {lo, hi, kind, delta};
}

PredictionInterval pcqr_interval(const ForestModel& model, const ConformalScores& scores, const FeatureRef& x,
                                 double delta, IntervalKind kind) {
    return pcqr_interval(model.conditional(x), scores, delta, kind);
}

PredictionInterval cqr_interval(double qhat_lo, double qhat_hi, double c_delta) {
    if (qhat_lo > qhat_hi) throw std::invalid_argument("crossed quantile estimates");
    const double lo = qhat_lo - c_delta;
    const double hi = qhat_hi + c_delta;
    if (lo > hi) throw std::domain_error("correction crosses the interval endpoints");
    return {lo, hi, IntervalKind::upper_bound, 0.0};
}

void write_scores_csv(const ConformalScores& scores, const std::filesystem::path& path) {
    std::string text;
    for (const auto& key : scores.keys()) {
        text += format_double(key.score);
        text += '\n';
    }
    write_file_atomic(path, text);
}

}  // namespace pcqr
