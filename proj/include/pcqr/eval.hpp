#pragma once

#include "pcqr/conformal.hpp"
#include "pcqr/forest.hpp"
#include "pcqr/inverse.hpp"
#include "pcqr/sim.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcqr {

struct ExperimentConfig {
    std::int64_t episode_count = 10000;
    std::int64_t n_train = 2500;
    std::int64_t n_cal = 2500;
    std::int64_t n_test = 5000;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};  // one partition per seed
    double delta = 0.2;
    int ece_bins = 30;
    double target_q_lo = 0.1;
    double target_q_hi = 0.9;
    std::uint64_t dataset_seed = 20240101;
    int trace_count = 10;
    ForestConfig forest;

    void validate() const;
};

struct Partition {
    std::vector<std::size_t> train;
    std::vector<std::size_t> cal;
    std::vector<std::size_t> test;
};

/// Uniformly random disjoint split of [0, count) into the configured sizes.
Partition partition(std::size_t count, const ExperimentConfig& config, std::uint64_t seed);

/// Type-1 (inverted empirical CDF) quantile: the ceil(q N)-th smallest value,
/// and the minimum for q = 0.
double empirical_quantile(std::span<const double> values, double q);

TargetInterval empirical_target_interval(std::span<const double> final_returns, double q_lo, double q_hi);
TargetInterval empirical_target_interval(std::span<const Episode> test, double q_lo, double q_hi);

/// Fraction of test episodes whose final return lies in I+(x_0, delta).
double forward_coverage(const ForestModel& model, const ConformalScores& scores, std::span<const Episode> test,
                        double delta);

struct ReliabilityRow {
    double bin_lo = 0.0;
    double bin_hi = 0.0;
    std::size_t count = 0;
    double mean_predicted = 0.0;
    double observed_frequency = 0.0;
};

/// Equal-width binning of [0, 1]; p = 1 falls in the last bin.
class CalibrationBins {
  public:
    explicit CalibrationBins(int bins);

    void add(double prob, bool outcome);
    void merge(const CalibrationBins& other);

    std::size_t total() const { return total_; }
    /// sum_k |B_k|/N * |mean outcome - mean prob|; empty bins contribute 0.
    double ece() const;
    /// One row per bin, empty bins included with zero counts.
    std::vector<ReliabilityRow> table() const;

  private:
    std::vector<std::size_t> counts_;
    std::vector<double> prob_sums_;
    std::vector<double> outcome_sums_;
    std::size_t total_ = 0;
};

namespace detail {

template <typename P, typename O>
CalibrationBins bin_predictions(const Eigen::DenseBase<P>& probs, const Eigen::DenseBase<O>& outcomes, int bins) {
    if (probs.size() != outcomes.size()) throw std::invalid_argument("predictions and outcomes differ in length");
    CalibrationBins binned(bins);
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        const double p = static_cast<double>(probs.derived().coeff(i));
        const double o = static_cast<double>(outcomes.derived().coeff(i));
        if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("predicted probability outside [0, 1]");
        if (o != 0.0 && o != 1.0) throw std::invalid_argument("outcomes must be 0 or 1");
        binned.add(p, o == 1.0);
    }
    return binned;
}

}  // namespace detail

/// Expected calibration error over equal-width bins.
template <typename P, typename O>
double ece(const Eigen::DenseBase<P>& probs, const Eigen::DenseBase<O>& outcomes, int bins) {
    return detail::bin_predictions(probs, outcomes, bins).ece();
}

template <typename P, typename O>
std::vector<ReliabilityRow> reliability_table(const Eigen::DenseBase<P>& probs, const Eigen::DenseBase<O>& outcomes,
                                              int bins) {
    return detail::bin_predictions(probs, outcomes, bins).table();
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for a single value
};

MeanStd mean_std(std::span<const double> values);

struct PartitionResult {
    std::uint64_t seed = 0;
    TargetInterval target;
    double forward_coverage = 0.0;
    std::vector<double> ece_lower;  // per t
    std::vector<double> ece_upper;
    double pooled_ece_lower = 0.0;  // all steps binned together
    double pooled_ece_upper = 0.0;
    std::vector<double> mean_lower;  // mean p- over test episodes, per t
    std::vector<double> mean_upper;
    std::size_t final_step_converged = 0;
    std::size_t final_step_eligible = 0;
};

struct TraceRow {
    std::size_t partition = 0;
    std::int64_t episode_id = 0;
    int t = 0;
    double p_lower = 0.0;
    double p_upper = 0.0;
    bool outcome = false;
};

struct CalibrationReport {
    std::string domain;
    int horizon = 0;
    std::size_t n_cal = 0;
    int ece_bins = 0;
    double delta = 0.0;
    std::vector<PartitionResult> partitions;
    std::vector<ReliabilityRow> reliability;  // p- pooled over partitions and steps
    std::vector<TraceRow> traces;             // first partition, trace_count episodes

    MeanStd forward_coverage() const;
    MeanStd pooled_ece_lower() const;
    MeanStd pooled_ece_upper() const;
    /// Mean over t of the per-step ECE, then mean and std across partitions.
    MeanStd time_averaged_ece_lower() const;
    MeanStd time_averaged_ece_upper() const;
    /// Mean over all test episodes of all partitions at step t; std of the
    /// per-partition means.
    MeanStd mean_lower_at(int t) const;
    MeanStd mean_upper_at(int t) const;
    MeanStd ece_lower_at(int t) const;
    MeanStd ece_upper_at(int t) const;
    /// Share of eligible test episodes whose final-step p- is within
    /// 2/(n+1) of 0 or 4/(n+1) of 1.
    double final_step_convergence() const;
};

CalibrationReport run_experiment(std::span<const Episode> episodes, const DomainConfig& domain,
                                 const ExperimentConfig& config);
/// Simulates config.episode_count episodes with config.dataset_seed first.
CalibrationReport run_experiment(const DomainConfig& domain, const ExperimentConfig& config);

inline constexpr int report_schema_version = 1;

/// Writes forward_coverage.csv, ece_vs_time.csv, reliability_bins.csv,
/// traces.csv, mean_coverage_vs_time.csv and summary.txt into `dir`.
void write_report(const CalibrationReport& report, const std::filesystem::path& dir);
std::string format_summary(const CalibrationReport& report);

}  // namespace pcqr
