#include "pcqr/eval.hpp"

#include "pcqr/io.hpp"
#include "pcqr/monitor.hpp"
#include "pcqr/parallel.hpp"
#include "pcqr/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pcqr {

void ExperimentConfig::validate() const {
    if (n_train < 2 || n_cal < 1 || n_test < 1) throw std::invalid_argument("partition sizes are too small");
    if (n_train + n_cal + n_test != episode_count)
        throw std::invalid_argument("n_train + n_cal + n_test must equal episode_count");
    if (seeds.empty()) throw std::invalid_argument("need at least one partition seed");
    if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must lie in (0, 1)");
    if (ece_bins < 1) throw std::invalid_argument("ece_bins must be >= 1");
    if (!(0.0 <= target_q_lo && target_q_lo <= target_q_hi && target_q_hi <= 1.0))
        throw std::invalid_argument("target quantiles must satisfy 0 <= q_lo <= q_hi <= 1");
    if (trace_count < 0) throw std::invalid_argument("trace_count must be nonnegative");
    forest.validate();
}

Partition partition(std::size_t count, const ExperimentConfig& config, std::uint64_t seed) {
    if (static_cast<std::int64_t>(count) != config.episode_count)
        throw std::invalid_argument("have " + std::to_string(count) + " episodes, config expects " +
                                    std::to_string(config.episode_count));
    config.validate();
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0x70617274ULL));
    for (std::size_t i = count - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);

    const auto train_end = static_cast<std::ptrdiff_t>(config.n_train);
    const auto cal_end = train_end + static_cast<std::ptrdiff_t>(config.n_cal);
    return {{order.begin(), order.begin() + train_end},
            {order.begin() + train_end, order.begin() + cal_end},
            {order.begin() + cal_end, order.end()}};
}

double empirical_quantile(std::span<const double> values, double q) {
    if (values.empty()) throw std::invalid_argument("empirical quantile of an empty set");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("quantile level outside [0, 1]");
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    double position = q * static_cast<double>(sorted.size());
    if (std::abs(position - std::round(position)) <= 1e-9) position = std::round(position);
    const auto rank = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(position)));
    return sorted[std::min(rank, sorted.size()) - 1];
}

TargetInterval empirical_target_interval(std::span<const double> final_returns, double q_lo, double q_hi) {
    if (q_lo > q_hi) throw std::invalid_argument("q_lo must not exceed q_hi");
    return {empirical_quantile(final_returns, q_lo), empirical_quantile(final_returns, q_hi)};
}

TargetInterval empirical_target_interval(std::span<const Episode> test, double q_lo, double q_hi) {
    std::vector<double> returns;
    returns.reserve(test.size());
    for (const auto& e : test) returns.push_back(e.final_return());
    return empirical_target_interval(returns, q_lo, q_hi);
}

double forward_coverage(const ForestModel& model, const ConformalScores& scores, std::span<const Episode> test,
                        double delta) {
    if (test.empty()) throw std::invalid_argument("empty test set");
    std::vector<char> covered(test.size());
    parallel_for(test.size(), [&](std::size_t i) {
        const auto interval =
            pcqr_interval(model, scores, test[i].features.row(0).transpose(), delta, IntervalKind::upper_bound);
        covered[i] = interval.contains(test[i].reward_to_go(0)) ? 1 : 0;
    });
    return static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / static_cast<double>(test.size());
}

// ---------------------------------------------------------------------------
// Calibration bins

CalibrationBins::CalibrationBins(int bins) {
    if (bins < 1) throw std::invalid_argument("bin count must be >= 1");
    counts_.assign(static_cast<std::size_t>(bins), 0);
    prob_sums_.assign(static_cast<std::size_t>(bins), 0.0);
    outcome_sums_.assign(static_cast<std::size_t>(bins), 0.0);
}

void CalibrationBins::add(double prob, bool outcome) {
    const auto bins = counts_.size();
    const auto k = std::min(bins - 1, static_cast<std::size_t>(prob * static_cast<double>(bins)));
    ++counts_[k];
    prob_sums_[k] += prob;
    outcome_sums_[k] += outcome ? 1.0 : 0.0;
    ++total_;
}

void CalibrationBins::merge(const CalibrationBins& other) {
    if (other.counts_.size() != counts_.size()) throw std::invalid_argument("bin counts differ");
    for (std::size_t k = 0; k < counts_.size(); ++k) {
        counts_[k] += other.counts_[k];
        prob_sums_[k] += other.prob_sums_[k];
        outcome_sums_[k] += other.outcome_sums_[k];
    }
    total_ += other.total_;
}

double CalibrationBins::ece() const {
    if (total_ == 0) return 0.0;
    double sum = 0.0;
    for (std::size_t k = 0; k < counts_.size(); ++k)
        if (counts_[k] > 0) sum += std::abs(outcome_sums_[k] - prob_sums_[k]);
    return sum / static_cast<double>(total_);
}

std::vector<ReliabilityRow> CalibrationBins::table() const {
    std::vector<ReliabilityRow> rows;
    const double width = 1.0 / static_cast<double>(counts_.size());
    for (std::size_t k = 0; k < counts_.size(); ++k) {
        ReliabilityRow row;
        row.bin_lo = static_cast<double>(k) * width;
        row.bin_hi = k + 1 == counts_.size() ? 1.0 : static_cast<double>(k + 1) * width;
        row.count = counts_[k];
        if (counts_[k] > 0) {
            row.mean_predicted = prob_sums_[k] / static_cast<double>(counts_[k]);
            row.observed_frequency = outcome_sums_[k] / static_cast<double>(counts_[k]);
        }
        rows.push_back(row);
    }
    return rows;
}

MeanStd mean_std(std::span<const double> values) {
    if (values.empty()) return {};
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
    if (values.size() == 1) return {mean, 0.0};
    double squares = 0.0;
    for (double v : values) squares += (v - mean) * (v - mean);
    return {mean, std::sqrt(squares / static_cast<double>(values.size() - 1))};
}

// ---------------------------------------------------------------------------
// Report accessors

namespace {

template <typename Getter>
MeanStd across_partitions(const std::vector<PartitionResult>& partitions, Getter get) {
    std::vector<double> values;
    for (const auto& p : partitions) values.push_back(get(p));
    return mean_std(values);
}

double average(const std::vector<double>& values) {
    return values.empty() ? 0.0 : std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

}  // namespace

MeanStd CalibrationReport::forward_coverage() const {
    return across_partitions(partitions, [](const auto& p) { return p.forward_coverage; });
}
MeanStd CalibrationReport::pooled_ece_lower() const {
    return across_partitions(partitions, [](const auto& p) { return p.pooled_ece_lower; });
}
MeanStd CalibrationReport::pooled_ece_upper() const {
    return across_partitions(partitions, [](const auto& p) { return p.pooled_ece_upper; });
}
MeanStd CalibrationReport::time_averaged_ece_lower() const {
    return across_partitions(partitions, [](const auto& p) { return average(p.ece_lower); });
}
MeanStd CalibrationReport::time_averaged_ece_upper() const {
    return across_partitions(partitions, [](const auto& p) { return average(p.ece_upper); });
}
MeanStd CalibrationReport::mean_lower_at(int t) const {
    return across_partitions(partitions, [t](const auto& p) { return p.mean_lower.at(t); });
}
MeanStd CalibrationReport::mean_upper_at(int t) const {
    return across_partitions(partitions, [t](const auto& p) { return p.mean_upper.at(t); });
}
MeanStd CalibrationReport::ece_lower_at(int t) const {
    return across_partitions(partitions, [t](const auto& p) { return p.ece_lower.at(t); });
}
MeanStd CalibrationReport::ece_upper_at(int t) const {
    return across_partitions(partitions, [t](const auto& p) { return p.ece_upper.at(t); });
}

double CalibrationReport::final_step_convergence() const {
    std::size_t converged = 0;
    std::size_t eligible = 0;
    for (const auto& p : partitions) {
        converged += p.final_step_converged;
        eligible += p.final_step_eligible;
    }
    return eligible == 0 ? 1.0 : static_cast<double>(converged) / static_cast<double>(eligible);
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::vector<Episode> gather(std::span<const Episode> episodes, const std::vector<std::size_t>& indices) {
    std::vector<Episode> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(episodes[i]);
    return out;
}

double noise_half_width(const DomainConfig& domain) {
    return std::visit([](const auto& c) { return c.noise_half_width; }, domain);
}

}  // namespace

CalibrationReport run_experiment(std::span<const Episode> episodes, const DomainConfig& domain,
                                 const ExperimentConfig& config) {
    config.validate();
    const int horizon = domain_horizon(domain);
    const double noise = noise_half_width(domain);

    CalibrationReport report;
    report.domain = domain_name(domain);
    report.horizon = horizon;
    report.n_cal = static_cast<std::size_t>(config.n_cal);
    report.ece_bins = config.ece_bins;
    report.delta = config.delta;
    CalibrationBins pooled_reliability(config.ece_bins);

    for (std::size_t k = 0; k < config.seeds.size(); ++k) {
        const auto seed = config.seeds[k];
        const auto split = partition(episodes.size(), config, seed);
        const auto train = gather(episodes, split.train);
        const auto cal = gather(episodes, split.cal);
        const auto test = gather(episodes, split.test);

        ForestConfig forest = config.forest;
        forest.seed = derive_seed(config.forest.seed, seed);
        const auto suite = build_monitor(train, cal, forest, horizon);

        PartitionResult result;
        result.seed = seed;
        result.forward_coverage = forward_coverage(suite.models[0], scores_from_alphas(suite.alphas[0]), test, config.delta);
        result.target = empirical_target_interval(test, config.target_q_lo, config.target_q_hi);

        std::vector<char> outcome(test.size());
        for (std::size_t i = 0; i < test.size(); ++i) outcome[i] = result.target.contains(test[i].final_return());

        const double n_plus_1 = static_cast<double>(suite.calibration_size() + 1);
        CalibrationBins pooled_lower(config.ece_bins);
        CalibrationBins pooled_upper(config.ece_bins);
        std::vector<double> lower(test.size());
        std::vector<double> upper(test.size());
        const auto traced = std::min<std::size_t>(static_cast<std::size_t>(config.trace_count), test.size());

        for (int t = 0; t < horizon; ++t) {
            parallel_for(test.size(), [&](std::size_t i) {
                const auto bounds = step_probability(suite, t, test[i].features.row(t).transpose(),
                                                     test[i].cumulative(t), result.target);
                lower[i] = bounds.p_lower;
                upper[i] = bounds.p_upper;
            });
            CalibrationBins step_lower(config.ece_bins);
            CalibrationBins step_upper(config.ece_bins);
            for (std::size_t i = 0; i < test.size(); ++i) {
                step_lower.add(lower[i], outcome[i]);
                step_upper.add(upper[i], outcome[i]);
            }
            result.ece_lower.push_back(step_lower.ece());
            result.ece_upper.push_back(step_upper.ece());
            result.mean_lower.push_back(average(lower));
            result.mean_upper.push_back(average(upper));
            pooled_lower.merge(step_lower);
            pooled_upper.merge(step_upper);

            if (k == 0)
                for (std::size_t i = 0; i < traced; ++i)
                    report.traces.push_back({k, test[i].id, t, lower[i], upper[i], outcome[i] != 0});

            if (t == horizon - 1) {
                for (std::size_t i = 0; i < test.size(); ++i) {
                    const double y = test[i].final_return();
                    if (std::abs(y - result.target.lower) <= noise || std::abs(y - result.target.upper) <= noise) continue;
                    ++result.final_step_eligible;
                    if (lower[i] <= 2.0 / n_plus_1 || lower[i] >= 1.0 - 4.0 / n_plus_1) ++result.final_step_converged;
                }
            }
        }
        result.pooled_ece_lower = pooled_lower.ece();
        result.pooled_ece_upper = pooled_upper.ece();
        pooled_reliability.merge(pooled_lower);
        report.partitions.push_back(std::move(result));
    }
    report.reliability = pooled_reliability.table();
    return report;
}

CalibrationReport run_experiment(const DomainConfig& domain, const ExperimentConfig& config) {
    config.validate();
    const auto episodes = generate_dataset(domain, config.episode_count, config.dataset_seed);
    return run_experiment(episodes, domain, config);
}

// ---------------------------------------------------------------------------
// Report files

std::string format_summary(const CalibrationReport& report) {
    auto pm = [](const MeanStd& m) { return format_double(m.mean) + " +- " + format_double(m.std); };
    std::string text;
    text += "schema_version=" + std::to_string(report_schema_version) + "\n";
    text += "domain=" + report.domain + "\n";
    text += "horizon=" + std::to_string(report.horizon) + "\n";
    text += "partitions=" + std::to_string(report.partitions.size()) + "\n";
    text += "n_cal=" + std::to_string(report.n_cal) + "\n";
    text += "delta=" + format_double(report.delta) + "\n";
    text += "ece_bins=" + std::to_string(report.ece_bins) + "\n";
    text += "forward_coverage=" + pm(report.forward_coverage()) + "\n";
    text += "pooled_ece_lower=" + pm(report.pooled_ece_lower()) + "\n";
    text += "pooled_ece_upper=" + pm(report.pooled_ece_upper()) + "\n";
    text += "time_averaged_ece_lower=" + pm(report.time_averaged_ece_lower()) + "\n";
    text += "time_averaged_ece_upper=" + pm(report.time_averaged_ece_upper()) + "\n";
    text += "final_step_convergence=" + format_double(report.final_step_convergence()) + "\n";
    return text;
}

void write_report(const CalibrationReport& report, const std::filesystem::path& dir) {
    std::string forward = "partition,seed,coverage,target_lower,target_upper\n";
    std::string ece = "partition,t,ece_lower,ece_upper\n";
    std::string mean_cov = "t,mean_lower,std_lower,mean_upper,std_upper,ece_lower_mean,ece_lower_std,ece_upper_mean,ece_upper_std\n";
    for (std::size_t k = 0; k < report.partitions.size(); ++k) {
        const auto& p = report.partitions[k];
        forward += std::to_string(k) + "," + std::to_string(p.seed) + "," + format_double(p.forward_coverage) + "," +
                   format_double(p.target.lower) + "," + format_double(p.target.upper) + "\n";
        for (std::size_t t = 0; t < p.ece_lower.size(); ++t)
            ece += std::to_string(k) + "," + std::to_string(t) + "," + format_double(p.ece_lower[t]) + "," +
                   format_double(p.ece_upper[t]) + "\n";
    }
    for (int t = 0; t < report.horizon && !report.partitions.empty(); ++t) {
        const auto lo = report.mean_lower_at(t);
        const auto hi = report.mean_upper_at(t);
        const auto el = report.ece_lower_at(t);
        const auto eu = report.ece_upper_at(t);
        mean_cov += std::to_string(t) + "," + format_double(lo.mean) + "," + format_double(lo.std) + "," +
                    format_double(hi.mean) + "," + format_double(hi.std) + "," + format_double(el.mean) + "," +
                    format_double(el.std) + "," + format_double(eu.mean) + "," + format_double(eu.std) + "\n";
    }
    std::string bins = "bin_lo,bin_hi,count,mean_predicted,observed_frequency\n";
    for (const auto& row : report.reliability)
        bins += format_double(row.bin_lo) + "," + format_double(row.bin_hi) + "," + std::to_string(row.count) + "," +
                format_double(row.mean_predicted) + "," + format_double(row.observed_frequency) + "\n";
    std::string traces = "partition,episode_id,t,p_lower,p_upper,outcome\n";
    for (const auto& row : report.traces)
        traces += std::to_string(row.partition) + "," + std::to_string(row.episode_id) + "," + std::to_string(row.t) +
                  "," + format_double(row.p_lower) + "," + format_double(row.p_upper) + "," +
                  (row.outcome ? "1" : "0") + "\n";

    write_file_atomic(dir / "forward_coverage.csv", forward);
    write_file_atomic(dir / "ece_vs_time.csv", ece);
    write_file_atomic(dir / "mean_coverage_vs_time.csv", mean_cov);
    write_file_atomic(dir / "reliability_bins.csv", bins);
    write_file_atomic(dir / "traces.csv", traces);
    write_file_atomic(dir / "summary.txt", format_summary(report));
}

}  // namespace pcqr
