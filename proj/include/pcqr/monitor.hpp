#pragma once

#include "pcqr/forest.hpp"
#include "pcqr/inverse.hpp"
#include "pcqr/sim.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace pcqr {

/// One forest and one calibration set per timestep, each fit on reward-to-go.
struct MonitorSuite {
    int horizon = 0;
    std::vector<ForestModel> models;
    std::vector<CalibrationAlphas> alphas;

    /// Throws unless there are exactly `horizon` model/alpha pairs with a
    /// common calibration size.
    void validate() const;
    std::size_t calibration_size() const { return alphas.empty() ? 0 : alphas.front().size(); }

    friend bool operator==(const MonitorSuite&, const MonitorSuite&) = default;
};

/// Fits the forest for step t on (x_t, y_H - b_t) from `train` and calibrates
/// it on the same pairs from `calibration`. The forest seed for step t is
/// derived from config.seed and t.
MonitorSuite build_monitor(std::span<const Episode> train, std::span<const Episode> calibration,
                           const ForestConfig& config, int horizon);

/// (x_t, y_H - b_t) pairs of step t.
LabeledData timestep_data(std::span<const Episode> episodes, int t);

/// PCQR^-1 bounds for the target translated into reward-to-go space,
/// [y- - b_t, y+ - b_t].
CoverageBounds step_probability(const MonitorSuite& suite, int t, const FeatureRef& x, double cumulative,
                                const TargetInterval& target);

enum class AlarmMode { first_crossing, every_step };

struct AlarmEvent {
    std::int64_t episode_id = 0;
    int t = 0;
    double p_lower = 0.0;
    double p_upper = 0.0;
    double threshold = 0.0;
};

struct StepBounds {
    int t = 0;
    CoverageBounds bounds;
};

struct MonitorResult {
    std::vector<StepBounds> trace;
    std::vector<AlarmEvent> alarms;

    bool alarmed() const { return !alarms.empty(); }
};

/// Processes the observed prefix in time order: row t of `features` is x_t
/// and cumulative(t) is b_t. An alarm fires whenever p- < threshold; in
/// first_crossing mode only the first such step is reported.
MonitorResult monitor_episode(const MonitorSuite& suite, std::int64_t episode_id, const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& cumulative, const TargetInterval& target, double threshold,
                              AlarmMode mode = AlarmMode::first_crossing);

MonitorResult monitor_episode(const MonitorSuite& suite, const Episode& episode, const TargetInterval& target,
                              double threshold, AlarmMode mode = AlarmMode::first_crossing);

/// episode_id,t,p_lower,p_upper,threshold with a header line.
std::string format_alarm_log(std::span<const AlarmEvent> alarms);
std::vector<AlarmEvent> parse_alarm_log(const std::string& text);

void save_suite(const MonitorSuite& suite, const std::filesystem::path& path);
MonitorSuite load_suite(const std::filesystem::path& path);

}  // namespace pcqr
