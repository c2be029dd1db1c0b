#include "pcqr/monitor.hpp"

#include "pcqr/io.hpp"
#include "pcqr/random.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pcqr {

namespace {

constexpr char suite_magic[8] = {'P', 'C', 'Q', 'R', 'M', 'O', 'N', '\0'};
constexpr std::uint32_t suite_format_version = 1;

void check_horizon(std::span<const Episode> episodes, int horizon, const char* which) {
    if (episodes.empty()) throw std::invalid_argument(std::string(which) + " episode set is empty");
    for (const auto& e : episodes)
        if (e.horizon() != horizon)
            throw std::invalid_argument(std::string(which) + " episode " + std::to_string(e.id) + " has horizon " +
                                        std::to_string(e.horizon()) + ", expected " + std::to_string(horizon));
}

}  // namespace

void MonitorSuite::validate() const {
    if (horizon < 1) throw std::invalid_argument("monitor horizon must be >= 1");
    if (models.size() != static_cast<std::size_t>(horizon) || alphas.size() != static_cast<std::size_t>(horizon))
        throw std::invalid_argument("monitor suite needs one model and one calibration set per step");
    for (const auto& a : alphas)
        if (a.size() != alphas.front().size()) throw std::invalid_argument("calibration sizes differ across steps");
}

LabeledData timestep_data(std::span<const Episode> episodes, int t) {
    LabeledData data;
    const auto n = static_cast<Eigen::Index>(episodes.size());
    data.features.resize(n, episodes.empty() ? 0 : episodes.front().features.cols());
    data.responses.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& e = episodes[static_cast<std::size_t>(i)];
        data.features.row(i) = e.features.row(t);
        data.responses(i) = e.reward_to_go(t);
    }
    return data;
}

MonitorSuite build_monitor(std::span<const Episode> train, std::span<const Episode> calibration,
                           const ForestConfig& config, int horizon) {
    if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
    check_horizon(train, horizon, "training");
    check_horizon(calibration, horizon, "calibration");

    MonitorSuite suite;
    suite.horizon = horizon;
    suite.models.reserve(static_cast<std::size_t>(horizon));
    suite.alphas.reserve(static_cast<std::size_t>(horizon));
    for (int t = 0; t < horizon; ++t) {
        ForestConfig step_config = config;
        step_config.seed = derive_seed(config.seed, static_cast<std::uint64_t>(t));
        suite.models.push_back(fit_forest(timestep_data(train, t), step_config));
        suite.alphas.push_back(calibrate_alphas(suite.models.back(), timestep_data(calibration, t)));
    }
    return suite;
}

CoverageBounds step_probability(const MonitorSuite& suite, int t, const FeatureRef& x, double cumulative,
                                const TargetInterval& target) {
    if (t < 0 || t >= suite.horizon)
        throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(suite.horizon) + ")");
    return coverage_bounds(suite.models[t], suite.alphas[t], x, target.shifted(-cumulative));
}

MonitorResult monitor_episode(const MonitorSuite& suite, std::int64_t episode_id, const Eigen::MatrixXd& features,
                              const Eigen::VectorXd& cumulative, const TargetInterval& target, double threshold,
                              AlarmMode mode) {
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw std::invalid_argument("alarm threshold must lie in [0, 1]");
    const auto steps = features.rows();
    if (steps < 1) throw std::invalid_argument("episode stream has no observed steps");
    if (steps > suite.horizon) throw std::invalid_argument("episode stream is longer than the monitor horizon");
    if (cumulative.size() < steps) throw std::invalid_argument("missing cumulative reward for an observed step");

    MonitorResult result;
    for (int t = 0; t < static_cast<int>(steps); ++t) {
        const auto bounds = step_probability(suite, t, features.row(t).transpose(), cumulative(t), target);
        result.trace.push_back({t, bounds});
        if (bounds.p_lower < threshold && (mode == AlarmMode::every_step || result.alarms.empty()))
            result.alarms.push_back({episode_id, t, bounds.p_lower, bounds.p_upper, threshold});
    }
    return result;
}

MonitorResult monitor_episode(const MonitorSuite& suite, const Episode& episode, const TargetInterval& target,
                              double threshold, AlarmMode mode) {
    return monitor_episode(suite, episode.id, episode.features, episode.cumulative, target, threshold, mode);
}

std::string format_alarm_log(std::span<const AlarmEvent> alarms) {
    std::string text = "episode_id,t,p_lower,p_upper,threshold\n";
    for (const auto& a : alarms) {
        text += std::to_string(a.episode_id) + "," + std::to_string(a.t) + "," + format_double(a.p_lower) + "," +
                format_double(a.p_upper) + "," + format_double(a.threshold) + "\n";
    }
    return text;
}

std::vector<AlarmEvent> parse_alarm_log(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::getline(in, line);
    std::vector<AlarmEvent> alarms;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        const auto f = split(line, ',');
        if (f.size() != 5) throw std::runtime_error("malformed alarm log line: " + line);
        alarms.push_back({parse_int(f[0]), static_cast<int>(parse_int(f[1])), parse_double(f[2]), parse_double(f[3]),
                          parse_double(f[4])});
    }
    return alarms;
}

void save_suite(const MonitorSuite& suite, const std::filesystem::path& path) {
    suite.validate();
    std::ostringstream out(std::ios::binary);
    out.write(suite_magic, sizeof(suite_magic));
    BinaryWriter writer(out);
    writer.put(suite_format_version);
    writer.put<std::int32_t>(suite.horizon);
    for (int t = 0; t < suite.horizon; ++t) {
        suite.models[t].save(out);
        const auto keys = suite.alphas[t].keys();
        writer.put<std::uint64_t>(keys.size());
        for (const auto& k : keys) {
            writer.put(k.prob);
            writer.put(k.excess);
        }
    }
    write_file_atomic(path, out.str());
}

MonitorSuite load_suite(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    char magic[sizeof(suite_magic)];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + sizeof(magic), suite_magic))
        throw std::runtime_error(path.string() + " is not a monitor suite file");
    BinaryReader reader(in);
    if (reader.get<std::uint32_t>() != suite_format_version) throw std::runtime_error("unsupported suite format version");

    MonitorSuite suite;
    suite.horizon = reader.get<std::int32_t>();
    if (suite.horizon < 1 || suite.horizon > 100000) throw std::runtime_error("corrupt suite: horizon");
    for (int t = 0; t < suite.horizon; ++t) {
        suite.models.push_back(ForestModel::load(in));
        const auto count = reader.get<std::uint64_t>();
        if (count == 0 || count > (1u << 30)) throw std::runtime_error("corrupt suite: calibration size");
        std::vector<ExtendedProbability> keys(count);
        for (auto& k : keys) {
            k.prob = reader.get<double>();
            k.excess = reader.get<double>();
        }
        suite.alphas.emplace_back(std::move(keys));
    }
    suite.validate();
    return suite;
}

}  // namespace pcqr
