// pcqr: simulate episodes, build per-step monitors, query and evaluate them.

#include "pcqr/eval.hpp"
#include "pcqr/io.hpp"
#include "pcqr/monitor.hpp"
#include "pcqr/sim.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace pcqr;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_error = 1;
constexpr int exit_alarm = 2;

fs::path output_path(const std::string& out) {
    fs::path path(out);
    if (path.is_relative()) {
        if (const char* root = std::getenv("PCQR_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
    }
    return path;
}

double parse_endpoint(const std::string& text) {
    const auto value = parse_double(trim(text));
    if (std::isnan(value)) throw std::invalid_argument("target endpoint is NaN");
    return value;
}

TargetInterval parse_target(const std::string& lo, const std::string& hi) {
    TargetInterval target{parse_endpoint(lo), parse_endpoint(hi)};
    target.validate();
    return target;
}

struct ForestFlags {
    int trees = 100;
    int min_leaf = 5;
    double feature_fraction = 1.0 / 3.0;
    std::uint64_t seed = 0;

    void add(CLI::App* cmd) {
        cmd->add_option("--trees", trees, "trees per forest")->capture_default_str();
        cmd->add_option("--min-leaf", min_leaf, "minimum leaf size")->capture_default_str();
        cmd->add_option("--feature-fraction", feature_fraction, "share of features tried per split")
            ->default_str(format_double(feature_fraction));
        cmd->add_option("--forest-seed", seed, "root seed for forest fitting")->capture_default_str();
    }

    ForestConfig config() const {
        ForestConfig c;
        c.tree_count = trees;
        c.min_leaf_size = min_leaf;
        c.feature_subsample = feature_fraction;
        c.seed = seed;
        c.validate();
        return c;
    }
};

struct Sizes {
    std::int64_t train = 0;
    std::int64_t cal = 0;
    std::int64_t test = 0;

    void add(CLI::App* cmd) {
        cmd->add_option("--n-train", train, "training episodes (default: a quarter)");
        cmd->add_option("--n-cal", cal, "calibration episodes (default: a quarter)");
        cmd->add_option("--n-test", test, "test episodes (default: the rest)");
    }

    void apply(ExperimentConfig& config, std::int64_t count) const {
        config.episode_count = count;
        config.n_train = train > 0 ? train : count / 4;
        config.n_cal = cal > 0 ? cal : count / 4;
        config.n_test = test > 0 ? test : count - config.n_train - config.n_cal;
    }
};

void save_resolved_config(const CLI::App& app, const fs::path& dir) {
    write_file_atomic(dir / "run_config.ini", app.config_to_str(true, true));
}

const Episode& find_episode(const Dataset& data, std::int64_t id) {
    for (const auto& e : data.episodes)
        if (e.id == id) return e;
    throw std::invalid_argument("episode " + std::to_string(id) + " not in dataset");
}

Eigen::VectorXd parse_features(const std::string& text) {
    std::vector<double> values;
    for (auto field : split(text, ',')) values.push_back(parse_double(trim(field)));
    return Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

std::string format_bounds(int t, const CoverageBounds& b) {
    return "t=" + std::to_string(t) + " p_lower=" + format_double(b.p_lower) + " p_upper=" + format_double(b.p_upper) +
           " rank_lo=" + std::to_string(b.rank_lo) + " rank_hi=" + std::to_string(b.rank_hi) +
           " n=" + std::to_string(b.n);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Probability-space conformal monitoring of episode returns"};
    app.set_config("--config", "", "key=value config file; flags override it");
    app.require_subcommand(1);

    // simulate
    auto* simulate = app.add_subcommand("simulate", "sample an episode dataset");
    std::string domain = "tamarisk";
    std::int64_t episodes = 10000;
    std::uint64_t seed = 20240101;
    std::string out;
    simulate->add_option("--domain", domain, "tamarisk or skirmish")->capture_default_str();
    simulate->add_option("--episodes", episodes, "episode count")->capture_default_str();
    simulate->add_option("--seed", seed, "dataset seed")->capture_default_str();
    simulate->add_option("--out", out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "partition a dataset, fit per-step forests and calibrate");
    std::string train_data;
    std::uint64_t partition_seed = 1;
    std::string train_out;
    ForestFlags forest_flags;
    Sizes sizes;
    train->add_option("--data", train_data, "dataset directory")->required();
    train->add_option("--seed", partition_seed, "partition seed")->capture_default_str();
    train->add_option("--out", train_out, "output directory")->required();
    forest_flags.add(train);
    sizes.add(train);

    // predict
    auto* predict = app.add_subcommand("predict", "probability bounds for one step");
    std::string predict_suite;
    int step = 0;
    std::string predict_lo = "-inf";
    std::string predict_hi = "inf";
    std::string predict_data;
    std::optional<std::int64_t> predict_episode;
    std::string features_text;
    double cumulative = 0.0;
    std::optional<double> delta;
    predict->add_option("--suite", predict_suite, "monitor suite file")->required();
    predict->add_option("--t", step, "timestep")->required();
    predict->add_option("--target-lo", predict_lo, "lower target endpoint (-inf allowed)")->capture_default_str();
    predict->add_option("--target-hi", predict_hi, "upper target endpoint (inf allowed)")->capture_default_str();
    predict->add_option("--data", predict_data, "dataset directory holding the episode");
    predict->add_option("--episode", predict_episode, "episode id inside --data");
    predict->add_option("--features", features_text, "comma-separated x_t");
    predict->add_option("--cumulative", cumulative, "b_t for --features")->capture_default_str();
    predict->add_option("--delta", delta, "also print I- and I+ at this miscoverage level");

    // monitor
    auto* monitor = app.add_subcommand("monitor", "stream episodes through the monitor");
    std::string monitor_suite;
    std::string monitor_data;
    std::optional<std::int64_t> monitor_episode_id;
    std::string monitor_lo = "-inf";
    std::string monitor_hi = "inf";
    std::string monitor_out;
    double threshold = 0.5;
    std::string mode = "first";
    std::optional<int> steps;
    monitor->add_option("--suite", monitor_suite, "monitor suite file")->required();
    monitor->add_option("--data", monitor_data, "dataset directory with the episode streams")->required();
    monitor->add_option("--episode", monitor_episode_id, "monitor only this episode id");
    monitor->add_option("--steps", steps, "observed prefix length (default: full horizon)");
    monitor->add_option("--target-lo", monitor_lo, "lower target endpoint (-inf allowed)")->capture_default_str();
    monitor->add_option("--target-hi", monitor_hi, "upper target endpoint (inf allowed)")->capture_default_str();
    monitor->add_option("--threshold", threshold, "alarm when p_lower falls below this")->capture_default_str();
    monitor->add_option("--mode", mode, "first or every")
        ->check(CLI::IsMember({"first", "every"}))
        ->capture_default_str();
    monitor->add_option("--out", monitor_out, "output directory")->required();

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "run the calibration experiment");
    std::string eval_domain = "tamarisk";
    std::string eval_data;
    std::int64_t eval_episodes = 10000;
    std::uint64_t eval_seed = 20240101;
    std::string eval_out;
    std::vector<std::uint64_t> partition_seeds = {1, 2, 3, 4, 5};
    double eval_delta = 0.2;
    int bins = 30;
    double q_lo = 0.1;
    double q_hi = 0.9;
    int trace_count = 10;
    ForestFlags eval_forest;
    Sizes eval_sizes;
    evaluate->add_option("--domain", eval_domain, "tamarisk or skirmish (ignored with --data)")->capture_default_str();
    evaluate->add_option("--data", eval_data, "evaluate an existing dataset instead of simulating");
    evaluate->add_option("--episodes", eval_episodes, "episodes to simulate")->capture_default_str();
    evaluate->add_option("--seed", eval_seed, "dataset seed")->capture_default_str();
    evaluate->add_option("--partition-seeds", partition_seeds, "one partition per seed")->capture_default_str();
    evaluate->add_option("--delta", eval_delta, "forward interval miscoverage")->capture_default_str();
    evaluate->add_option("--bins", bins, "ECE bins")->capture_default_str();
    evaluate->add_option("--q-lo", q_lo, "target interval lower quantile")->capture_default_str();
    evaluate->add_option("--q-hi", q_hi, "target interval upper quantile")->capture_default_str();
    evaluate->add_option("--traces", trace_count, "episodes traced from the first partition")->capture_default_str();
    evaluate->add_option("--out", eval_out, "report directory")->required();
    eval_forest.add(evaluate);
    eval_sizes.add(evaluate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? exit_ok : exit_error;
    }

    try {
        if (simulate->parsed()) {
            const auto dir = output_path(out);
            const auto config = default_domain(domain);
            write_dataset({config, seed, generate_dataset(config, episodes, seed)}, dir);
            save_resolved_config(app, dir);
            std::cout << "wrote " << episodes << " " << domain << " episodes to " << dir.string() << "\n";
            return exit_ok;
        }

        if (train->parsed()) {
            const auto dir = output_path(train_out);
            const auto data = read_dataset(train_data);
            const int horizon = domain_horizon(data.domain);
            ExperimentConfig experiment;
            sizes.apply(experiment, static_cast<std::int64_t>(data.episodes.size()));
            experiment.forest = forest_flags.config();
            const auto split = partition(data.episodes.size(), experiment, partition_seed);

            auto pick = [&](const std::vector<std::size_t>& rows) {
                std::vector<Episode> picked;
                for (auto i : rows) picked.push_back(data.episodes[i]);
                return picked;
            };
            const auto suite = build_monitor(pick(split.train), pick(split.cal), experiment.forest, horizon);
            save_suite(suite, dir / "suite.bin");

            std::string manifest = "episode_id,part\n";
            const std::pair<const char*, const std::vector<std::size_t>*> parts[] = {
                {"train", &split.train}, {"cal", &split.cal}, {"test", &split.test}};
            for (const auto& [name, rows] : parts)
                for (auto i : *rows) manifest += std::to_string(data.episodes[i].id) + "," + name + "\n";
            write_file_atomic(dir / "partition.csv", manifest);
            save_resolved_config(app, dir);
            std::cout << "trained " << horizon << " steps on " << split.train.size() << " episodes, calibrated on "
                      << split.cal.size() << "; suite at " << (dir / "suite.bin").string() << "\n";
            return exit_ok;
        }

        if (predict->parsed()) {
            const auto suite = load_suite(predict_suite);
            if (step < 0 || step >= suite.horizon)
                throw std::out_of_range("t=" + std::to_string(step) + " outside [0, " + std::to_string(suite.horizon) +
                                        ")");
            const auto target = parse_target(predict_lo, predict_hi);
            Eigen::VectorXd x;
            double b = cumulative;
            if (predict_episode) {
                if (predict_data.empty()) throw std::invalid_argument("--episode needs --data");
                const auto data = read_dataset(predict_data);
                const auto& e = find_episode(data, *predict_episode);
                if (e.horizon() != suite.horizon) throw std::invalid_argument("episode horizon differs from the suite");
                x = e.features.row(step).transpose();
                b = e.cumulative(step);
            } else if (!features_text.empty()) {
                x = parse_features(features_text);
            } else {
                throw std::invalid_argument("give --features or --data with --episode");
            }
            if (x.size() != suite.models[step].dimension())
                throw std::invalid_argument("expected " + std::to_string(suite.models[step].dimension()) +
                                            " features, got " + std::to_string(x.size()));

            const auto bounds = step_probability(suite, step, x, b, target);
            std::string line = format_bounds(step, bounds);
            if (delta) {
                // Intervals are reported in final-return space, b_t + reward-to-go.
                const auto dist = suite.models[step].conditional(x);
                const auto scores = scores_from_alphas(suite.alphas[step]);
                for (auto kind : {IntervalKind::lower_bound, IntervalKind::upper_bound}) {
                    const auto iv = pcqr_interval(dist, scores, *delta, kind);
                    const std::string name = kind == IntervalKind::lower_bound ? "i_minus" : "i_plus";
                    line += " " + name + "_lo=" + format_double(iv.lo + b) + " " + name + "_hi=" +
                            format_double(iv.hi + b);
                }
            }
            std::cout << line << "\n";
            return exit_ok;
        }

        if (monitor->parsed()) {
            const auto dir = output_path(monitor_out);
            const auto suite = load_suite(monitor_suite);
            const auto data = read_dataset(monitor_data);
            const auto target = parse_target(monitor_lo, monitor_hi);
            const auto alarm_mode = mode == "every" ? AlarmMode::every_step : AlarmMode::first_crossing;

            std::vector<const Episode*> streams;
            if (monitor_episode_id)
                streams.push_back(&find_episode(data, *monitor_episode_id));
            else
                for (const auto& e : data.episodes) streams.push_back(&e);

            std::string trace = "episode_id,t,p_lower,p_upper,rank_lo,rank_hi\n";
            std::vector<AlarmEvent> alarms;
            for (const auto* e : streams) {
                if (e->horizon() != suite.horizon)
                    throw std::invalid_argument("episode " + std::to_string(e->id) + " has horizon " +
                                                std::to_string(e->horizon()) + ", suite has " +
                                                std::to_string(suite.horizon));
                const int observed = steps ? *steps : e->horizon();
                if (observed < 1 || observed > e->horizon())
                    throw std::invalid_argument("--steps must lie in [1, " + std::to_string(e->horizon()) + "]");
                const Eigen::MatrixXd prefix = e->features.topRows(observed);
                const Eigen::VectorXd b = e->cumulative.head(observed);
                const auto result = monitor_episode(suite, e->id, prefix, b, target, threshold, alarm_mode);
                for (const auto& row : result.trace)
                    trace += std::to_string(e->id) + "," + std::to_string(row.t) + "," +
                             format_double(row.bounds.p_lower) + "," + format_double(row.bounds.p_upper) + "," +
                             std::to_string(row.bounds.rank_lo) + "," + std::to_string(row.bounds.rank_hi) + "\n";
                alarms.insert(alarms.end(), result.alarms.begin(), result.alarms.end());
            }
            write_file_atomic(dir / "trace.csv", trace);
            write_file_atomic(dir / "alarms.csv", format_alarm_log(alarms));
            save_resolved_config(app, dir);
            std::cout << "monitored " << streams.size() << " episode(s), " << alarms.size() << " alarm(s)";
            if (!alarms.empty())
                std::cout << "; first at episode " << alarms.front().episode_id << " t=" << alarms.front().t;
            std::cout << "\n";
            return alarms.empty() ? exit_ok : exit_alarm;
        }

        if (evaluate->parsed()) {
            const auto dir = output_path(eval_out);
            std::optional<Dataset> data;
            if (!eval_data.empty()) data = read_dataset(eval_data);
            const auto config = data ? data->domain : default_domain(eval_domain);
            const auto dataset = data ? std::move(data->episodes) : generate_dataset(config, eval_episodes, eval_seed);

            ExperimentConfig experiment;
            eval_sizes.apply(experiment, static_cast<std::int64_t>(dataset.size()));
            experiment.seeds = partition_seeds;
            experiment.delta = eval_delta;
            experiment.ece_bins = bins;
            experiment.target_q_lo = q_lo;
            experiment.target_q_hi = q_hi;
            experiment.trace_count = trace_count;
            experiment.dataset_seed = data ? data->seed : eval_seed;
            experiment.forest = eval_forest.config();

            const auto report = run_experiment(dataset, config, experiment);
            write_report(report, dir);
            save_resolved_config(app, dir);
            std::cout << format_summary(report);
            return exit_ok;
        }
    } catch (const std::exception& e) {
        std::cerr << "pcqr: " << e.what() << "\n";
        return exit_error;
    }
    return exit_error;
}
