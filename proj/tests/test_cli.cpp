#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pcqr/eval.hpp"
#include "pcqr/io.hpp"
#include "pcqr/monitor.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <map>
#include <sstream>

using namespace pcqr;
namespace fs = std::filesystem;

namespace {

struct Run {
    int status = -1;
    std::string out;
};

Run cli(const std::string& args) {
    const std::string command = std::string(PCQR_CLI_PATH) + " " + args + " 2>/dev/null";
    Run run;
    FILE* pipe = popen(command.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buffer[4096];
    while (std::size_t got = std::fread(buffer, 1, sizeof buffer, pipe)) run.out.append(buffer, got);
    const int status = pclose(pipe);
    run.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return run;
}

std::map<std::string, std::string> fields(const std::string& line) {
    std::map<std::string, std::string> out;
    std::istringstream in(line);
    std::string token;
    while (in >> token) {
        const auto eq = token.find('=');
        if (eq != std::string::npos) out[token.substr(0, eq)] = token.substr(eq + 1);
    }
    return out;
}

fs::path workdir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "pcqr_cli_test";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

ForestConfig tiny_forest() {
    ForestConfig c;
    c.tree_count = 5;
    c.seed = 11;
    return c;
}

// Dataset and trained suite shared by the tests below.
struct Trained {
    Dataset data;
    MonitorSuite suite;
    std::vector<Episode> test;
};

const Trained& trained() {
    static const Trained t = [] {
        const auto dir = workdir();
        auto sim = cli("simulate --domain tamarisk --episodes 60 --seed 7 --out " + (dir / "data").string());
        REQUIRE(sim.status == 0);
        auto fit = cli("train --data " + (dir / "data").string() + " --seed 3 --trees 5 --forest-seed 11" +
                       " --n-train 20 --n-cal 20 --n-test 20 --out " + (dir / "model").string());
        REQUIRE(fit.status == 0);
        Trained out;
        out.data = read_dataset(dir / "data");
        out.suite = load_suite(dir / "model" / "suite.bin");
        ExperimentConfig sizes;
        sizes.episode_count = 60;
        sizes.n_train = sizes.n_cal = sizes.n_test = 20;
        for (auto i : partition(60, sizes, 3).test) out.test.push_back(out.data.episodes[i]);
        return out;
    }();
    return t;
}

}  // namespace

TEST_CASE("simulate writes the library's dataset") {
    const auto& t = trained();
    CHECK(t.data.episodes == generate_dataset(TamariskConfig{}, 60, 7));
    CHECK(t.data.seed == 7);
    CHECK(fs::exists(workdir() / "data" / "run_config.ini"));
}

TEST_CASE("train matches build_monitor on the same partition") {
    const auto& t = trained();
    ExperimentConfig sizes;
    sizes.episode_count = 60;
    sizes.n_train = sizes.n_cal = sizes.n_test = 20;
    const auto split = partition(60, sizes, 3);
    std::vector<Episode> train;
    std::vector<Episode> cal;
    for (auto i : split.train) train.push_back(t.data.episodes[i]);
    for (auto i : split.cal) cal.push_back(t.data.episodes[i]);
    CHECK(t.suite == build_monitor(train, cal, tiny_forest(), 50));

    const auto manifest = read_file(workdir() / "model" / "partition.csv");
    CHECK(manifest.rfind("episode_id,part\n", 0) == 0);
    CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 61);
}

TEST_CASE("predict agrees with step_probability") {
    const auto& t = trained();
    const auto suite_path = (workdir() / "model" / "suite.bin").string();
    const TargetInterval target{-6.0, -1.0};
    for (int k = 0; k < 3; ++k) {
        const auto& e = t.test[k];
        for (int step : {0, 20, 49}) {
            const auto expected = step_probability(t.suite, step, e.features.row(step).transpose(), e.cumulative(step),
                                                   target);
            const auto run = cli("predict --suite " + suite_path + " --t " + std::to_string(step) +
                                 " --target-lo -6 --target-hi -1 --data " + (workdir() / "data").string() +
                                 " --episode " + std::to_string(e.id));
            REQUIRE(run.status == 0);
            const auto f = fields(run.out);
            CHECK(parse_double(f.at("p_lower")) == expected.p_lower);
            CHECK(parse_double(f.at("p_upper")) == expected.p_upper);
            CHECK(parse_int(f.at("rank_lo")) == static_cast<std::int64_t>(expected.rank_lo));
            CHECK(parse_int(f.at("n")) == 20);

            std::string x;
            for (Eigen::Index j = 0; j < e.features.cols(); ++j)
                x += (j ? "," : "") + format_double(e.features(step, j));
            const auto by_features =
                cli("predict --suite " + suite_path + " --t " + std::to_string(step) +
                    " --target-lo -6 --target-hi -1 --features " + x + " --cumulative " +
                    format_double(e.cumulative(step)) + " --delta 0.25");
            REQUIRE(by_features.status == 0);
            const auto g = fields(by_features.out);
            CHECK(parse_double(g.at("p_lower")) == expected.p_lower);

            const auto dist = t.suite.models[step].conditional(e.features.row(step).transpose());
            const auto scores = scores_from_alphas(t.suite.alphas[step]);
            const auto plus = pcqr_interval(dist, scores, 0.25, IntervalKind::upper_bound);
            const auto minus = pcqr_interval(dist, scores, 0.25, IntervalKind::lower_bound);
            CHECK(parse_double(g.at("i_plus_lo")) == plus.lo + e.cumulative(step));
            CHECK(parse_double(g.at("i_plus_hi")) == plus.hi + e.cumulative(step));
            CHECK(parse_double(g.at("i_minus_lo")) == minus.lo + e.cumulative(step));
        }
    }
}

TEST_CASE("monitor exit codes and alarm log") {
    const auto& t = trained();
    const auto suite_path = (workdir() / "model" / "suite.bin").string();
    const auto data_path = (workdir() / "data").string();
    const auto& e = t.test[0];
    const TargetInterval target{-6.0, -1.0};

    const auto quiet = cli("monitor --suite " + suite_path + " --data " + data_path + " --episode " +
                           std::to_string(e.id) + " --target-lo -6 --target-hi -1 --threshold 0 --out " +
                           (workdir() / "quiet").string());
    CHECK(quiet.status == 0);
    CHECK(parse_alarm_log(read_file(workdir() / "quiet" / "alarms.csv")).empty());
    const auto trace = read_file(workdir() / "quiet" / "trace.csv");
    CHECK(std::count(trace.begin(), trace.end(), '\n') == 51);

    const auto expected = monitor_episode(t.suite, e, target, 1.0, AlarmMode::every_step);
    const auto loud = cli("monitor --suite " + suite_path + " --data " + data_path + " --episode " +
                          std::to_string(e.id) + " --target-lo -6 --target-hi -1 --threshold 1 --mode every --out " +
                          (workdir() / "loud").string());
    CHECK(loud.status == (expected.alarmed() ? 2 : 0));
    const auto alarms = parse_alarm_log(read_file(workdir() / "loud" / "alarms.csv"));
    REQUIRE(alarms.size() == expected.alarms.size());
    for (std::size_t i = 0; i < alarms.size(); ++i) {
        CHECK(alarms[i].t == expected.alarms[i].t);
        CHECK(alarms[i].p_lower == expected.alarms[i].p_lower);
    }

    const auto prefix = cli("monitor --suite " + suite_path + " --data " + data_path + " --episode " +
                            std::to_string(e.id) + " --steps 5 --threshold 0 --out " + (workdir() / "prefix").string());
    CHECK(prefix.status == 0);
    const auto short_trace = read_file(workdir() / "prefix" / "trace.csv");
    CHECK(std::count(short_trace.begin(), short_trace.end(), '\n') == 6);
}

TEST_CASE("invalid requests exit with status 1") {
    trained();
    const auto suite_path = (workdir() / "model" / "suite.bin").string();
    CHECK(cli("predict --suite " + suite_path + " --t 50 --features 0,0,0,0,0,0,0,0,0").status == 1);
    CHECK(cli("predict --suite " + suite_path + " --t 0 --features 0,0").status == 1);
    CHECK(cli("predict --suite " + suite_path + " --t 0 --target-lo nan --features 0,0,0,0,0,0,0,0,0").status == 1);
    CHECK(cli("predict --suite " + suite_path + " --t 0 --target-lo 2 --target-hi 1 --features 0,0,0,0,0,0,0,0,0")
              .status == 1);
    CHECK(cli("predict --suite /nonexistent/suite.bin --t 0 --features 0").status == 1);
    CHECK(cli("launch").status == 1);
    CHECK(cli("simulate --domain chess --out " + (workdir() / "chess").string()).status == 1);
    CHECK(cli("--help").status == 0);
}

TEST_CASE("saved run configuration reproduces the run") {
    trained();
    const auto first = workdir() / "data";
    const auto again = workdir() / "data_again";
    CHECK(cli("--config " + (first / "run_config.ini").string() + " simulate --out " + again.string()).status == 0);
    CHECK(read_file(again / "episodes.csv") == read_file(first / "episodes.csv"));
}

TEST_CASE("relative outputs land under PCQR_OUTPUT_ROOT") {
    const auto root = workdir() / "root";
    const std::string command = "PCQR_OUTPUT_ROOT=" + root.string() + " " + std::string(PCQR_CLI_PATH) +
                                " simulate --episodes 3 --out rel > /dev/null";
    CHECK(std::system(command.c_str()) == 0);
    CHECK(fs::exists(root / "rel" / "episodes.csv"));
}

TEST_CASE("evaluate prints the library summary") {
    const auto run = cli("evaluate --domain tamarisk --episodes 80 --seed 5 --partition-seeds 1 --trees 5" +
                         std::string(" --forest-seed 2 --n-train 20 --n-cal 20 --n-test 40 --traces 2 --out ") +
                         (workdir() / "eval").string());
    REQUIRE(run.status == 0);
    ExperimentConfig c;
    c.episode_count = 80;
    c.n_train = 20;
    c.n_cal = 20;
    c.n_test = 40;
    c.seeds = {1};
    c.trace_count = 2;
    c.dataset_seed = 5;
    c.forest.tree_count = 5;
    c.forest.seed = 2;
    CHECK(run.out == format_summary(run_experiment(TamariskConfig{}, c)));
    CHECK(fs::exists(workdir() / "eval" / "summary.txt"));
}
