#include "pcqr/sim.hpp"

#include "pcqr/io.hpp"
#include "pcqr/parallel.hpp"

#include <algorithm>
#include <bit>
#include <sstream>
#include <stdexcept>

namespace pcqr {

namespace {

constexpr int metadata_format_version = 1;

void check_probability(double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(name) + " must lie in [0, 1]");
}

bool same_bits(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (Eigen::Index i = 0; i < a.size(); ++i)
        if (std::bit_cast<std::uint64_t>(a.data()[i]) != std::bit_cast<std::uint64_t>(b.data()[i])) return false;
    return true;
}

class EpisodeBuilder {
  public:
    EpisodeBuilder(int horizon, int dimension) {
        episode_.features.resize(horizon, dimension);
        episode_.rewards.resize(horizon);
        episode_.cumulative.resize(horizon + 1);
        episode_.cumulative(0) = 0.0;
    }

    double cumulative(int t) const { return episode_.cumulative(t); }
    auto feature_row(int t) { return episode_.features.row(t); }

    void reward(int t, double r) {
        episode_.rewards(t) = r;
        episode_.cumulative(t + 1) = episode_.cumulative(t) + r;
    }

    Episode finish() { return std::move(episode_); }

  private:
    Episode episode_;
};

}  // namespace

double apply_greedy_policy(std::array<EdgeState, TamariskConfig::edge_count>& edges, const TamariskConfig& config) {
    static constexpr std::array<int, TamariskConfig::edge_count> priority = {3, 4, 5, 6, 1, 2, 0};
    double spent = 0.0;
    auto affordable = [&](double cost) { return spent + cost <= config.budget; };
    std::array<bool, TamariskConfig::edge_count> acted{};

    for (int e : priority) {
        if (edges[e] == EdgeState::tamarisk && affordable(config.eradicate_plant_cost)) {
            edges[e] = EdgeState::native;
            spent += config.eradicate_plant_cost;
            acted[e] = true;
        }
    }
    for (int e : priority) {
        if (edges[e] == EdgeState::tamarisk && affordable(config.eradicate_cost)) {
            edges[e] = EdgeState::empty;
            spent += config.eradicate_cost;
            acted[e] = true;
        }
    }
    for (int e : priority) {
        if (edges[e] == EdgeState::empty && !acted[e] && affordable(config.plant_cost)) {
            edges[e] = EdgeState::native;
            spent += config.plant_cost;
        }
    }
    return spent;
}

bool operator==(const Episode& a, const Episode& b) {
    return a.id == b.id && same_bits(a.features, b.features) && same_bits(a.rewards, b.rewards) &&
           same_bits(a.cumulative, b.cumulative);
}

void TamariskConfig::validate() const {
    if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
    for (double cost : {eradicate_cost, plant_cost, eradicate_plant_cost, tamarisk_edge_cost, budget})
        if (!(cost >= 0.0)) throw std::invalid_argument("tamarisk costs and budget must be nonnegative");
    check_probability(death_prob, "death_prob");
    check_probability(invasion_prob, "invasion_prob");
    check_probability(seed_spread_prob, "seed_spread_prob");
    check_probability(upstream_spread_weight, "upstream_spread_weight");
    if (!(noise_half_width >= 0.0)) throw std::invalid_argument("noise_half_width must be nonnegative");
}

void SkirmishConfig::validate() const {
    if (blue_min < 0 || blue_min > blue_max || red_min < 0 || red_min > red_max ||
        reinforcement_cap_min < 0 || reinforcement_cap_min > reinforcement_cap_max)
        throw std::invalid_argument("skirmish ranges must be nonempty and nonnegative");
    if (horizon < 1 || horizon < reinforcement_step || reinforcement_step < 0)
        throw std::invalid_argument("skirmish horizon must cover the reinforcement step");
    if (engage_step < 0) throw std::invalid_argument("engage_step must be nonnegative");
    check_probability(blue_hit_prob, "blue_hit_prob");
    check_probability(red_hit_prob, "red_hit_prob");
    if (!(noise_half_width >= 0.0)) throw std::invalid_argument("noise_half_width must be nonnegative");
}

std::string domain_name(const DomainConfig& config) {
    return std::holds_alternative<TamariskConfig>(config) ? "tamarisk" : "skirmish";
}

DomainConfig default_domain(const std::string& name) {
    if (name == "tamarisk") return TamariskConfig{};
    if (name == "skirmish") return SkirmishConfig{};
    throw std::invalid_argument("unknown domain '" + name + "' (expected tamarisk or skirmish)");
}

int domain_horizon(const DomainConfig& config) {
    return std::visit([](const auto& c) { return c.horizon; }, config);
}

std::vector<std::string> feature_names(const DomainConfig& config) {
    if (std::holds_alternative<TamariskConfig>(config))
        return {"edge0", "edge1", "edge2", "edge3", "edge4", "edge5", "edge6", "t", "cumulative_reward"};
    return {"blue", "red", "t", "cumulative_reward", "reinforced"};
}

Episode sample_tamarisk_episode(const TamariskConfig& config, Rng& rng) {
    config.validate();
    constexpr int edges_n = TamariskConfig::edge_count;
    std::array<EdgeState, edges_n> edges{};
    if (config.initial_edges) {
        edges = *config.initial_edges;
    } else {
        for (auto& e : edges) e = static_cast<EdgeState>(rng.uniform_int(0, 2));
    }

    EpisodeBuilder builder(config.horizon, edges_n + 2);
    for (int t = 0; t < config.horizon; ++t) {
        auto x = builder.feature_row(t);
        for (int e = 0; e < edges_n; ++e) x(e) = static_cast<double>(edges[e]);
        x(edges_n) = t;
        x(edges_n + 1) = builder.cumulative(t);

        double cost = apply_greedy_policy(edges, config);
        cost += config.tamarisk_edge_cost *
                static_cast<double>(std::count(edges.begin(), edges.end(), EdgeState::tamarisk));
        double reward = cost > 0.0 ? -cost : 0.0;
        if (t == config.horizon - 1) {
            reward += rng.uniform(-config.noise_half_width, config.noise_half_width);
            builder.reward(t, reward);
            break;
        }
        builder.reward(t, reward);

        for (auto& e : edges)
            if (e != EdgeState::empty && rng.bernoulli(config.death_prob)) e = EdgeState::empty;

        const auto settled = edges;
        for (int e = 0; e < edges_n; ++e) {
            if (settled[e] != EdgeState::empty) continue;
            double escape = 1.0 - config.invasion_prob;
            for (int child : {2 * e + 1, 2 * e + 2})
                if (child < edges_n && settled[child] == EdgeState::tamarisk) escape *= 1.0 - config.seed_spread_prob;
            if (e > 0 && settled[(e - 1) / 2] == EdgeState::tamarisk)
                escape *= 1.0 - config.seed_spread_prob * config.upstream_spread_weight;
            if (rng.bernoulli(1.0 - escape)) edges[e] = EdgeState::tamarisk;
        }
    }
    return builder.finish();
}

Episode sample_skirmish_episode(const SkirmishConfig& config, Rng& rng) {
    config.validate();
    auto blue = static_cast<int>(rng.uniform_int(config.blue_min, config.blue_max));
    auto red = static_cast<int>(rng.uniform_int(config.red_min, config.red_max));

    EpisodeBuilder builder(config.horizon, 5);
    for (int t = 0; t < config.horizon; ++t) {
        if (t == config.reinforcement_step) {
            const auto cap = rng.uniform_int(config.reinforcement_cap_min, config.reinforcement_cap_max);
            red += static_cast<int>(rng.uniform_int(0, cap));
        }
        auto x = builder.feature_row(t);
        x(0) = blue;
        x(1) = red;
        x(2) = t;
        x(3) = builder.cumulative(t);
        x(4) = t >= config.reinforcement_step ? 1.0 : 0.0;

        double reward = 0.0;
        if (t >= config.engage_step && blue > 0 && red > 0) {
            const int red_lost = std::min(red, rng.binomial(blue, config.blue_hit_prob));
            const int blue_lost = std::min(blue, rng.binomial(red, config.red_hit_prob));
            red -= red_lost;
            blue -= blue_lost;
            reward = static_cast<double>(red_lost - blue_lost);
        }
        if (t == config.horizon - 1) reward += rng.uniform(-config.noise_half_width, config.noise_half_width);
        builder.reward(t, reward);
    }
    return builder.finish();
}

Episode sample_episode(const DomainConfig& config, Rng& rng) {
    return std::visit(
        [&](const auto& c) {
            if constexpr (std::is_same_v<std::decay_t<decltype(c)>, TamariskConfig>)
                return sample_tamarisk_episode(c, rng);
            else
                return sample_skirmish_episode(c, rng);
        },
        config);
}

std::vector<Episode> generate_dataset(const DomainConfig& config, std::int64_t episode_count, std::uint64_t seed) {
    if (episode_count < 1) throw std::invalid_argument("episode_count must be >= 1");
    std::visit([](const auto& c) { c.validate(); }, config);
    std::vector<Episode> episodes(static_cast<std::size_t>(episode_count));
    parallel_for(episodes.size(), [&](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        episodes[i] = sample_episode(config, rng);
        episodes[i].id = static_cast<std::int64_t>(i);
    });
    return episodes;
}

// ---------------------------------------------------------------------------
// Dataset files

std::map<std::string, std::string> domain_to_keys(const DomainConfig& config) {
    std::map<std::string, std::string> keys;
    keys["domain"] = domain_name(config);
    if (const auto* c = std::get_if<TamariskConfig>(&config)) {
        keys["horizon"] = std::to_string(c->horizon);
        keys["eradicate_cost"] = format_double(c->eradicate_cost);
        keys["plant_cost"] = format_double(c->plant_cost);
        keys["eradicate_plant_cost"] = format_double(c->eradicate_plant_cost);
        keys["tamarisk_edge_cost"] = format_double(c->tamarisk_edge_cost);
        keys["budget"] = format_double(c->budget);
        keys["death_prob"] = format_double(c->death_prob);
        keys["invasion_prob"] = format_double(c->invasion_prob);
        keys["seed_spread_prob"] = format_double(c->seed_spread_prob);
        keys["upstream_spread_weight"] = format_double(c->upstream_spread_weight);
        keys["noise_half_width"] = format_double(c->noise_half_width);
        if (c->initial_edges) {
            std::string text;
            for (auto e : *c->initial_edges) text += std::to_string(static_cast<int>(e));
            keys["initial_edges"] = text;
        }
    } else {
        const auto& s = std::get<SkirmishConfig>(config);
        keys["horizon"] = std::to_string(s.horizon);
        keys["blue_min"] = std::to_string(s.blue_min);
        keys["blue_max"] = std::to_string(s.blue_max);
        keys["red_min"] = std::to_string(s.red_min);
        keys["red_max"] = std::to_string(s.red_max);
        keys["reinforcement_step"] = std::to_string(s.reinforcement_step);
        keys["reinforcement_cap_min"] = std::to_string(s.reinforcement_cap_min);
        keys["reinforcement_cap_max"] = std::to_string(s.reinforcement_cap_max);
        keys["engage_step"] = std::to_string(s.engage_step);
        keys["blue_hit_prob"] = format_double(s.blue_hit_prob);
        keys["red_hit_prob"] = format_double(s.red_hit_prob);
        keys["noise_half_width"] = format_double(s.noise_half_width);
    }
    return keys;
}

DomainConfig domain_from_keys(const std::map<std::string, std::string>& keys) {
    auto get = [&](const std::string& key) -> const std::string& {
        const auto it = keys.find(key);
        if (it == keys.end()) throw std::runtime_error("metadata missing key '" + key + "'");
        return it->second;
    };
    auto as_int = [&](const std::string& key) { return static_cast<int>(parse_int(get(key))); };
    auto as_double = [&](const std::string& key) { return parse_double(get(key)); };

    const auto name = get("domain");
    if (name == "tamarisk") {
        TamariskConfig c;
        c.horizon = as_int("horizon");
        c.eradicate_cost = as_double("eradicate_cost");
        c.plant_cost = as_double("plant_cost");
        c.eradicate_plant_cost = as_double("eradicate_plant_cost");
        c.tamarisk_edge_cost = as_double("tamarisk_edge_cost");
        c.budget = as_double("budget");
        c.death_prob = as_double("death_prob");
        c.invasion_prob = as_double("invasion_prob");
        c.seed_spread_prob = as_double("seed_spread_prob");
        c.upstream_spread_weight = as_double("upstream_spread_weight");
        c.noise_half_width = as_double("noise_half_width");
        if (const auto it = keys.find("initial_edges"); it != keys.end()) {
            if (it->second.size() != TamariskConfig::edge_count) throw std::runtime_error("bad initial_edges");
            std::array<EdgeState, TamariskConfig::edge_count> edges{};
            for (int e = 0; e < TamariskConfig::edge_count; ++e) {
                const int code = it->second[e] - '0';
                if (code < 0 || code > 2) throw std::runtime_error("bad initial_edges");
                edges[e] = static_cast<EdgeState>(code);
            }
            c.initial_edges = edges;
        }
        c.validate();
        return c;
    }
    if (name == "skirmish") {
        SkirmishConfig s;
        s.horizon = as_int("horizon");
        s.blue_min = as_int("blue_min");
        s.blue_max = as_int("blue_max");
        s.red_min = as_int("red_min");
        s.red_max = as_int("red_max");
        s.reinforcement_step = as_int("reinforcement_step");
        s.reinforcement_cap_min = as_int("reinforcement_cap_min");
        s.reinforcement_cap_max = as_int("reinforcement_cap_max");
        s.engage_step = as_int("engage_step");
        s.blue_hit_prob = as_double("blue_hit_prob");
        s.red_hit_prob = as_double("red_hit_prob");
        s.noise_half_width = as_double("noise_half_width");
        s.validate();
        return s;
    }
    throw std::runtime_error("unknown domain '" + name + "' in metadata");
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
    const int horizon = domain_horizon(dataset.domain);
    const auto names = feature_names(dataset.domain);

    std::string csv = "episode_id,t";
    for (const auto& name : names) csv += "," + name;
    csv += ",reward,cumulative\n";
    for (const auto& episode : dataset.episodes) {
        if (episode.horizon() != horizon || episode.features.cols() != static_cast<Eigen::Index>(names.size()))
            throw std::invalid_argument("episode shape does not match the domain");
        const auto id = std::to_string(episode.id);
        for (int t = 0; t < horizon; ++t) {
            csv += id;
            csv += ',';
            csv += std::to_string(t);
            for (Eigen::Index j = 0; j < episode.features.cols(); ++j) {
                csv += ',';
                csv += format_double(episode.features(t, j));
            }
            csv += ',';
            csv += format_double(episode.rewards(t));
            csv += ',';
            csv += format_double(episode.cumulative(t));
            csv += '\n';
        }
    }

    std::string meta;
    meta += "format_version=" + std::to_string(metadata_format_version) + "\n";
    for (const auto& [key, value] : domain_to_keys(dataset.domain)) meta += key + "=" + value + "\n";
    meta += "seed=" + std::to_string(dataset.seed) + "\n";
    meta += "episode_count=" + std::to_string(dataset.episodes.size()) + "\n";
    meta += "feature_count=" + std::to_string(names.size()) + "\n";
    meta += "rng=" + std::string(rng_algorithm) + "\n";

    write_file_atomic(dir / "episodes.csv", csv);
    write_file_atomic(dir / "metadata.txt", meta);
}

Dataset read_dataset(const std::filesystem::path& dir) {
    std::map<std::string, std::string> keys;
    {
        std::istringstream in(read_file(dir / "metadata.txt"));
        std::string line;
        while (std::getline(in, line)) {
            const auto stripped = trim(line);
            if (stripped.empty() || stripped.front() == '#') continue;
            const auto eq = stripped.find('=');
            if (eq == std::string_view::npos) throw std::runtime_error("malformed metadata line: " + line);
            keys[std::string(trim(stripped.substr(0, eq)))] = std::string(trim(stripped.substr(eq + 1)));
        }
    }
    if (keys["format_version"] != std::to_string(metadata_format_version))
        throw std::runtime_error("unsupported dataset format version");

    Dataset dataset;
    dataset.domain = domain_from_keys(keys);
    dataset.seed = static_cast<std::uint64_t>(std::stoull(keys.at("seed")));
    const int horizon = domain_horizon(dataset.domain);
    const auto dimension = static_cast<Eigen::Index>(feature_names(dataset.domain).size());
    const auto expected_count = parse_int(keys.at("episode_count"));

    std::istringstream in(read_file(dir / "episodes.csv"));
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty episodes.csv");
    if (static_cast<Eigen::Index>(split(line, ',').size()) != dimension + 4)
        throw std::runtime_error("episodes.csv header does not match metadata");

    Episode current;
    int next_t = 0;
    std::size_t line_number = 1;
    while (std::getline(in, line)) {
        ++line_number;
        if (trim(line).empty()) continue;
        const auto fields = split(line, ',');
        if (static_cast<Eigen::Index>(fields.size()) != dimension + 4)
            throw std::runtime_error("episodes.csv line " + std::to_string(line_number) + ": wrong field count");
        const auto id = parse_int(fields[0]);
        const auto t = parse_int(fields[1]);
        if (t != next_t) throw std::runtime_error("episodes.csv line " + std::to_string(line_number) + ": t out of order");
        if (t == 0) {
            current = Episode{};
            current.id = id;
            current.features.resize(horizon, dimension);
            current.rewards.resize(horizon);
            current.cumulative.resize(horizon + 1);
        } else if (id != current.id) {
            throw std::runtime_error("episodes.csv line " + std::to_string(line_number) + ": episode cut short");
        }
        for (Eigen::Index j = 0; j < dimension; ++j) current.features(t, j) = parse_double(fields[2 + j]);
        current.rewards(t) = parse_double(fields[2 + dimension]);
        current.cumulative(t) = parse_double(fields[3 + dimension]);
        if (t == 0 ? current.cumulative(0) != 0.0
                   : current.cumulative(t) != current.cumulative(t - 1) + current.rewards(t - 1))
            throw std::runtime_error("episodes.csv line " + std::to_string(line_number) +
                                     ": cumulative reward is not the prefix sum of rewards");
        next_t = static_cast<int>(t) + 1;
        if (next_t == horizon) {
            current.cumulative(horizon) = current.cumulative(horizon - 1) + current.rewards(horizon - 1);
            dataset.episodes.push_back(std::move(current));
            next_t = 0;
        }
    }
    if (next_t != 0) throw std::runtime_error("episodes.csv ends mid-episode");
    if (static_cast<std::int64_t>(dataset.episodes.size()) != expected_count)
        throw std::runtime_error("episodes.csv episode count does not match metadata");
    return dataset;
}

}  // namespace pcqr
