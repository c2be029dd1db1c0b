#pragma once

#include "pcqr/random.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace pcqr {

/// One trajectory under a fixed policy.
struct Episode {
    std::int64_t id = 0;
    Eigen::MatrixXd features;    // row t is x_t, t = 0..H-1
    Eigen::VectorXd rewards;     // r_t, t = 0..H-1; r_{H-1} carries the tie-breaking noise
    Eigen::VectorXd cumulative;  // b_t, t = 0..H, with b_0 = 0 and b_{t+1} = b_t + r_t

    int horizon() const { return static_cast<int>(rewards.size()); }
    double final_return() const { return cumulative(cumulative.size() - 1); }
    /// y_H - b_t, the response the per-timestep models are fit on.
    double reward_to_go(int t) const { return final_return() - cumulative(t); }

    friend bool operator==(const Episode& a, const Episode& b);
};

enum class EdgeState : int { empty = 0, native = 1, tamarisk = 2 };

/// River network with seven edges in a balanced binary tree. Edge 0 is the
/// outlet; edge e drains into edge (e-1)/2, so 3..6 are the headwaters.
struct TamariskConfig {
    static constexpr int edge_count = 7;

    int horizon = 50;
    double eradicate_cost = 0.5;
    double plant_cost = 0.9;
    double eradicate_plant_cost = 1.4;
    double tamarisk_edge_cost = 1.0;  // per occupied edge per step
    double budget = 3.0;              // per step, over all seven primitive actions
    double death_prob = 0.02;
    double invasion_prob = 0.1;       // background arrival on an empty edge
    double seed_spread_prob = 0.1;    // from a tamarisk edge to the edge it drains into
    double upstream_spread_weight = 0.2;  // multiplier for spread against the flow
    double noise_half_width = 5e-6;
    std::optional<std::array<EdgeState, edge_count>> initial_edges;  // uniform when unset

    void validate() const;
};

struct SkirmishConfig {
    int horizon = 57;
    int blue_min = 5;
    int blue_max = 20;
    int red_min = 5;
    int red_max = 10;
    int reinforcement_step = 14;
    int reinforcement_cap_min = 0;
    int reinforcement_cap_max = 15;
    int engage_step = 5;  // steps spent advancing before the teams meet
    double blue_hit_prob = 0.05;
    double red_hit_prob = 0.06;
    double noise_half_width = 5e-6;

    void validate() const;
};

using DomainConfig = std::variant<TamariskConfig, SkirmishConfig>;

std::string domain_name(const DomainConfig& config);
DomainConfig default_domain(const std::string& name);
int domain_horizon(const DomainConfig& config);
std::vector<std::string> feature_names(const DomainConfig& config);

/// Greedy fixed policy: eradicate+plant, then eradicate, then plant, visiting
/// headwater edges first. Edits `edges` in place and returns the money spent,
/// which never exceeds the budget.
double apply_greedy_policy(std::array<EdgeState, TamariskConfig::edge_count>& edges, const TamariskConfig& config);

/// Features: seven edge codes (0 empty, 1 native, 2 tamarisk), t, b_t.
/// Each step the greedy policy acts on the observed state and pays for its
/// actions plus the tamarisk edges left untreated, so r_t is a function of
/// x_t; deaths and colonization follow. The last step only adds noise.
Episode sample_tamarisk_episode(const TamariskConfig& config, Rng& rng);

/// Features: blue count, red count, t, b_t, reinforced flag.
/// Reinforcements arrive at the start of reinforcement_step, before x_t is
/// observed. Reward is red units eliminated minus blue units eliminated.
Episode sample_skirmish_episode(const SkirmishConfig& config, Rng& rng);

Episode sample_episode(const DomainConfig& config, Rng& rng);

/// Episode i uses the stream derive_seed(seed, i), so output does not depend
/// on how generation is scheduled.
std::vector<Episode> generate_dataset(const DomainConfig& config, std::int64_t episode_count, std::uint64_t seed);

struct Dataset {
    DomainConfig domain;
    std::uint64_t seed = 0;
    std::vector<Episode> episodes;
};

/// Writes <dir>/episodes.csv and <dir>/metadata.txt.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

std::map<std::string, std::string> domain_to_keys(const DomainConfig& config);
DomainConfig domain_from_keys(const std::map<std::string, std::string>& keys);

}  // namespace pcqr
