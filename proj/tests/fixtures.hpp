#pragma once

#include "pcqr/forest.hpp"

#include <Eigen/Core>

#include <cmath>
#include <random>
#include <vector>

namespace fixture {

// Y | x ~ N(x, 1 + x^2), x ~ U[0, 3].
struct Heteroskedastic {
    std::mt19937_64 engine;

    explicit Heteroskedastic(std::uint64_t seed) : engine(seed) {}

    pcqr::LabeledData draw(int n) {
        std::uniform_real_distribution<double> ux(0.0, 3.0);
        std::normal_distribution<double> z(0.0, 1.0);
        pcqr::LabeledData d;
        d.features.resize(n, 1);
        d.responses.resize(n);
        for (int i = 0; i < n; ++i) {
            const double x = ux(engine);
            d.features(i, 0) = x;
            d.responses(i) = x + std::sqrt(1.0 + x * x) * z(engine);
        }
        return d;
    }
};

inline pcqr::ForestConfig small_forest(std::uint64_t seed = 1) {
    pcqr::ForestConfig c;
    c.tree_count = 50;
    c.min_leaf_size = 10;
    c.feature_subsample = 1.0;
    c.seed = seed;
    return c;
}

// Strictly increasing estimated quantile function with Q(0.05)=0, Q(0.1)=1,
// Q(0.9)=9, Q(0.95)=10: the CQR counterexample with a=0, b=10, eps=1.
inline pcqr::WeightedCdf counterexample_cdf() {
    const std::vector<double> values = {0, 1, 9, 10, 11};
    const std::vector<double> weights = {0.05, 0.05, 0.8, 0.05, 0.05};
    return pcqr::WeightedCdf(values, weights);
}

}  // namespace fixture
