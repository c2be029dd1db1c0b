#pragma once

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace pcqr {

using FeatureVector = Eigen::VectorXd;
using FeatureRef = Eigen::Ref<const Eigen::VectorXd>;

/// Feature/response pairs, one instance per row. Used for both forest
/// training data and conformal calibration sets.
struct LabeledData {
    Eigen::MatrixXd features;
    Eigen::VectorXd responses;

    Eigen::Index size() const { return responses.size(); }
    Eigen::Index dimension() const { return features.cols(); }

    /// Throws std::invalid_argument unless row counts match, there are at
    /// least `min_rows` rows and every value is finite.
    void validate(Eigen::Index min_rows) const;
};

using TrainingSet = LabeledData;

struct ForestConfig {
    int tree_count = 100;
    int min_leaf_size = 5;
    /// Fraction of features searched per split, at least one. Features that
    /// admit no cut at a node are skipped and do not use up the quota.
    double feature_subsample = 1.0 / 3.0;
    bool bootstrap = true;
    std::uint64_t seed = 0;

    void validate() const;
};

/// A position on the conditional CDF extended past the weighted support.
///
/// `prob` is the clamped CDF value in [0, 1]. `excess` is zero inside the
/// support, y - min below it and y - max above it. Lexicographic order on
/// (prob, excess) is the order of y for a fixed x, so calibration values stay
/// distinct even where the CDF saturates at 0 or 1.
struct ExtendedProbability {
    double prob = 0.0;
    double excess = 0.0;

    friend auto operator<=>(const ExtendedProbability&, const ExtendedProbability&) = default;
};

/// Weighted empirical CDF made continuous by linear interpolation between
/// consecutive distinct response values.
///
/// Knots are (v_j, C_j) where C_j is the normalized cumulative weight up to
/// and including v_j, so the function is 0 below v_1, jumps to C_1 at v_1,
/// rises linearly between knots, and is exactly 1 from the last knot on.
class WeightedCdf {
  public:
    /// `values` need not be sorted or distinct. Zero-weight entries are dropped
    /// and equal values merged. Throws if no positive weight remains.
    WeightedCdf(std::span<const double> values, std::span<const double> weights);

    double cdf(double y) const;

    /// Exact inverse of cdf on [C_1, 1]; alpha at or below C_1 maps to the
    /// support minimum. Throws std::invalid_argument outside [0, 1].
    double quantile(double alpha) const;

    ExtendedProbability extended(double y) const;

    double support_min() const { return values_.front(); }
    double support_max() const { return values_.back(); }
    std::span<const double> knot_values() const { return values_; }
    std::span<const double> knot_levels() const { return levels_; }

  private:
    WeightedCdf() = default;
    friend class ForestModel;

    std::vector<double> values_;
    std::vector<double> levels_;
};

/// Binary regression tree with axis-aligned splits. Leaves hold the indices of
/// every training row routed to them, not only the in-bag rows.
class ForestModel;

class RegressionTree {
  public:
    struct Node {
        std::int32_t feature = -1;  // -1 marks a leaf
        double threshold = 0.0;     // go left when x[feature] <= threshold
        std::int32_t left = -1;
        std::int32_t right = -1;
        std::int32_t leaf = -1;
    };

    int leaf_of(const FeatureRef& x) const;
    std::span<const std::int32_t> leaf_rows(int leaf) const;
    int leaf_count() const { return static_cast<int>(leaf_offsets_.size()) - 1; }
    std::span<const Node> nodes() const { return nodes_; }

  private:
    friend class ForestModel;
    friend bool operator==(const ForestModel& a, const ForestModel& b);
    friend RegressionTree grow_tree(const LabeledData&, const ForestConfig&, std::uint64_t);

    std::vector<Node> nodes_;
    std::vector<std::int32_t> leaf_offsets_;  // CSR offsets into leaf_members_
    std::vector<std::int32_t> leaf_members_;
};

/// Fitted quantile regression forest. Immutable after construction and safe
/// for concurrent queries.
class ForestModel {
  public:
    ForestModel() = default;

    Eigen::Index training_size() const { return responses_.size(); }
    Eigen::Index dimension() const { return dimension_; }
    std::span<const RegressionTree> trees() const { return trees_; }
    const Eigen::VectorXd& responses() const { return responses_; }
    /// Training row indices ordered by ascending response.
    std::span<const std::int32_t> sorted_order() const { return sorted_order_; }

    /// Average over trees of the leaf-membership indicators divided by leaf size.
    Eigen::VectorXd leaf_weights(const FeatureRef& x) const;

    /// Conditional CDF at x; build once and query many times.
    WeightedCdf conditional(const FeatureRef& x) const;

    void save(std::ostream& out) const;
    static ForestModel load(std::istream& in);

    friend bool operator==(const ForestModel& a, const ForestModel& b);

  private:
    friend ForestModel fit_forest(const TrainingSet&, const ForestConfig&);

    void check_dimension(const FeatureRef& x) const;

    Eigen::Index dimension_ = 0;
    std::vector<RegressionTree> trees_;
    Eigen::VectorXd responses_;
    std::vector<std::int32_t> sorted_order_;
    std::vector<std::int32_t> rank_of_row_;
};

/// Grows one CART tree by variance reduction on a (bootstrap) sample and then
/// routes every training row into its leaves.
RegressionTree grow_tree(const LabeledData& data, const ForestConfig& config, std::uint64_t tree_seed);

ForestModel fit_forest(const TrainingSet& data, const ForestConfig& config);

inline Eigen::VectorXd leaf_weights(const ForestModel& model, const FeatureRef& x) {
    return model.leaf_weights(x);
}

double cdf(const ForestModel& model, const FeatureRef& x, double y);
double quantile(const ForestModel& model, const FeatureRef& x, double alpha);

void save_forest(const ForestModel& model, const std::filesystem::path& path);
ForestModel load_forest(const std::filesystem::path& path);

}  // namespace pcqr
