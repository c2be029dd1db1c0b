#include "pcqr/forest.hpp"

#include "pcqr/io.hpp"
#include "pcqr/parallel.hpp"
#include "pcqr/random.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace pcqr {

static_assert(std::endian::native == std::endian::little, "model files are little-endian");

namespace {

constexpr char forest_magic[8] = {'P', 'C', 'Q', 'R', 'Q', 'R', 'F', '\0'};
constexpr std::uint32_t forest_format_version = 1;

template <typename Vector>
int descend(std::span<const RegressionTree::Node> nodes, const Vector& x) {
    std::int32_t index = 0;
    while (nodes[index].feature >= 0) {
        const auto& node = nodes[index];
        index = x(node.feature) <= node.threshold ? node.left : node.right;
    }
    return nodes[index].leaf;
}

struct Split {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

}  // namespace

void LabeledData::validate(Eigen::Index min_rows) const {
    if (features.rows() != responses.size())
        throw std::invalid_argument("feature rows (" + std::to_string(features.rows()) +
                                    ") and responses (" + std::to_string(responses.size()) + ") differ");
    if (responses.size() < min_rows)
        throw std::invalid_argument("need at least " + std::to_string(min_rows) + " rows, got " +
                                    std::to_string(responses.size()));
    if (!features.allFinite() || !responses.allFinite())
        throw std::invalid_argument("non-finite value in labeled data");
}

void ForestConfig::validate() const {
    if (tree_count < 1) throw std::invalid_argument("tree_count must be >= 1");
    if (min_leaf_size < 1) throw std::invalid_argument("min_leaf_size must be >= 1");
    if (!(feature_subsample > 0.0 && feature_subsample <= 1.0))
        throw std::invalid_argument("feature_subsample must lie in (0, 1]");
}

// ---------------------------------------------------------------------------
// WeightedCdf

WeightedCdf::WeightedCdf(std::span<const double> values, std::span<const double> weights) {
    if (values.size() != weights.size()) throw std::invalid_argument("values and weights differ in length");
    std::vector<std::pair<double, double>> pairs;
    pairs.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i]) || !std::isfinite(weights[i]) || weights[i] < 0.0)
            throw std::invalid_argument("weighted CDF needs finite values and nonnegative weights");
        if (weights[i] > 0.0) pairs.emplace_back(values[i], weights[i]);
    }
    if (pairs.empty()) throw std::invalid_argument("weighted CDF has no positive weight");
    std::sort(pairs.begin(), pairs.end());

    double total = 0.0;
    for (const auto& [value, weight] : pairs) {
        total += weight;
        if (!values_.empty() && values_.back() == value) {
            levels_.back() = total;
        } else {
            values_.push_back(value);
            levels_.push_back(total);
        }
    }
    for (auto& level : levels_) level /= total;
    levels_.back() = 1.0;
}

double WeightedCdf::cdf(double y) const {
    if (y < values_.front()) return 0.0;
    if (y >= values_.back()) return 1.0;
    const auto upper = std::upper_bound(values_.begin(), values_.end(), y);
    const auto j = static_cast<std::size_t>(upper - values_.begin()) - 1;
    const double fraction = (y - values_[j]) / (values_[j + 1] - values_[j]);
    return levels_[j] + fraction * (levels_[j + 1] - levels_[j]);
}

double WeightedCdf::quantile(double alpha) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("quantile level outside [0, 1]");
    if (alpha <= levels_.front()) return values_.front();
    if (alpha >= 1.0) return values_.back();
    const auto it = std::lower_bound(levels_.begin(), levels_.end(), alpha);
    const auto k = static_cast<std::size_t>(it - levels_.begin());
    const double fraction = (alpha - levels_[k - 1]) / (levels_[k] - levels_[k - 1]);
    return values_[k - 1] + fraction * (values_[k] - values_[k - 1]);
}

ExtendedProbability WeightedCdf::extended(double y) const {
    double excess = 0.0;
    if (y < values_.front())
        excess = y - values_.front();
    else if (y > values_.back())
        excess = y - values_.back();
    return {cdf(y), excess};
}

// ---------------------------------------------------------------------------
// Trees

int RegressionTree::leaf_of(const FeatureRef& x) const { return descend(nodes_, x); }

std::span<const std::int32_t> RegressionTree::leaf_rows(int leaf) const {
    const auto begin = static_cast<std::size_t>(leaf_offsets_.at(leaf));
    const auto end = static_cast<std::size_t>(leaf_offsets_.at(leaf + 1));
    return std::span<const std::int32_t>(leaf_members_).subspan(begin, end - begin);
}

namespace {

Split best_split(const LabeledData& data, std::span<const std::int32_t> rows, int min_leaf, int mtry,
                 Rng& rng, std::vector<int>& feature_order,
                 std::vector<std::pair<double, std::int32_t>>& scratch) {
    Split best;
    const auto m = static_cast<std::int64_t>(rows.size());
    if (m < 2 * static_cast<std::int64_t>(min_leaf)) return best;

    double parent_sum = 0.0;
    for (auto r : rows) parent_sum += data.responses(r);

    // Draw features without replacement until mtry of them offered an
    // admissible cut; constant features and ones without a cut respecting
    // min_leaf do not count.
    const int d = static_cast<int>(feature_order.size());
    std::iota(feature_order.begin(), feature_order.end(), 0);
    int evaluated = 0;
    for (int pick = 0; pick < d && evaluated < mtry; ++pick) {
        const auto swap_with = static_cast<int>(rng.uniform_int(pick, d - 1));
        std::swap(feature_order[pick], feature_order[swap_with]);
        const int f = feature_order[pick];

        scratch.clear();
        for (auto r : rows) scratch.emplace_back(data.features(r, f), r);
        std::sort(scratch.begin(), scratch.end());
        if (scratch.front().first == scratch.back().first) continue;

        bool admissible = false;
        double left_sum = 0.0;
        for (std::int64_t i = 1; i < m; ++i) {
            left_sum += data.responses(scratch[i - 1].second);
            if (i < min_leaf || m - i < min_leaf) continue;
            const double lower = scratch[i - 1].first;
            const double upper = scratch[i].first;
            if (lower == upper) continue;
            admissible = true;
            const double left_mean = left_sum / static_cast<double>(i);
            const double right_mean = (parent_sum - left_sum) / static_cast<double>(m - i);
            const double gap = left_mean - right_mean;
            if (std::abs(gap) <= 1e-12 * std::max(std::abs(left_mean), std::abs(right_mean))) continue;
            // Reduction of the within-node sum of squares.
            const double gain = static_cast<double>(i) * static_cast<double>(m - i) / static_cast<double>(m) * gap * gap;
            if (gain > best.gain) {
                double threshold = 0.5 * (lower + upper);
                if (threshold >= upper) threshold = lower;
                best = {f, threshold, gain};
            }
        }
        if (admissible) ++evaluated;
    }
    return best;
}

}  // namespace

RegressionTree grow_tree(const LabeledData& data, const ForestConfig& config, std::uint64_t tree_seed) {
    Rng rng(tree_seed);
    const auto n = static_cast<std::int32_t>(data.size());
    const auto d = static_cast<int>(data.dimension());
    const int mtry = std::clamp(static_cast<int>(std::ceil(config.feature_subsample * d - 1e-12)), 1, std::max(d, 1));

    std::vector<std::int32_t> sample(static_cast<std::size_t>(n));
    if (config.bootstrap) {
        for (auto& r : sample) r = static_cast<std::int32_t>(rng.uniform_int(0, n - 1));
    } else {
        std::iota(sample.begin(), sample.end(), 0);
    }

    RegressionTree tree;
    tree.nodes_.emplace_back();
    struct Task {
        std::int32_t node;
        std::size_t begin;
        std::size_t end;
    };
    std::vector<Task> stack{{0, 0, sample.size()}};
    std::vector<int> feature_order(static_cast<std::size_t>(d));
    std::vector<std::pair<double, std::int32_t>> scratch;
    std::int32_t leaves = 0;

    while (!stack.empty()) {
        const Task task = stack.back();
        stack.pop_back();
        const std::span<std::int32_t> rows(sample.data() + task.begin, task.end - task.begin);
        const Split split = best_split(data, rows, config.min_leaf_size, mtry, rng, feature_order, scratch);
        if (split.feature < 0) {
            tree.nodes_[task.node].leaf = leaves++;
            continue;
        }
        const auto middle = std::partition(rows.begin(), rows.end(), [&](std::int32_t r) {
            return data.features(r, split.feature) <= split.threshold;
        });
        const auto left_end = task.begin + static_cast<std::size_t>(middle - rows.begin());
        const auto left = static_cast<std::int32_t>(tree.nodes_.size());
        tree.nodes_.emplace_back();
        tree.nodes_.emplace_back();
        auto& node = tree.nodes_[task.node];
        node.feature = split.feature;
        node.threshold = split.threshold;
        node.left = left;
        node.right = left + 1;
        stack.push_back({left + 1, left_end, task.end});
        stack.push_back({left, task.begin, left_end});
    }

    // Every training row, in-bag or not, is assigned to exactly one leaf.
    std::vector<std::int32_t> leaf_of_row(static_cast<std::size_t>(n));
    tree.leaf_offsets_.assign(static_cast<std::size_t>(leaves) + 1, 0);
    for (std::int32_t r = 0; r < n; ++r) {
        leaf_of_row[r] = descend(tree.nodes_, data.features.row(r));
        ++tree.leaf_offsets_[leaf_of_row[r] + 1];
    }
    std::partial_sum(tree.leaf_offsets_.begin(), tree.leaf_offsets_.end(), tree.leaf_offsets_.begin());
    tree.leaf_members_.resize(static_cast<std::size_t>(n));
    auto cursor = tree.leaf_offsets_;
    for (std::int32_t r = 0; r < n; ++r) tree.leaf_members_[cursor[leaf_of_row[r]]++] = r;
    return tree;
}

// ---------------------------------------------------------------------------
// Forest

ForestModel fit_forest(const TrainingSet& data, const ForestConfig& config) {
    data.validate(2);
    config.validate();
    if (data.size() > std::numeric_limits<std::int32_t>::max()) throw std::invalid_argument("training set too large");

    ForestModel model;
    model.dimension_ = data.dimension();
    model.responses_ = data.responses;
    model.trees_.resize(static_cast<std::size_t>(config.tree_count));
    parallel_for(model.trees_.size(), [&](std::size_t t) {
        model.trees_[t] = grow_tree(data, config, derive_seed(config.seed, t));
    });

    const auto n = static_cast<std::size_t>(data.size());
    model.sorted_order_.resize(n);
    std::iota(model.sorted_order_.begin(), model.sorted_order_.end(), 0);
    std::stable_sort(model.sorted_order_.begin(), model.sorted_order_.end(),
                     [&](std::int32_t a, std::int32_t b) { return data.responses(a) < data.responses(b); });
    model.rank_of_row_.resize(n);
    for (std::size_t k = 0; k < n; ++k) model.rank_of_row_[model.sorted_order_[k]] = static_cast<std::int32_t>(k);
    return model;
}

void ForestModel::check_dimension(const FeatureRef& x) const {
    if (trees_.empty()) throw std::logic_error("forest is not fitted");
    if (x.size() != dimension_)
        throw std::invalid_argument("feature dimension " + std::to_string(x.size()) + " != model dimension " +
                                    std::to_string(dimension_));
}

Eigen::VectorXd ForestModel::leaf_weights(const FeatureRef& x) const {
    check_dimension(x);
    Eigen::VectorXd weights = Eigen::VectorXd::Zero(responses_.size());
    const double per_tree = 1.0 / static_cast<double>(trees_.size());
    for (const auto& tree : trees_) {
        const auto rows = tree.leaf_rows(tree.leaf_of(x));
        const double share = per_tree / static_cast<double>(rows.size());
        for (auto r : rows) weights(r) += share;
    }
    return weights;
}

WeightedCdf ForestModel::conditional(const FeatureRef& x) const {
    check_dimension(x);
    // Dense accumulation over response ranks; the scan below visits ranks in
    // increasing response order and clears the buffer as it goes.
    thread_local std::vector<double> weight;
    thread_local std::vector<std::int32_t> touched;
    weight.assign(responses_.size(), 0.0);
    touched.clear();
    const double per_tree = 1.0 / static_cast<double>(trees_.size());
    for (const auto& tree : trees_) {
        const auto rows = tree.leaf_rows(tree.leaf_of(x));
        const double share = per_tree / static_cast<double>(rows.size());
        for (auto r : rows) {
            const auto rank = rank_of_row_[r];
            if (weight[rank] == 0.0) touched.push_back(rank);
            weight[rank] += share;
        }
    }
    std::sort(touched.begin(), touched.end());

    WeightedCdf result;
    double total = 0.0;
    for (auto rank : touched) {
        const double value = responses_(sorted_order_[rank]);
        total += weight[rank];
        if (!result.values_.empty() && result.values_.back() == value) {
            result.levels_.back() = total;
        } else {
            result.values_.push_back(value);
            result.levels_.push_back(total);
        }
    }
    for (auto& level : result.levels_) level /= total;
    result.levels_.back() = 1.0;
    return result;
}

double cdf(const ForestModel& model, const FeatureRef& x, double y) { return model.conditional(x).cdf(y); }

double quantile(const ForestModel& model, const FeatureRef& x, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("quantile level outside [0, 1]");
    return model.conditional(x).quantile(alpha);
}

// ---------------------------------------------------------------------------
// Serialization

void ForestModel::save(std::ostream& out) const {
    BinaryWriter writer(out);
    out.write(forest_magic, sizeof(forest_magic));
    writer.put(forest_format_version);
    writer.put<std::int64_t>(dimension_);
    writer.put_array(responses_.data(), static_cast<std::size_t>(responses_.size()));
    writer.put_array(sorted_order_.data(), sorted_order_.size());
    writer.put<std::uint64_t>(trees_.size());
    for (const auto& tree : trees_) {
        writer.put<std::uint64_t>(tree.nodes_.size());
        for (const auto& node : tree.nodes_) {
            writer.put(node.feature);
            writer.put(node.threshold);
            writer.put(node.left);
            writer.put(node.right);
            writer.put(node.leaf);
        }
        writer.put_array(tree.leaf_offsets_.data(), tree.leaf_offsets_.size());
        writer.put_array(tree.leaf_members_.data(), tree.leaf_members_.size());
    }
    if (!out) throw std::runtime_error("failed writing forest model");
}

ForestModel ForestModel::load(std::istream& in) {
    char magic[sizeof(forest_magic)];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + sizeof(magic), forest_magic))
        throw std::runtime_error("not a forest model file");
    BinaryReader reader(in);
    if (const auto version = reader.get<std::uint32_t>(); version != forest_format_version)
        throw std::runtime_error("unsupported forest format version " + std::to_string(version));

    ForestModel model;
    model.dimension_ = reader.get<std::int64_t>();
    const auto responses = reader.get_array<double>();
    model.responses_ = Eigen::Map<const Eigen::VectorXd>(responses.data(), static_cast<Eigen::Index>(responses.size()));
    model.sorted_order_ = reader.get_array<std::int32_t>();
    const auto n = static_cast<std::int32_t>(responses.size());
    if (model.sorted_order_.size() != responses.size() || model.dimension_ < 0)
        throw std::runtime_error("corrupt forest model: inconsistent sizes");
    model.rank_of_row_.assign(responses.size(), -1);
    for (std::size_t k = 0; k < model.sorted_order_.size(); ++k) {
        const auto r = model.sorted_order_[k];
        if (r < 0 || r >= n || model.rank_of_row_[r] != -1) throw std::runtime_error("corrupt forest model: bad order");
        model.rank_of_row_[r] = static_cast<std::int32_t>(k);
    }

    const auto tree_count = reader.get<std::uint64_t>();
    if (tree_count == 0 || tree_count > (1u << 24)) throw std::runtime_error("corrupt forest model: tree count");
    model.trees_.resize(tree_count);
    for (auto& tree : model.trees_) {
        const auto node_count = reader.get<std::uint64_t>();
        if (node_count == 0 || node_count > (1u << 28)) throw std::runtime_error("corrupt forest model: node count");
        tree.nodes_.resize(node_count);
        for (auto& node : tree.nodes_) {
            node.feature = reader.get<std::int32_t>();
            node.threshold = reader.get<double>();
            node.left = reader.get<std::int32_t>();
            node.right = reader.get<std::int32_t>();
            node.leaf = reader.get<std::int32_t>();
        }
        tree.leaf_offsets_ = reader.get_array<std::int32_t>();
        tree.leaf_members_ = reader.get_array<std::int32_t>();
        const auto leaf_count = static_cast<std::int32_t>(tree.leaf_offsets_.size()) - 1;
        if (leaf_count < 1 || tree.leaf_members_.size() != responses.size() ||
            tree.leaf_offsets_.back() != n)
            throw std::runtime_error("corrupt forest model: leaves");
        for (const auto& node : tree.nodes_) {
            const auto limit = static_cast<std::int32_t>(node_count);
            const bool ok = node.feature < 0 ? (node.leaf >= 0 && node.leaf < leaf_count)
                                             : (node.feature < model.dimension_ && node.left > 0 &&
                                                node.left < limit && node.right > 0 && node.right < limit);
            if (!ok) throw std::runtime_error("corrupt forest model: node");
        }
    }
    return model;
}

bool operator==(const ForestModel& a, const ForestModel& b) {
    if (a.dimension_ != b.dimension_ || a.responses_.size() != b.responses_.size() ||
        a.sorted_order_ != b.sorted_order_ || a.trees_.size() != b.trees_.size())
        return false;
    if (!std::equal(a.responses_.begin(), a.responses_.end(), b.responses_.begin())) return false;
    for (std::size_t t = 0; t < a.trees_.size(); ++t) {
        const auto& ta = a.trees_[t];
        const auto& tb = b.trees_[t];
        if (ta.leaf_offsets_ != tb.leaf_offsets_ || ta.leaf_members_ != tb.leaf_members_ ||
            ta.nodes_.size() != tb.nodes_.size())
            return false;
        for (std::size_t k = 0; k < ta.nodes_.size(); ++k) {
            const auto& na = ta.nodes_[k];
            const auto& nb = tb.nodes_[k];
            if (na.feature != nb.feature || na.left != nb.left || na.right != nb.right || na.leaf != nb.leaf ||
                std::bit_cast<std::uint64_t>(na.threshold) != std::bit_cast<std::uint64_t>(nb.threshold))
                return false;
        }
    }
    return true;
}

void save_forest(const ForestModel& model, const std::filesystem::path& path) {
    std::ostringstream buffer(std::ios::binary);
    model.save(buffer);
    write_file_atomic(path, buffer.str());
}

ForestModel load_forest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return ForestModel::load(in);
}

}  // namespace pcqr
