#include "aquant/bit_allocator.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace aquant {

const char* prefactor_name(Prefactor p) { return p == Prefactor::full ? "full" : "half"; }

Prefactor parse_prefactor(const std::string& name) {
  if (name == "full") return Prefactor::full;
  if (name == "half") return Prefactor::half;
  throw ConfigError("unknown prefactor '" + name + "' (expected full or half)");
}

RowMatrixd reshape_for_coding(const LayerSpec& layer, const Tensorf& weight, bool center) {
  if (!layer.has_weights()) throw CapabilityError("layer '" + layer.name + "' carries no weight matrix");
  // weight.matrix() is out x (in * k * k); columns of the coding matrix are its rows.
  RowMatrixd w = weight.matrix().cast<double>().transpose();
  if (center) w.colwise() -= w.rowwise().mean();
  return w;
}

KMeans1D kmeans_1d(std::span<const double> v, int k) {
  const auto n = static_cast<int>(v.size());
  if (k < 1) throw ConfigError("kmeans_1d needs k >= 1");
  if (k > n) throw ConfigError("kmeans_1d: k = " + std::to_string(k) + " exceeds " + std::to_string(n) + " values");
  if (!std::is_sorted(v.begin(), v.end())) throw DomainError("kmeans_1d expects sorted values");

  std::vector<long double> s1(n + 1, 0.0L), s2(n + 1, 0.0L);
  for (int i = 0; i < n; ++i) {
    s1[i + 1] = s1[i] + v[i];
    s2[i + 1] = s2[i] + static_cast<long double>(v[i]) * v[i];
  }
  // Sum of squares of v[i..j) around its mean.
  auto cost = [&](int i, int j) {
    const long double len = j - i, a = s1[j] - s1[i];
    return static_cast<double>(std::max(0.0L, (s2[j] - s2[i]) - a * a / len));
  };

  constexpr double inf = std::numeric_limits<double>::infinity();
  // best[c][j]: optimal cost of the first j values in c + 1 clusters; cut[c][j]: start of the last cluster.
  std::vector<std::vector<double>> best(k, std::vector<double>(n + 1, inf));
  std::vector<std::vector<int>> cut(k, std::vector<int>(n + 1, 0));
  for (int j = 1; j <= n; ++j) best[0][j] = cost(0, j);
  for (int c = 1; c < k; ++c)
    for (int j = c + 1; j <= n; ++j)
      for (int i = c; i < j; ++i) {
        const double total = best[c - 1][i] + cost(i, j);
        if (total < best[c][j]) {
          best[c][j] = total;
          cut[c][j] = i;
        }
      }

  KMeans1D out;
  out.labels.assign(n, 0);
  out.centers.assign(k, 0.0);
  out.cost = best[k - 1][n];
  int j = n;
  for (int c = k - 1; c >= 0; --c) {
    const int i = c == 0 ? 0 : cut[c][j];
    for (int t = i; t < j; ++t) out.labels[t] = c;
    out.centers[c] = static_cast<double>((s1[j] - s1[i]) / (j - i));
    j = i;
  }
  return out;
}

double kmeans_cost(std::span<const double> values, std::span<const int> labels) {
  if (values.size() != labels.size()) throw ShapeError("kmeans_cost: labels and values differ in length");
  std::map<int, std::pair<double, int>> sums;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& [s, c] = sums[labels[i]];
    s += values[i];
    ++c;
  }
  double cost = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& [s, c] = sums[labels[i]];
    const double d = values[i] - s / c;
    cost += d * d;
  }
  return cost;
}

BitAssignment assign_bits_from_lengths(const std::vector<std::string>& names, const std::vector<double>& lengths,
                                       std::span<const int> bit_list) {
  if (bit_list.empty()) throw ConfigError("bit list is empty");
  for (std::size_t i = 1; i < bit_list.size(); ++i)
    if (bit_list[i] <= bit_list[i - 1]) throw ConfigError("bit list must be strictly ascending");
  if (names.size() != lengths.size()) throw ShapeError("one coding length per layer expected");
  if (names.size() < bit_list.size())
    throw ConfigError("bit list has " + std::to_string(bit_list.size()) + " entries but only " +
                      std::to_string(names.size()) + " quantizable layers");

  std::vector<std::size_t> idx(names.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });

  BitAssignment out;
  out.bit_list.assign(bit_list.begin(), bit_list.end());
  for (std::size_t i : idx) {
    out.order.push_back(names[i]);
    out.sorted_lengths.push_back(lengths[i]);
    out.coding_lengths[names[i]] = lengths[i];
  }
  const KMeans1D km = kmeans_1d(out.sorted_lengths, static_cast<int>(bit_list.size()));
  out.centers = km.centers;

  // Equal centers form one group that receives the group's largest bit width.
  std::vector<int> cluster_bits(bit_list.begin(), bit_list.end());
  for (std::size_t c = 0; c < km.centers.size();) {
    std::size_t e = c + 1;
    const double tol = 1e-12 * std::max(1.0, std::fabs(km.centers[c]));
    while (e < km.centers.size() && std::fabs(km.centers[e] - km.centers[c]) <= tol) ++e;
    for (std::size_t t = c; t < e; ++t) cluster_bits[t] = bit_list[e - 1];
    c = e;
  }
  for (std::size_t r = 0; r < out.order.size(); ++r) out.bits[out.order[r]] = cluster_bits[km.labels[r]];
  return out;
}

BitAssignment assign_bits(const ModelGraph& model, std::span<const int> bit_list, const CodingConfig& cfg) {
  std::vector<std::string> names;
  std::vector<double> lengths;
  for (const auto& l : model.layers) {
    if (!l.has_weights()) continue;
    names.push_back(l.name);
    lengths.push_back(coding_length(reshape_for_coding(l, model.param(l.name + ".weight"), cfg.center), cfg));
  }
  BitAssignment a = assign_bits_from_lengths(names, lengths, bit_list);
  a.config = cfg;
  return a;
}

nlohmann::json to_json(const BitAssignment& a) {
  return {
      {"bits", a.bits},
      {"coding_lengths", a.coding_lengths},
      {"order", a.order},
      {"sorted_lengths", a.sorted_lengths},
      {"centers", a.centers},
      {"bit_list", a.bit_list},
      {"epsilon", a.config.epsilon},
      {"prefactor", prefactor_name(a.config.prefactor)},
      {"center", a.config.center},
  };
}

BitAssignment bit_assignment_from_json(const nlohmann::json& j) {
  BitAssignment a;
  try {
    a.bits = j.at("bits").get<std::map<std::string, int>>();
    if (j.contains("coding_lengths")) a.coding_lengths = j.at("coding_lengths").get<std::map<std::string, double>>();
    if (j.contains("order")) a.order = j.at("order").get<std::vector<std::string>>();
    if (j.contains("sorted_lengths")) a.sorted_lengths = j.at("sorted_lengths").get<std::vector<double>>();
    if (j.contains("centers")) a.centers = j.at("centers").get<std::vector<double>>();
    if (j.contains("bit_list")) a.bit_list = j.at("bit_list").get<std::vector<int>>();
    if (j.contains("epsilon")) a.config.epsilon = j.at("epsilon").get<double>();
    if (j.contains("prefactor")) a.config.prefactor = parse_prefactor(j.at("prefactor").get<std::string>());
    if (j.contains("center")) a.config.center = j.at("center").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bit assignment JSON: ") + e.what());
  }
  return a;
}

}  // namespace aquant
