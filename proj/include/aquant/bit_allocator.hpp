#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "aquant/errors.hpp"
#include "aquant/model.hpp"

namespace aquant {

enum class Prefactor { full, half };  // (m + n) / 2 or 1 / 2

struct CodingConfig {
  double epsilon = 0.1;
  Prefactor prefactor = Prefactor::full;
  bool center = true;  // subtract the mean column first

  bool operator==(const CodingConfig&) const = default;
};

const char* prefactor_name(Prefactor p);
Prefactor parse_prefactor(const std::string& name);

/// Weight tensor as an n x m matrix of column vectors, one per output unit:
/// Linear(out, in) -> in x out, Conv2d(O, I, K, K) -> I*K*K x O.
RowMatrixd reshape_for_coding(const LayerSpec& layer, const Tensorf& weight, bool center);

enum class GramSide { automatic, rows, cols };

/// log2 det(I + c * G) with G = W W^T (rows, n x n) or W^T W (cols, m x m).
/// Both sides have the same value; `automatic` picks the smaller Gram matrix.
template <typename Derived>
double log2_det_gram(const Eigen::MatrixBase<Derived>& w, double c, GramSide side = GramSide::automatic) {
  using Mat = Eigen::MatrixXd;
  const Mat wd = w.template cast<double>();
  if (side == GramSide::automatic) side = wd.cols() < wd.rows() ? GramSide::cols : GramSide::rows;
  Mat g = side == GramSide::rows ? Mat(wd * wd.transpose()) : Mat(wd.transpose() * wd);
  g *= c;
  g.diagonal().array() += 1.0;
  const Eigen::LLT<Mat> llt(g);
  if (llt.info() != Eigen::Success) throw DomainError("coding length: Gram matrix not positive definite");
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum() / std::log(2.0);
}

/// Bits to code the columns of W (n x m) up to distortion epsilon^2:
/// prefactor * log2 det(I + n / (m eps^2) W W^T).
template <typename Derived>
double coding_length(const Eigen::MatrixBase<Derived>& w, const CodingConfig& cfg) {
  if (!(cfg.epsilon > 0.0)) throw DomainError("coding length needs epsilon > 0");
  if (!w.template cast<double>().allFinite()) throw DomainError("coding length of non-finite matrix");
  const double n = static_cast<double>(w.rows()), m = static_cast<double>(w.cols());
  if (w.size() == 0) return 0.0;
  const double c = n / (m * cfg.epsilon * cfg.epsilon);
  const double pre = cfg.prefactor == Prefactor::full ? (m + n) / 2.0 : 0.5;
  return std::max(0.0, pre * log2_det_gram(w, c));
}

struct KMeans1D {
  std::vector<int> labels;     // cluster per value, nondecreasing
  std::vector<double> centers;  // ascending
  double cost = 0.0;            // within-cluster sum of squares
};

/// Globally optimal 1-D k-means on sorted values by dynamic programming.
KMeans1D kmeans_1d(std::span<const double> sorted_values, int k);

/// Within-cluster sum of squares of a labelling.
double kmeans_cost(std::span<const double> values, std::span<const int> labels);

struct BitAssignment {
  std::map<std::string, int> bits;
  std::map<std::string, double> coding_lengths;
  std::vector<std::string> order;  // layers by ascending coding length
  std::vector<double> sorted_lengths;
  std::vector<double> centers;
  std::vector<int> bit_list;
  CodingConfig config;
};

/// Clusters the lengths into bit_list.size() groups and hands out bits by
/// ascending cluster center. Clusters with equal centers get the largest bit
/// among them.
BitAssignment assign_bits_from_lengths(const std::vector<std::string>& names, const std::vector<double>& lengths,
                                       std::span<const int> bit_list);

BitAssignment assign_bits(const ModelGraph& model, std::span<const int> bit_list, const CodingConfig& cfg);

nlohmann::json to_json(const BitAssignment& a);
BitAssignment bit_assignment_from_json(const nlohmann::json& j);

}  // namespace aquant
