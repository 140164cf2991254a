#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cpbs/error.hpp"

namespace cpbs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Regression coefficients plus the Birnbaum-Saunders shape/dispersion.
struct ModelParams {
  VectorXd beta;
  double phi = 1.0;

  void validate() const {
    if (!(phi > 0.0) || !std::isfinite(phi)) throw Error(ErrorCode::domain, "phi must be positive and finite");
    if (!beta.allFinite()) throw Error(ErrorCode::domain, "beta must be finite");
  }
};

/// Link function g with g(mu) = x'beta. Only the log link is built in.
enum class LinkFunction { log };

inline double link_inverse(LinkFunction link, double eta) {
  switch (link) {
    case LinkFunction::log: return std::exp(eta);
  }
  return std::exp(eta);
}

inline double link_forward(LinkFunction link, double mu) {
  switch (link) {
    case LinkFunction::log: return std::log(mu);
  }
  return std::log(mu);
}

inline const char* to_string(LinkFunction link) {
  switch (link) {
    case LinkFunction::log: return "log";
  }
  return "log";
}

/// One cluster: its label, count vector and covariate rows, as views into
/// the owning dataset.
struct ClusterView {
  const std::string& id;
  std::span<const std::int64_t> y;
  Eigen::Ref<const MatrixXd> X;
  Eigen::Index offset;  // row of the first observation in the stacked design

  Eigen::Index size() const { return static_cast<Eigen::Index>(y.size()); }
};

/// Clustered counts with a stacked design matrix. Observations of a cluster
/// occupy a contiguous block of rows. Immutable after construction.
class ClusteredDataset {
 public:
  struct Cluster {
    std::string id;
    std::vector<std::int64_t> y;
    MatrixXd X;  // n_k x p
  };

  ClusteredDataset() = default;

  /// Builds from per-cluster blocks. Throws on empty clusters, dimension
  /// mismatch, negative counts, non-finite covariates, and (when
  /// check_rank) a rank-deficient stacked design.
  explicit ClusteredDataset(std::vector<Cluster> clusters, bool check_rank = true) {
    if (clusters.empty()) throw Error(ErrorCode::dimension, "dataset needs at least one cluster");
    const Eigen::Index p = clusters.front().X.cols();
    if (p < 1) throw Error(ErrorCode::dimension, "covariate dimension must be at least 1");

    Eigen::Index n = 0;
    for (const auto& c : clusters) {
      if (c.y.empty()) throw Error(ErrorCode::dimension, "cluster '" + c.id + "' is empty");
      if (c.X.cols() != p) throw Error(ErrorCode::dimension, "cluster '" + c.id + "' has wrong covariate dimension");
      if (c.X.rows() != static_cast<Eigen::Index>(c.y.size()))
        throw Error(ErrorCode::dimension, "cluster '" + c.id + "' has mismatched X rows and counts");
      n += c.X.rows();
    }

    X_.resize(n, p);
    y_.resize(n);
    counts_.reserve(static_cast<std::size_t>(n));
    Eigen::Index row = 0;
    for (auto& c : clusters) {
      for (std::size_t j = 0; j < c.y.size(); ++j) {
        if (c.y[j] < 0) throw Error(ErrorCode::domain, "negative count in cluster '" + c.id + "'");
        counts_.push_back(c.y[j]);
        y_(row + static_cast<Eigen::Index>(j)) = static_cast<double>(c.y[j]);
      }
      if (!c.X.allFinite()) throw Error(ErrorCode::nan_cell, "non-finite covariate in cluster '" + c.id + "'");
      X_.middleRows(row, c.X.rows()) = c.X;
      offsets_.push_back(row);
      ids_.push_back(std::move(c.id));
      row += c.X.rows();
    }
    offsets_.push_back(n);

    if (check_rank && !full_column_rank(X_))
      throw Error(ErrorCode::rank_deficient, "stacked design matrix does not have full column rank");
  }

  static bool full_column_rank(const MatrixXd& X) {
    if (X.rows() < X.cols()) return false;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    return qr.rank() == X.cols();
  }

  Eigen::Index n() const { return X_.rows(); }
  Eigen::Index p() const { return X_.cols(); }
  std::size_t q() const { return ids_.size(); }

  const MatrixXd& X() const { return X_; }
  const VectorXd& y() const { return y_; }
  std::span<const std::int64_t> counts() const { return counts_; }

  Eigen::Index cluster_size(std::size_t k) const { return offsets_[k + 1] - offsets_[k]; }
  Eigen::Index cluster_offset(std::size_t k) const { return offsets_[k]; }
  const std::string& cluster_id(std::size_t k) const { return ids_[k]; }

  ClusterView cluster(std::size_t k) const {
    const Eigen::Index off = offsets_[k];
    const Eigen::Index nk = cluster_size(k);
    return ClusterView{ids_[k], std::span<const std::int64_t>(counts_).subspan(static_cast<std::size_t>(off), static_cast<std::size_t>(nk)),
                       X_.middleRows(off, nk), off};
  }

  std::vector<Eigen::Index> cluster_sizes() const {
    std::vector<Eigen::Index> sizes(q());
    for (std::size_t k = 0; k < q(); ++k) sizes[k] = cluster_size(k);
    return sizes;
  }

  /// Same design and cluster structure, new responses (length n).
  ClusteredDataset with_counts(std::span<const std::int64_t> y) const {
    if (static_cast<Eigen::Index>(y.size()) != n()) throw Error(ErrorCode::dimension, "response length mismatch");
    ClusteredDataset out = *this;
    for (Eigen::Index i = 0; i < n(); ++i) {
      if (y[static_cast<std::size_t>(i)] < 0) throw Error(ErrorCode::domain, "negative count");
      out.counts_[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)];
      out.y_(i) = static_cast<double>(y[static_cast<std::size_t>(i)]);
    }
    return out;
  }

  /// Copy with one observation removed (no rank check). The cluster is
  /// dropped entirely if it becomes empty.
  ClusteredDataset without_observation(Eigen::Index row) const {
    std::vector<Cluster> clusters;
    for (std::size_t k = 0; k < q(); ++k) {
      Cluster c{ids_[k], {}, MatrixXd(0, p())};
      const Eigen::Index off = offsets_[k], nk = cluster_size(k);
      const bool hit = row >= off && row < off + nk;
      if (hit && nk == 1) continue;
      c.X.resize(hit ? nk - 1 : nk, p());
      Eigen::Index r = 0;
      for (Eigen::Index i = off; i < off + nk; ++i) {
        if (i == row) continue;
        c.y.push_back(counts_[static_cast<std::size_t>(i)]);
        c.X.row(r++) = X_.row(i);
      }
      clusters.push_back(std::move(c));
    }
    return ClusteredDataset(std::move(clusters), false);
  }

  /// Canonical form: clusters sorted by id, observations within a cluster
  /// sorted by (count, covariate row). Reordering the input in any way
  /// yields the same canonical dataset, so fits on it are order-free.
  /// Also returns, for each canonical row, the originating row.
  std::pair<ClusteredDataset, std::vector<Eigen::Index>> canonical() const {
    std::vector<std::size_t> korder(q());
    std::iota(korder.begin(), korder.end(), std::size_t{0});
    std::stable_sort(korder.begin(), korder.end(), [&](std::size_t a, std::size_t b) { return ids_[a] < ids_[b]; });

    std::vector<Cluster> clusters;
    std::vector<Eigen::Index> origin;
    origin.reserve(static_cast<std::size_t>(n()));
    for (std::size_t k : korder) {
      const Eigen::Index off = offsets_[k], nk = cluster_size(k);
      std::vector<Eigen::Index> rows(static_cast<std::size_t>(nk));
      std::iota(rows.begin(), rows.end(), off);
      std::stable_sort(rows.begin(), rows.end(), [&](Eigen::Index a, Eigen::Index b) {
        if (counts_[static_cast<std::size_t>(a)] != counts_[static_cast<std::size_t>(b)])
          return counts_[static_cast<std::size_t>(a)] < counts_[static_cast<std::size_t>(b)];
        for (Eigen::Index l = 0; l < p(); ++l)
          if (X_(a, l) != X_(b, l)) return X_(a, l) < X_(b, l);
        return false;
      });
      Cluster c{ids_[k], {}, MatrixXd(nk, p())};
      for (Eigen::Index r = 0; r < nk; ++r) {
        const Eigen::Index src = rows[static_cast<std::size_t>(r)];
        c.y.push_back(counts_[static_cast<std::size_t>(src)]);
        c.X.row(r) = X_.row(src);
        origin.push_back(src);
      }
      clusters.push_back(std::move(c));
    }
    return {ClusteredDataset(std::move(clusters), false), std::move(origin)};
  }

 private:
  MatrixXd X_;
  VectorXd y_;
  std::vector<std::int64_t> counts_;
  std::vector<Eigen::Index> offsets_;
  std::vector<std::string> ids_;
};

}  // namespace cpbs
