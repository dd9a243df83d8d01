#pragma once

#include "astc/common.hpp"
#include "astc/text_io.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace astc {

enum class CovarianceType { full, diagonal };

struct GmmConfig {
  /// Convergence threshold on the per-observation mean log-likelihood improvement.
  double tol_ll = 1e-6;
  int max_iter = 500;
  int n_init = 5;
  /// Lower bound on every covariance eigenvalue.
  double cov_floor = 1e-6;
  CovarianceType covariance = CovarianceType::full;
};

/// Gaussian mixture with cached Cholesky factors. Immutable once constructed.
class GmmModel {
 public:
  GmmModel() = default;

  GmmModel(Vec weights, std::vector<Vec> means, std::vector<Mat> covariances,
           CovarianceType type = CovarianceType::full, double log_likelihood = 0.0)
      : weights_(std::move(weights)),
        means_(std::move(means)),
        covs_(std::move(covariances)),
        type_(type),
        log_likelihood_(log_likelihood) {
    const auto k = static_cast<std::size_t>(weights_.size());
    if (k == 0 || means_.size() != k || covs_.size() != k) throw ConfigError("gmm: inconsistent component count");
    if (!is_simplex(weights_)) throw ConfigError("gmm: weights must form a simplex");
    const auto d = means_[0].size();
    chol_.reserve(k);
    chol_inv_.reserve(k);
    log_norm_.resize(static_cast<Eigen::Index>(k));
    for (std::size_t c = 0; c < k; ++c) {
      if (means_[c].size() != d || covs_[c].rows() != d || covs_[c].cols() != d)
        throw ConfigError("gmm: inconsistent dimensions");
      Eigen::LLT<Mat> llt(covs_[c]);
      if (llt.info() != Eigen::Success) throw ConfigError("gmm: covariance not positive definite");
      Mat l = llt.matrixL();
      double logdet = 2.0 * l.diagonal().array().log().sum();
      log_norm_[static_cast<Eigen::Index>(c)] =
          std::log(weights_[static_cast<Eigen::Index>(c)]) - 0.5 * (static_cast<double>(d) * std::log(2.0 * M_PI) + logdet);
      chol_inv_.push_back(l.triangularView<Eigen::Lower>().solve(Mat::Identity(d, d)));
      chol_.push_back(std::move(l));
    }
  }

  int K() const { return static_cast<int>(weights_.size()); }
  int dim() const { return means_.empty() ? 0 : static_cast<int>(means_[0].size()); }
  const Vec& weights() const { return weights_; }
  const std::vector<Vec>& means() const { return means_; }
  const std::vector<Mat>& covariances() const { return covs_; }
  CovarianceType covariance_type() const { return type_; }
  double log_likelihood() const { return log_likelihood_; }

  /// log(w_k) + log N(o; mu_k, Sigma_k) for every component.
  Vec weighted_log_densities(const Vec& o) const {
    Vec out(K());
    for (int c = 0; c < K(); ++c) {
      Vec z = chol_[static_cast<std::size_t>(c)].triangularView<Eigen::Lower>().solve(o - means_[static_cast<std::size_t>(c)]);
      out[c] = log_norm_[c] - 0.5 * z.squaredNorm();
    }
    return out;
  }

  /// n x K table of weighted log densities for the rows of X (n x d).
  Mat weighted_log_densities_batch(const Mat& X) const {
    Mat out(X.rows(), K());
    for (int c = 0; c < K(); ++c) {
      const auto& li = chol_inv_[static_cast<std::size_t>(c)];
      Mat z = (X.rowwise() - means_[static_cast<std::size_t>(c)].transpose()) * li.transpose();
      out.col(c) = (log_norm_[c] - 0.5 * z.rowwise().squaredNorm().array()).matrix();
    }
    return out;
  }

  /// P(s | o), normalized with log-sum-exp.
  Vec posterior(const Vec& o) const {
    if (o.size() != dim()) throw DataError("gmm posterior: observation has wrong dimension");
    Vec lw = weighted_log_densities(o);
    double lse = log_sum_exp(lw);
    Vec p = (lw.array() - lse).exp();
    return p / p.sum();
  }

  /// Most probable component; ties resolved toward the lowest index.
  int map_component(const Vec& o) const { return static_cast<int>(argmax_lowest(weighted_log_densities(o))); }

  double log_density(const Vec& o) const { return log_sum_exp(weighted_log_densities(o)); }

  double loglik(const std::vector<Vec>& obs) const {
    Mat X(static_cast<Eigen::Index>(obs.size()), dim());
    for (std::size_t i = 0; i < obs.size(); ++i) {
      if (obs[i].size() != dim()) throw DataError("gmm loglik: observation has wrong dimension");
      X.row(static_cast<Eigen::Index>(i)) = obs[i].transpose();
    }
    return row_log_sum_exp(weighted_log_densities_batch(X));
  }

  /// Total of the per-row log-sum-exp of an n x K table of weighted log
  /// densities; optionally also the row-normalized responsibilities.
  static double row_log_sum_exp(const Mat& lw, Mat* resp = nullptr) {
    Vec mx = lw.rowwise().maxCoeff();
    Mat e = (lw.colwise() - mx).array().exp();
    Vec z = e.rowwise().sum();
    if (resp) *resp = e.array().colwise() / z.array();
    return (mx.array() + z.array().log()).sum();
  }

  Vec sample(int component, Rng& rng) const {
    Vec z(dim());
    for (int i = 0; i < dim(); ++i) z[i] = standard_normal(rng);
    return means_[static_cast<std::size_t>(component)] + chol_[static_cast<std::size_t>(component)] * z;
  }

  TextDoc to_doc() const {
    TextDoc doc("gmm");
    doc.put_int("K", K());
    doc.put_int("d_obs", dim());
    doc.put("covariance", type_ == CovarianceType::full ? "full" : "diagonal");
    doc.put_double("log_likelihood", log_likelihood_);
    doc.put_vec("weights", weights_);
    for (int c = 0; c < K(); ++c) {
      doc.put_vec("mean_" + std::to_string(c), means_[static_cast<std::size_t>(c)]);
      doc.put_mat("cov_" + std::to_string(c), covs_[static_cast<std::size_t>(c)]);
    }
    return doc;
  }

  static GmmModel from_doc(const TextDoc& doc) {
    auto k = doc.get_int("K");
    std::vector<Vec> means;
    std::vector<Mat> covs;
    for (long long c = 0; c < k; ++c) {
      means.push_back(doc.get_vec("mean_" + std::to_string(c)));
      covs.push_back(doc.get_mat("cov_" + std::to_string(c)));
    }
    auto type = doc.raw("covariance") == "diagonal" ? CovarianceType::diagonal : CovarianceType::full;
    return GmmModel(doc.get_vec("weights"), std::move(means), std::move(covs), type, doc.get_double("log_likelihood"));
  }

  void save(const std::string& path) const { to_doc().save(path); }
  static GmmModel load(const std::string& path) { return from_doc(TextDoc::load(path, "gmm")); }

 private:
  Vec weights_;
  std::vector<Vec> means_;
  std::vector<Mat> covs_;
  CovarianceType type_ = CovarianceType::full;
  double log_likelihood_ = 0.0;
  std::vector<Mat> chol_;
  std::vector<Mat> chol_inv_;
  Vec log_norm_;
};

/// Free-parameter count of a K-component mixture in d dimensions.
inline long long gmm_parameter_count(int K, int d, CovarianceType type = CovarianceType::full) {
  long long cov = type == CovarianceType::full ? static_cast<long long>(d) * (d + 1) / 2 : d;
  return (K - 1) + static_cast<long long>(K) * d + static_cast<long long>(K) * cov;
}

/// Log-likelihood after every E-step, one history per restart.
struct EmTrace {
  std::vector<std::vector<double>> histories;
  int best_restart = -1;
  int reinitializations = 0;
};

namespace detail {

inline Mat floor_covariance(const Mat& cov, double floor, CovarianceType type) {
  if (type == CovarianceType::diagonal) {
    Mat out = Mat::Zero(cov.rows(), cov.cols());
    for (Eigen::Index i = 0; i < cov.rows(); ++i) out(i, i) = std::max(cov(i, i), floor);
    return out;
  }
  Mat sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  Vec ev = es.eigenvalues().cwiseMax(floor);
  Mat out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

struct EmState {
  Vec weights;
  Mat means;  // d x K
  std::vector<Mat> covs;
};

inline GmmModel to_model(const EmState& s, CovarianceType type, double ll) {
  std::vector<Vec> means;
  for (Eigen::Index c = 0; c < s.means.cols(); ++c) means.emplace_back(s.means.col(c));
  Vec w = s.weights / s.weights.sum();
  return GmmModel(w, std::move(means), s.covs, type, ll);
}

/// k-means++ seeding over the rows of X; returns centers as columns.
inline Mat kmeanspp(const Mat& X, int K, Rng& rng) {
  const Eigen::Index n = X.rows();
  Mat centers(X.cols(), K);
  centers.col(0) = X.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)))).transpose();
  Vec d2 = (X.rowwise() - centers.col(0).transpose()).rowwise().squaredNorm();
  for (int c = 1; c < K; ++c) {
    Eigen::Index pick;
    if (d2.sum() > 0.0) {
      pick = static_cast<Eigen::Index>(sample_discrete(rng, d2));
    } else {
      pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
    }
    centers.col(c) = X.row(pick).transpose();
    d2 = d2.cwiseMin((X.rowwise() - centers.col(c).transpose()).rowwise().squaredNorm());
  }
  return centers;
}

/// Covariance of the rows of X.
inline Mat sample_covariance(const Mat& X) {
  Vec mu = X.colwise().mean().transpose();
  Mat Xc = X.rowwise() - mu.transpose();
  return (Xc.transpose() * Xc) / static_cast<double>(X.rows());
}

/// Single EM run from one k-means++ seeding; returns (state, final loglik).
inline std::pair<EmState, double> em_run(const Mat& X, int K, Rng& rng, const GmmConfig& cfg,
                                         std::vector<double>* history, int* reinit_count) {
  const Eigen::Index n = X.rows();
  const Mat global_cov = floor_covariance(sample_covariance(X), cfg.cov_floor, cfg.covariance);

  EmState s;
  s.weights = Vec::Constant(K, 1.0 / K);
  s.means = kmeanspp(X, K, rng);
  s.covs.assign(static_cast<std::size_t>(K), global_cov);

  Mat R(n, K);
  double prev = -std::numeric_limits<double>::infinity();
  double ll = prev;
  for (int iter = 0; iter < cfg.max_iter; ++iter) {
    // E-step
    GmmModel model = to_model(s, cfg.covariance, 0.0);
    ll = GmmModel::row_log_sum_exp(model.weighted_log_densities_batch(X), &R);
    if (history) history->push_back(ll);
    if (iter > 0 && (ll - prev) / static_cast<double>(n) < cfg.tol_ll) break;
    prev = ll;

    // M-step
    for (int c = 0; c < K; ++c) {
      double nk = R.col(c).sum();
      if (nk < 1e-8) {
        log::warn("gmm: empty component " + std::to_string(c) + " reinitialized at a random datapoint");
        if (reinit_count) ++*reinit_count;
        s.means.col(c) = X.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)))).transpose();
        s.covs[static_cast<std::size_t>(c)] = global_cov;
        s.weights[c] = 1.0 / static_cast<double>(n);
        continue;
      }
      Vec mu = (X.transpose() * R.col(c)) / nk;
      Mat Xc = X.rowwise() - mu.transpose();
      Mat cov = ((Xc.array().colwise() * R.col(c).array()).matrix().transpose() * Xc) / nk;
      s.means.col(c) = mu;
      s.covs[static_cast<std::size_t>(c)] = floor_covariance(cov, cfg.cov_floor, cfg.covariance);
      s.weights[c] = nk / static_cast<double>(n);
    }
    s.weights /= s.weights.sum();
  }
  return {std::move(s), ll};
}

/// Observations as the rows of an n x d matrix.
inline Mat to_rows(const std::vector<Vec>& obs) {
  if (obs.empty()) throw DataError("gmm: no observations");
  const auto d = obs[0].size();
  if (d < 1) throw DataError("gmm: observations must have dimension >= 1");
  Mat X(static_cast<Eigen::Index>(obs.size()), d);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    if (obs[i].size() != d) throw DataError("gmm: inconsistent observation dimensions");
    X.row(static_cast<Eigen::Index>(i)) = obs[i].transpose();
  }
  return X;
}

}  // namespace detail

/// Expectation-maximization with k-means++ seeding; the best of `n_init`
/// restarts (by final log-likelihood) is returned.
inline GmmModel fit_em(const std::vector<Vec>& obs, int K, std::uint64_t seed, const GmmConfig& cfg = {},
                       EmTrace* trace = nullptr) {
  if (K < 1) throw ConfigError("gmm: K must be >= 1");
  if (obs.size() < static_cast<std::size_t>(K)) throw DataError("gmm: fewer observations than components");
  Mat X = detail::to_rows(obs);
  std::optional<GmmModel> best;
  double best_ll = -std::numeric_limits<double>::infinity();
  int restarts = std::max(1, cfg.n_init);
  for (int r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    std::vector<double> hist;
    int reinit = 0;
    auto [state, ll] = detail::em_run(X, K, rng, cfg, trace ? &hist : nullptr, &reinit);
    if (trace) {
      trace->histories.push_back(std::move(hist));
      trace->reinitializations += reinit;
    }
    if (!best || ll > best_ll) {
      best_ll = ll;
      best = detail::to_model(state, cfg.covariance, 0.0);
      if (trace) trace->best_restart = r;
    }
  }
  // Recompute the likelihood of the returned parameters exactly.
  const GmmModel& m = *best;
  return GmmModel(m.weights(), m.means(), m.covariances(), cfg.covariance, m.loglik(obs));
}

struct BicRow {
  int K = 0;
  double log_likelihood = 0.0;  // held-out, scaled to the training-fold size
  long long parameter_count = 0;
  double bic = 0.0;
};

struct BicReport {
  std::vector<BicRow> rows;
  int selected_K = 0;

  bool operator==(const BicReport& o) const {
    if (selected_K != o.selected_K || rows.size() != o.rows.size()) return false;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].K != o.rows[i].K || rows[i].log_likelihood != o.rows[i].log_likelihood ||
          rows[i].bic != o.rows[i].bic || rows[i].parameter_count != o.rows[i].parameter_count)
        return false;
    return true;
  }

  std::string csv() const {
    std::string s = "K,log_likelihood,parameter_count,bic\n";
    for (const auto& r : rows)
      s += std::to_string(r.K) + ',' + fmt_double(r.log_likelihood) + ',' + std::to_string(r.parameter_count) + ',' +
           fmt_double(r.bic) + '\n';
    return s;
  }
};

struct BicConfig {
  int folds = 5;
  std::uint64_t seed = 0;
  GmmConfig gmm;
};

/// Chooses K by BIC = p ln(n_train) - 2 LL, where LL is the mean held-out
/// per-observation log-likelihood across folds scaled to the training size.
/// Ties go to the smaller K.
inline BicReport select_k_bic(const std::vector<Vec>& obs, int k_min, int k_max, const BicConfig& cfg = {}) {
  if (k_min < 1 || k_max < k_min) throw ConfigError("bic: empty K range");
  if (cfg.folds < 2) throw ConfigError("bic: need at least 2 folds");
  const std::size_t n = obs.size();
  if (n < static_cast<std::size_t>(cfg.folds)) throw DataError("bic: fewer observations than folds");
  const int d = static_cast<int>(obs[0].size());

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(cfg.seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  std::vector<int> fold_of(n);
  for (std::size_t i = 0; i < n; ++i) fold_of[perm[i]] = static_cast<int>(i % static_cast<std::size_t>(cfg.folds));

  BicReport report;
  double best_bic = std::numeric_limits<double>::infinity();
  for (int K = k_min; K <= k_max; ++K) {
    double mean_per_point = 0.0;
    double n_train_mean = 0.0;
    bool failed = false;
    for (int f = 0; f < cfg.folds; ++f) {
      std::vector<Vec> train, held;
      for (std::size_t i = 0; i < n; ++i) (fold_of[i] == f ? held : train).push_back(obs[i]);
      try {
        auto m = fit_em(train, K, derive_seed(cfg.seed, static_cast<std::uint64_t>(K * 1000 + f)), cfg.gmm);
        mean_per_point += m.loglik(held) / static_cast<double>(held.size());
        n_train_mean += static_cast<double>(train.size());
      } catch (const Error& e) {
        log::warn("bic: EM failed at K=" + std::to_string(K) + " (" + e.what() + "); K excluded");
        failed = true;
        break;
      }
    }
    if (failed) continue;
    mean_per_point /= cfg.folds;
    n_train_mean /= cfg.folds;
    BicRow row;
    row.K = K;
    row.log_likelihood = mean_per_point * n_train_mean;
    row.parameter_count = gmm_parameter_count(K, d, cfg.gmm.covariance);
    row.bic = static_cast<double>(row.parameter_count) * std::log(n_train_mean) - 2.0 * row.log_likelihood;
    if (row.bic < best_bic) {
      best_bic = row.bic;
      report.selected_K = K;
    }
    report.rows.push_back(row);
  }
  if (report.rows.empty()) throw Error("bic: EM failed for every K");
  return report;
}

}  // namespace astc
