#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "crowdstat/line_list.hpp"

namespace crowdstat {

// ---------------------------------------------------------------------------
// Spatial weight matrices
// ---------------------------------------------------------------------------

/// Rook contiguity on integer grid coordinates (|dx| + |dy| == 1).
struct RookGrid {};
/// k nearest neighbours by Euclidean distance, symmetrized by max.
struct Knn {
  int k = 4;
};
/// w_ij = d_ij^(-power) for every pair.
struct InverseDistance {
  double power = 1.0;
};
/// Edges as given (src row, dst column); not symmetrized.
struct ExplicitEdges {
  std::vector<Edge> edges;
};

using WeightScheme = std::variant<RookGrid, Knn, InverseDistance, ExplicitEdges>;

/// "rook", "knn:<k>", "idw:<power>" or "edges" (edges supplied separately).
WeightScheme parse_scheme(std::string_view text, std::vector<Edge> edges = {});
std::string scheme_tag(const WeightScheme& scheme);

struct WeightMatrix {
  Eigen::MatrixXd w;
  std::string scheme;
  bool row_standardized = false;
  /// Row/column order, matching the RegionTable the matrix was built from.
  std::vector<std::string> region_ids;

  std::size_t size() const noexcept { return static_cast<std::size_t>(w.rows()); }
};

/// Throws InputError for fewer than 2 regions, k >= n_regions, coincident
/// points under inverse distance, non-integer coordinates under rook, or
/// edges naming unknown regions.
WeightMatrix build_weight_matrix(const RegionTable& regions, const WeightScheme& scheme, bool row_standardize);

/// Same, from bare coordinates. Region ids default to "0", "1", ...
WeightMatrix build_weight_matrix(std::span<const double> xs, std::span<const double> ys,
                                 const WeightScheme& scheme, bool row_standardize,
                                 std::vector<std::string> region_ids = {});

/// side x side rook lattice; region k sits at (k % side, k / side).
WeightMatrix rook_grid(int side, bool row_standardize);

/// Divides every nonzero row by its sum. Idempotent.
WeightMatrix row_standardize(WeightMatrix w);

/// Restriction to `keep` (in the given order), optionally re-standardized.
WeightMatrix subset(const WeightMatrix& w, std::span<const std::size_t> keep, bool restandardize);

/// Edge list `src,dst,weight` with region ids, nonzero entries only.
std::string weight_matrix_csv(const WeightMatrix& w);

// ---------------------------------------------------------------------------
// Moran's I
// ---------------------------------------------------------------------------

struct MoranResult {
  double statistic = 0.0;
  /// -1/(n-1), the permutation-null expectation.
  double expected = 0.0;
  /// (b+1)/(m+1), b = permutations at least as far from `expected` as the observed value.
  double p_perm = 1.0;
  std::size_t n_perm = 0;
  double null_mean = 0.0;
  double null_sd = 0.0;
};

/// I = (n/S0) * sum_ij w_ij z_i z_j / sum_i z_i^2 on centered values.
/// Throws StatError for fewer than 3 regions or constant values.
double morans_i_statistic(std::span<const double> values, const WeightMatrix& w);

/// Statistic plus permutation p-value. Permutation k shuffles with its own
/// stream mix_seed(seed, k), so results do not depend on `threads`.
MoranResult morans_i(std::span<const double> values, const WeightMatrix& w, std::size_t n_perm,
                     std::uint64_t seed, unsigned threads = 1);

// ---------------------------------------------------------------------------
// Two-level variance model
// ---------------------------------------------------------------------------

/// One-way ANOVA method-of-moments split of variance into a between-region
/// part (tau2) and a within-region part (sigma_e2).
struct IntraclassFit {
  double tau2 = 0.0;
  double sigma_e2 = 0.0;
  double ms_between = 0.0;
  double ms_within = 0.0;
  /// (N - sum n_l^2 / N) / (L - 1)
  double n_tilde = 0.0;
  std::size_t n = 0;
  std::size_t groups = 0;
  /// Moment estimate of tau2 was negative and has been set to 0.
  bool truncated = false;
  /// Zero within-region variance.
  bool degenerate = false;
};

/// `region[i]` is any integer label for observation i. Throws StatError when
/// fewer than 2 regions have at least 2 observations.
IntraclassFit fit_intraclass(std::span<const double> values, std::span<const std::size_t> region);

struct SarFit {
  double rho = 0.0;
  double log_likelihood = 0.0;
  /// Open admissible interval (1/lambda_min, 1/lambda_max).
  double lower = -1.0;
  double upper = 1.0;
  std::size_t grid_points = 0;
};

/// (1/lambda_min, 1/lambda_max) over the real eigenvalues of W.
std::pair<double, double> admissible_rho_interval(const WeightMatrix& w);

/// Concentrated log-likelihood of the pure SAR-error model on centered
/// regional values, up to a constant:
///   log|I - rho W| - (n/2) log(e'(I - rho W)'(I - rho W)e)
double sar_profile_loglik(std::span<const double> regional_values, const WeightMatrix& w, double rho);

/// Grid search over multiples of 1e-3 strictly inside the admissible
/// interval; log-determinants from the eigenvalues of W. Requires a
/// row-standardized W and at least 4 regions (StatError otherwise).
SarFit fit_sar_rho(std::span<const double> regional_values, const WeightMatrix& w);

/// SAR regional effects plus exchangeable individual noise:
///   region_sigma = tau2 * [(I - rho W)'(I - rho W)]^{-1}
///   Omega        = Z region_sigma Z' + sigma_e2 I
struct SpatialModel {
  double rho = 0.0;
  double tau2 = 0.0;
  double sigma_e2 = 1.0;
  Eigen::MatrixXd region_sigma;
  std::vector<std::string> region_ids;
};

/// Throws StatError if rho is outside the admissible interval or the implied
/// covariance is not positive definite.
SpatialModel make_spatial_model(const WeightMatrix& w, double rho, double tau2, double sigma_e2);

/// n_eff = n / (deff_weighting * deff_spatial), floored at 1.
struct EssReport {
  double n = 0.0;
  double n_eff = 0.0;
  double deff = 1.0;
  double kish_n_eff = 0.0;
  double spatial_n_eff = 0.0;
  double deff_weighting = 1.0;
  double deff_spatial = 1.0;
};

/// Spatial effective size for per-region counts c (aligned with
/// model.region_ids), via the closed forms
///   tr(Omega)  = sum_l c_l Sigma_ll + N sigma_e2
///   1'Omega 1  = c' Sigma c + N sigma_e2
///   n_eff      = N tr(Omega) / 1'Omega 1
/// Throws StatError when all counts are zero or Omega vanishes.
EssReport effective_sample_size(std::span<const double> counts, const SpatialModel& model);

/// Multiplicative composition of the weighting and spatial design effects.
EssReport combine_ess(double n, double kish_n_eff, double spatial_n_eff);

/// Effective size to pair with the *sample* variance. Under Omega the sample
/// variance is biased low, E[s^2] = sigma_bar^2 (N - deff) / (N - 1) with
/// sigma_bar^2 = tr(Omega)/N, so s^2 / n_eff understates Var(mean). Returns
/// n_eff (N - deff) / (N - 1), floored at 1; equals n_eff when deff = 1.
double sample_variance_n_eff(double n, double spatial_n_eff);

/// Two-level fit from regional means observed with sampling noise:
///   ybar_l = mu + u_l + noise,  Cov = tau2 Sigma_rho[obs, obs] + diag(sigma_e2 / c_l)
/// where Sigma_rho = [(I - rho W)'(I - rho W)]^{-1} over all regions of W, so
/// regions without data still shape the marginal covariance. rho maximizes the
/// REML likelihood on a 1e-2 grid refined to 1e-3; tau2 is profiled per rho.
struct RegionRemlFit {
  double rho = 0.0;
  double tau2 = 0.0;
  double log_likelihood = 0.0;
  /// Likelihood with tau2 = 0 and 2 * (log_likelihood - null) before the test.
  double null_log_likelihood = 0.0;
  double lr_statistic = 0.0;
  /// False when the field was not significant at 5% and (rho, tau2) were reset to 0.
  bool significant = true;
  std::size_t grid_points = 0;
};

/// `observed[k]` indexes W for means[k] and counts[k]. Needs at least 4
/// observed regions and sigma_e2 > 0 (StatError otherwise).
RegionRemlFit fit_region_reml(std::span<const double> means, std::span<const double> counts,
                              std::span<const std::size_t> observed, const WeightMatrix& w, double sigma_e2);

struct SpatialFit {
  SpatialModel model;
  IntraclassFit intraclass;
  std::optional<RegionRemlFit> reml;
  /// Pure SAR fit on the regional means of observed regions (diagnostic).
  std::optional<SarFit> sar;
  /// Between-region variance from the ANOVA fit.
  double tau2_marginal = 0.0;
  bool residualized = false;
  std::string notes;
};

/// Full pipeline for individual-level data: optional residualization against
/// group means, ANOVA split (sigma_e2 = within mean square), then rho and tau2
/// from fit_region_reml. With fewer than 4 observed regions (or no within
/// variance) rho = 0 and tau2 is the ANOVA estimate. The pure SAR fit on
/// regional means is kept as a diagnostic: with few cases per region the
/// means are noisy and it is biased toward 0. `region[i]` indexes W.
SpatialFit fit_spatial_model(std::span<const double> values, std::span<const std::size_t> region,
                             const WeightMatrix& w, std::span<const int> groups = {});

/// Per-region counts of `region` indices, length w_size.
std::vector<double> region_counts(std::span<const std::size_t> region, std::size_t w_size);

}  // namespace crowdstat
