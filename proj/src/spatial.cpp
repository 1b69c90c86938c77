#include "crowdstat/spatial.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "crowdstat/csv.hpp"
#include "crowdstat/errors.hpp"
#include "crowdstat/parallel.hpp"
#include "crowdstat/rng.hpp"

namespace crowdstat {
namespace {

constexpr double kRhoStep = 1e-3;
// chi-square(2) upper 5% point for the joint (rho, tau2) test.
constexpr double kRemlLrCritical = 5.991464547107979;

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::vector<std::complex<double>> eigenvalues(const Eigen::MatrixXd& w) {
  Eigen::EigenSolver<Eigen::MatrixXd> solver(w, /*computeEigenvectors=*/false);
  if (solver.info() != Eigen::Success) throw StatError("eigenvalue decomposition of W failed");
  const auto& ev = solver.eigenvalues();
  return {ev.data(), ev.data() + ev.size()};
}

std::pair<double, double> interval_from_eigenvalues(const std::vector<std::complex<double>>& ev) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& l : ev) {
    if (std::abs(l.imag()) > 1e-9 * std::max(1.0, std::abs(l))) continue;
    lo = std::min(lo, l.real());
    hi = std::max(hi, l.real());
  }
  if (!(lo < 0.0) || !(hi > 0.0)) throw StatError("W has no eigenvalues of both signs; rho interval undefined");
  return {1.0 / lo, 1.0 / hi};
}

// log|det(I - rho W)| from the eigenvalues of W; -inf when singular.
double log_abs_det(const std::vector<std::complex<double>>& ev, double rho) {
  double s = 0.0;
  for (const auto& l : ev) {
    const double m = std::abs(1.0 - rho * l);
    if (m < 1e-12) return -std::numeric_limits<double>::infinity();
    s += std::log(m);
  }
  return s;
}

Eigen::VectorXd centered(std::span<const double> values) {
  Eigen::VectorXd e = Eigen::Map<const Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
  e.array() -= e.mean();
  return e;
}

void check_rows_standardized(const WeightMatrix& w) {
  for (Eigen::Index i = 0; i < w.w.rows(); ++i) {
    const double s = w.w.row(i).sum();
    if (s != 0.0 && std::abs(s - 1.0) > 1e-9) throw StatError("W must be row-standardized");
  }
}

std::vector<std::string> default_ids(std::size_t n) {
  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = std::to_string(i);
  return ids;
}

}  // namespace

WeightScheme parse_scheme(std::string_view text, std::vector<Edge> edges) {
  auto number_after = [&](std::size_t prefix) -> std::optional<double> {
    double v = 0.0;
    const auto rest = text.substr(prefix);
    const auto res = std::from_chars(rest.data(), rest.data() + rest.size(), v);
    if (res.ec != std::errc{} || res.ptr != rest.data() + rest.size()) return std::nullopt;
    return v;
  };
  if (text == "rook") return RookGrid{};
  if (text == "edges") return ExplicitEdges{std::move(edges)};
  if (text.starts_with("knn:")) {
    const auto k = number_after(4);
    if (!k || *k < 1 || std::floor(*k) != *k) throw InputError("scheme knn:<k> needs a positive integer k");
    return Knn{static_cast<int>(*k)};
  }
  if (text.starts_with("idw:")) {
    const auto p = number_after(4);
    if (!p || *p <= 0) throw InputError("scheme idw:<power> needs a positive power");
    return InverseDistance{*p};
  }
  throw InputError("unknown weight scheme '" + std::string(text) + "' (rook, knn:<k>, idw:<power>, edges)");
}

std::string scheme_tag(const WeightScheme& scheme) {
  return std::visit(overloaded{
                        [](const RookGrid&) { return std::string("rook"); },
                        [](const Knn& k) { return "knn:" + std::to_string(k.k); },
                        [](const InverseDistance& d) { return "idw:" + csv::format_double(d.power); },
                        [](const ExplicitEdges&) { return std::string("edges"); },
                    },
                    scheme);
}

WeightMatrix build_weight_matrix(std::span<const double> xs, std::span<const double> ys, const WeightScheme& scheme,
                                 bool standardize, std::vector<std::string> region_ids) {
  const std::size_t n = xs.size();
  if (ys.size() != n) throw InputError("coordinate arrays differ in length");
  if (n < 2) throw InputError("a weight matrix needs at least 2 regions");
  if (region_ids.empty()) region_ids = default_ids(n);
  if (region_ids.size() != n) throw InputError("region id count does not match coordinates");

  WeightMatrix out;
  out.w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  out.scheme = scheme_tag(scheme);
  out.region_ids = std::move(region_ids);
  auto& w = out.w;
  const auto N = static_cast<Eigen::Index>(n);

  std::visit(overloaded{
                 [&](const RookGrid&) {
                   for (std::size_t i = 0; i < n; ++i) {
                     if (std::floor(xs[i]) != xs[i] || std::floor(ys[i]) != ys[i]) {
                       throw InputError("rook scheme needs integer grid coordinates (region '" +
                                        out.region_ids[i] + "')");
                     }
                   }
                   for (Eigen::Index i = 0; i < N; ++i) {
                     for (Eigen::Index j = 0; j < N; ++j) {
                       const double d = std::abs(xs[i] - xs[j]) + std::abs(ys[i] - ys[j]);
                       if (d == 1.0) w(i, j) = 1.0;
                     }
                   }
                 },
                 [&](const Knn& knn) {
                   if (knn.k < 1 || static_cast<std::size_t>(knn.k) >= n) {
                     throw InputError("knn: k must satisfy 1 <= k < n_regions");
                   }
                   std::vector<std::size_t> order(n);
                   for (std::size_t i = 0; i < n; ++i) {
                     std::iota(order.begin(), order.end(), 0);
                     auto dist = [&](std::size_t j) { return std::hypot(xs[i] - xs[j], ys[i] - ys[j]); };
                     order.erase(order.begin() + static_cast<std::ptrdiff_t>(i));
                     std::stable_sort(order.begin(), order.end(),
                                      [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
                     for (int k = 0; k < knn.k; ++k) {
                       const auto j = static_cast<Eigen::Index>(order[static_cast<std::size_t>(k)]);
                       w(static_cast<Eigen::Index>(i), j) = 1.0;
                     }
                     order.resize(n);
                   }
                   w = w.cwiseMax(w.transpose());
                 },
                 [&](const InverseDistance& idw) {
                   for (Eigen::Index i = 0; i < N; ++i) {
                     for (Eigen::Index j = 0; j < N; ++j) {
                       if (i == j) continue;
                       const double d = std::hypot(xs[i] - xs[j], ys[i] - ys[j]);
                       if (d == 0.0) {
                         throw InputError("inverse distance: regions '" + out.region_ids[i] + "' and '" +
                                          out.region_ids[j] + "' have coincident coordinates");
                       }
                       w(i, j) = std::pow(d, -idw.power);
                     }
                   }
                 },
                 [&](const ExplicitEdges& e) {
                   std::map<std::string, Eigen::Index, std::less<>> idx;
                   for (Eigen::Index i = 0; i < N; ++i) idx.emplace(out.region_ids[i], i);
                   for (const auto& edge : e.edges) {
                     const auto s = idx.find(edge.src);
                     const auto d = idx.find(edge.dst);
                     if (s == idx.end() || d == idx.end()) {
                       throw InputError("edge " + edge.src + " -> " + edge.dst + " names an unknown region");
                     }
                     if (s->second == d->second) throw InputError("self-loop on region '" + edge.src + "'");
                     if (!(edge.weight >= 0.0) || !std::isfinite(edge.weight)) {
                       throw InputError("edge " + edge.src + " -> " + edge.dst + " has a negative weight");
                     }
                     w(s->second, d->second) = edge.weight;
                   }
                 },
             },
             scheme);

  if (standardize) out = row_standardize(std::move(out));
  return out;
}

WeightMatrix build_weight_matrix(const RegionTable& regions, const WeightScheme& scheme, bool standardize) {
  std::vector<double> xs, ys;
  std::vector<std::string> ids;
  for (const auto& r : regions.regions()) {
    xs.push_back(r.x);
    ys.push_back(r.y);
    ids.push_back(r.region_id);
  }
  return build_weight_matrix(xs, ys, scheme, standardize, std::move(ids));
}

WeightMatrix rook_grid(int side, bool standardize) {
  if (side < 2) throw InputError("rook grid needs side >= 2");
  std::vector<double> xs, ys;
  for (int k = 0; k < side * side; ++k) {
    xs.push_back(k % side);
    ys.push_back(k / side);
  }
  return build_weight_matrix(xs, ys, RookGrid{}, standardize);
}

WeightMatrix row_standardize(WeightMatrix w) {
  for (Eigen::Index i = 0; i < w.w.rows(); ++i) {
    const double s = w.w.row(i).sum();
    if (s > 0.0) w.w.row(i) /= s;
  }
  w.row_standardized = true;
  return w;
}

WeightMatrix subset(const WeightMatrix& w, std::span<const std::size_t> keep, bool restandardize) {
  WeightMatrix out;
  const auto k = static_cast<Eigen::Index>(keep.size());
  out.w.resize(k, k);
  for (Eigen::Index a = 0; a < k; ++a) {
    for (Eigen::Index b = 0; b < k; ++b) {
      out.w(a, b) = w.w(static_cast<Eigen::Index>(keep[a]), static_cast<Eigen::Index>(keep[b]));
    }
    out.region_ids.push_back(w.region_ids.at(keep[a]));
  }
  out.scheme = w.scheme;
  out.row_standardized = false;
  if (restandardize) out = row_standardize(std::move(out));
  return out;
}

std::string weight_matrix_csv(const WeightMatrix& w) {
  std::ostringstream os;
  os << "src,dst,weight\n";
  for (Eigen::Index i = 0; i < w.w.rows(); ++i) {
    for (Eigen::Index j = 0; j < w.w.cols(); ++j) {
      if (w.w(i, j) != 0.0) {
        os << csv::escape(w.region_ids[i]) << ',' << csv::escape(w.region_ids[j]) << ','
           << csv::format_double(w.w(i, j)) << '\n';
      }
    }
  }
  return os.str();
}

double morans_i_statistic(std::span<const double> values, const WeightMatrix& w) {
  const std::size_t n = values.size();
  if (n != w.size()) throw InputError("Moran's I: value count does not match W");
  if (n < 3) throw StatError("Moran's I needs at least 3 regions");
  const Eigen::VectorXd z = centered(values);
  const double zz = z.squaredNorm();
  const double scale = std::max(1.0, z.cwiseAbs().maxCoeff());
  if (zz <= 1e-24 * scale * scale * static_cast<double>(n)) throw StatError("Moran's I: values are constant");
  const double s0 = w.w.sum();
  if (s0 <= 0.0) throw StatError("Moran's I: W has no positive weights");
  return static_cast<double>(n) / s0 * z.dot(w.w * z) / zz;
}

MoranResult morans_i(std::span<const double> values, const WeightMatrix& w, std::size_t n_perm, std::uint64_t seed,
                     unsigned threads) {
  MoranResult out;
  out.statistic = morans_i_statistic(values, w);
  const std::size_t n = values.size();
  out.expected = -1.0 / static_cast<double>(n - 1);
  out.n_perm = n_perm;
  if (n_perm == 0) return out;

  const Eigen::VectorXd z = centered(values);
  const double factor = static_cast<double>(n) / w.w.sum() / z.squaredNorm();
  std::vector<double> null(n_perm);
  parallel_for(n_perm, threads, [&](std::size_t k) {
    Xoshiro256 rng(mix_seed(seed, k));
    Eigen::VectorXd zp = z;
    std::shuffle(zp.data(), zp.data() + zp.size(), rng);
    null[k] = factor * zp.dot(w.w * zp);
  });

  const double observed = std::abs(out.statistic - out.expected);
  const double tol = 1e-12 * std::max(1.0, observed);
  std::size_t b = 0;
  double sum = 0.0;
  for (double v : null) {
    if (std::abs(v - out.expected) >= observed - tol) ++b;
    sum += v;
  }
  out.p_perm = static_cast<double>(b + 1) / static_cast<double>(n_perm + 1);
  out.null_mean = sum / static_cast<double>(n_perm);
  double ss = 0.0;
  for (double v : null) ss += (v - out.null_mean) * (v - out.null_mean);
  out.null_sd = n_perm > 1 ? std::sqrt(ss / static_cast<double>(n_perm - 1)) : 0.0;
  return out;
}

IntraclassFit fit_intraclass(std::span<const double> values, std::span<const std::size_t> region) {
  if (values.size() != region.size()) throw InputError("fit_intraclass: values and region labels differ in length");
  std::map<std::size_t, std::pair<std::size_t, double>> groups;  // label -> (count, sum)
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& g = groups[region[i]];
    ++g.first;
    g.second += values[i];
  }
  const auto replicated =
      std::count_if(groups.begin(), groups.end(), [](const auto& g) { return g.second.first >= 2; });
  if (replicated < 2) throw StatError("fit_intraclass needs at least 2 regions with 2 or more observations");

  IntraclassFit fit;
  fit.n = values.size();
  fit.groups = groups.size();
  const double N = static_cast<double>(fit.n);
  const double L = static_cast<double>(fit.groups);
  const double grand = std::accumulate(values.begin(), values.end(), 0.0) / N;

  double ssw = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& g = groups[region[i]];
    const double d = values[i] - g.second / static_cast<double>(g.first);
    ssw += d * d;
  }
  double ssb = 0.0, sum_n2 = 0.0;
  for (const auto& [label, g] : groups) {
    const double ng = static_cast<double>(g.first);
    const double d = g.second / ng - grand;
    ssb += ng * d * d;
    sum_n2 += ng * ng;
  }
  fit.ms_within = ssw / (N - L);
  fit.ms_between = ssb / (L - 1.0);
  fit.n_tilde = (N - sum_n2 / N) / (L - 1.0);
  fit.sigma_e2 = fit.ms_within;
  fit.degenerate = fit.sigma_e2 <= 0.0;
  const double tau2 = (fit.ms_between - fit.ms_within) / fit.n_tilde;
  fit.truncated = tau2 < 0.0;
  fit.tau2 = std::max(0.0, tau2);
  return fit;
}

std::pair<double, double> admissible_rho_interval(const WeightMatrix& w) {
  return interval_from_eigenvalues(eigenvalues(w.w));
}

double sar_profile_loglik(std::span<const double> regional_values, const WeightMatrix& w, double rho) {
  if (regional_values.size() != w.size()) throw InputError("SAR: value count does not match W");
  const Eigen::VectorXd e = centered(regional_values);
  const Eigen::VectorXd r = e - rho * (w.w * e);
  const double n = static_cast<double>(e.size());
  return log_abs_det(eigenvalues(w.w), rho) - 0.5 * n * std::log(r.squaredNorm());
}

SarFit fit_sar_rho(std::span<const double> regional_values, const WeightMatrix& w) {
  if (regional_values.size() != w.size()) throw InputError("SAR: value count does not match W");
  if (w.size() < 4) throw StatError("fit_sar_rho needs at least 4 regions");
  check_rows_standardized(w);

  const auto ev = eigenvalues(w.w);
  const auto [lower, upper] = interval_from_eigenvalues(ev);
  const Eigen::VectorXd e = centered(regional_values);
  const Eigen::VectorXd we = w.w * e;
  const double ee = e.squaredNorm();
  const double ewe = e.dot(we);
  const double wewe = we.squaredNorm();
  if (ee <= 0.0) throw StatError("fit_sar_rho: regional values are constant");
  const double n = static_cast<double>(e.size());

  SarFit best;
  best.lower = lower;
  best.upper = upper;
  best.log_likelihood = -std::numeric_limits<double>::infinity();
  const auto k_lo = static_cast<long>(std::floor(lower / kRhoStep));
  const auto k_hi = static_cast<long>(std::ceil(upper / kRhoStep));
  for (long k = k_lo; k <= k_hi; ++k) {
    const double rho = static_cast<double>(k) * kRhoStep;
    if (rho <= lower || rho >= upper) continue;
    const double logdet = log_abs_det(ev, rho);
    const double sse = ee - 2.0 * rho * ewe + rho * rho * wewe;
    if (!std::isfinite(logdet) || !(sse > 0.0)) continue;
    ++best.grid_points;
    const double ll = logdet - 0.5 * n * std::log(sse);
    if (ll > best.log_likelihood) {
      best.log_likelihood = ll;
      best.rho = rho;
    }
  }
  if (best.grid_points == 0) throw StatError("fit_sar_rho: no admissible grid point");
  return best;
}

SpatialModel make_spatial_model(const WeightMatrix& w, double rho, double tau2, double sigma_e2) {
  if (tau2 < 0.0 || sigma_e2 < 0.0) throw StatError("variance components must be nonnegative");
  const auto [lower, upper] = admissible_rho_interval(w);
  if (!(rho > lower && rho < upper)) {
    throw StatError("rho = " + csv::format_double(rho) + " is outside the admissible interval (" +
                    csv::format_double(lower) + ", " + csv::format_double(upper) + ")");
  }
  const auto n = static_cast<Eigen::Index>(w.size());
  const Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - rho * w.w;
  const Eigen::MatrixXd m = a.transpose() * a;
  const Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) throw StatError("(I - rho W)'(I - rho W) is not positive definite");

  SpatialModel model;
  model.rho = rho;
  model.tau2 = tau2;
  model.sigma_e2 = sigma_e2;
  model.region_ids = w.region_ids;
  model.region_sigma = tau2 * llt.solve(Eigen::MatrixXd::Identity(n, n));
  model.region_sigma = 0.5 * (model.region_sigma + model.region_sigma.transpose()).eval();
  return model;
}

EssReport effective_sample_size(std::span<const double> counts, const SpatialModel& model) {
  const auto L = model.region_sigma.rows();
  if (static_cast<Eigen::Index>(counts.size()) != L) throw InputError("ESS: count vector does not match the model");
  const Eigen::Map<const Eigen::VectorXd> c(counts.data(), L);
  if ((c.array() < 0.0).any()) throw InputError("ESS: negative region count");
  const double N = c.sum();
  if (N <= 0.0) throw StatError("ESS: all region counts are zero");

  const double trace = c.dot(model.region_sigma.diagonal()) + N * model.sigma_e2;
  const double total = c.dot(model.region_sigma * c) + N * model.sigma_e2;
  if (!(trace > 0.0) || !(total > 0.0)) throw StatError("ESS: implied covariance vanishes");

  EssReport r;
  r.n = N;
  r.spatial_n_eff = N * trace / total;
  r.kish_n_eff = N;
  r.deff_spatial = N / r.spatial_n_eff;
  r.deff_weighting = 1.0;
  r.n_eff = r.spatial_n_eff;
  r.deff = r.deff_spatial;
  return r;
}

EssReport combine_ess(double n, double kish_n_eff, double spatial_n_eff) {
  if (!(n > 0.0) || !(kish_n_eff > 0.0) || !(spatial_n_eff > 0.0)) throw StatError("ESS components must be positive");
  EssReport r;
  r.n = n;
  r.kish_n_eff = kish_n_eff;
  r.spatial_n_eff = spatial_n_eff;
  r.deff_weighting = n / kish_n_eff;
  r.deff_spatial = n / spatial_n_eff;
  r.n_eff = std::max(1.0, n / (r.deff_weighting * r.deff_spatial));
  r.deff = n / r.n_eff;
  return r;
}

double sample_variance_n_eff(double n, double spatial_n_eff) {
  if (!(n > 0.0) || !(spatial_n_eff > 0.0)) throw StatError("ESS components must be positive");
  if (n <= 1.0) return std::min(n, spatial_n_eff);
  const double deff = n / spatial_n_eff;
  return std::max(1.0, spatial_n_eff * (n - deff) / (n - 1.0));
}

namespace {

// REML profile over tau2 for one rho, in the eigenbasis of the noise-whitened
// regional covariance K = D^{-1/2} Sigma_obs D^{-1/2}, so V = D^{1/2}(tau2 K + I)D^{1/2}
// and each likelihood evaluation is O(m).
struct RemlProfile {
  Eigen::VectorXd lambda, a, b;

  double loglik(double tau2) const {
    double logdet = 0.0, a1 = 0.0, ab = 0.0, bb = 0.0;
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
      const double d = 1.0 + tau2 * std::max(0.0, lambda[i]);
      logdet += std::log(d);
      a1 += a[i] * a[i] / d;
      ab += a[i] * b[i] / d;
      bb += b[i] * b[i] / d;
    }
    return -0.5 * (logdet + std::log(a1) + bb - ab * ab / a1);
  }

  std::pair<double, double> maximize() const {
    // Golden section on log(tau2), then compare with the boundary tau2 = 0.
    constexpr double g = 0.6180339887498949;
    double lo = std::log(1e-8), hi = std::log(1e4);
    double x1 = hi - g * (hi - lo), x2 = lo + g * (hi - lo);
    double f1 = loglik(std::exp(x1)), f2 = loglik(std::exp(x2));
    for (int it = 0; it < 80; ++it) {
      if (f1 < f2) {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + g * (hi - lo);
        f2 = loglik(std::exp(x2));
      } else {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - g * (hi - lo);
        f1 = loglik(std::exp(x1));
      }
    }
    double tau2 = std::exp(0.5 * (lo + hi));
    double best = loglik(tau2);
    const double at_zero = loglik(0.0);
    if (at_zero >= best) {
      tau2 = 0.0;
      best = at_zero;
    }
    return {tau2, best};
  }
};

}  // namespace

RegionRemlFit fit_region_reml(std::span<const double> means, std::span<const double> counts,
                              std::span<const std::size_t> observed, const WeightMatrix& w, double sigma_e2) {
  const std::size_t m = observed.size();
  if (means.size() != m || counts.size() != m) throw InputError("REML: means, counts and regions differ in length");
  if (m < 4) throw StatError("REML fit needs at least 4 observed regions");
  if (!(sigma_e2 > 0.0)) throw StatError("REML fit needs a positive within-region variance");
  for (std::size_t k = 0; k < m; ++k) {
    if (observed[k] >= w.size()) throw InputError("REML: region index out of range");
    if (!(counts[k] > 0.0)) throw InputError("REML: observed regions need positive counts");
  }

  const auto L = static_cast<Eigen::Index>(w.size());
  const auto M = static_cast<Eigen::Index>(m);
  Eigen::VectorXd s(M), sy(M);
  for (Eigen::Index k = 0; k < M; ++k) {
    s[k] = std::sqrt(counts[static_cast<std::size_t>(k)] / sigma_e2);
    sy[k] = s[k] * means[static_cast<std::size_t>(k)];
  }
  const auto [lower, upper] = admissible_rho_interval(w);
  const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(L, L);

  RegionRemlFit best;
  best.log_likelihood = -std::numeric_limits<double>::infinity();
  auto evaluate = [&](double rho) {
    if (rho <= lower || rho >= upper) return;
    const Eigen::MatrixXd a = identity - rho * w.w;
    const Eigen::LLT<Eigen::MatrixXd> llt(a.transpose() * a);
    if (llt.info() != Eigen::Success) return;
    const Eigen::MatrixXd sigma = llt.solve(identity);
    Eigen::MatrixXd k(M, M);
    for (Eigen::Index i = 0; i < M; ++i) {
      for (Eigen::Index j = 0; j < M; ++j) {
        k(i, j) = s[i] * s[j] *
                  0.5 * (sigma(static_cast<Eigen::Index>(observed[static_cast<std::size_t>(i)]),
                               static_cast<Eigen::Index>(observed[static_cast<std::size_t>(j)])) +
                         sigma(static_cast<Eigen::Index>(observed[static_cast<std::size_t>(j)]),
                               static_cast<Eigen::Index>(observed[static_cast<std::size_t>(i)])));
      }
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(k);
    if (eig.info() != Eigen::Success) return;
    RemlProfile profile{eig.eigenvalues(), eig.eigenvectors().transpose() * s, eig.eigenvectors().transpose() * sy};
    const auto [tau2, ll] = profile.maximize();
    if (!std::isfinite(ll)) return;
    ++best.grid_points;
    if (ll > best.log_likelihood) {
      best.log_likelihood = ll;
      best.rho = rho;
      best.tau2 = tau2;
    }
  };

  constexpr double coarse = 1e-2;
  for (long i = static_cast<long>(std::floor(lower / coarse)); i <= static_cast<long>(std::ceil(upper / coarse)); ++i) {
    evaluate(static_cast<double>(i) * coarse);
  }
  if (best.grid_points == 0) throw StatError("REML fit: no admissible grid point");
  const long centre = std::lround(best.rho / kRhoStep);
  for (long i = centre - 9; i <= centre + 9; ++i) {
    if (i % 10 != 0) evaluate(static_cast<double>(i) * kRhoStep);
  }

  // At tau2 = 0 rho drops out; REML leaves the mean direction unpenalized, so a
  // weak field otherwise drifts to the unit-root edge.
  RemlProfile null{Eigen::VectorXd::Zero(M), s, sy};
  best.null_log_likelihood = null.loglik(0.0);
  best.lr_statistic = std::max(0.0, 2.0 * (best.log_likelihood - best.null_log_likelihood));
  if (best.lr_statistic < kRemlLrCritical) {
    best.rho = 0.0;
    best.tau2 = 0.0;
    best.log_likelihood = best.null_log_likelihood;
    best.significant = false;
  }
  return best;
}

std::vector<double> region_counts(std::span<const std::size_t> region, std::size_t w_size) {
  std::vector<double> counts(w_size, 0.0);
  for (auto r : region) {
    if (r >= w_size) throw InputError("region index out of range");
    counts[r] += 1.0;
  }
  return counts;
}

SpatialFit fit_spatial_model(std::span<const double> values, std::span<const std::size_t> region,
                             const WeightMatrix& w, std::span<const int> groups) {
  if (values.size() != region.size()) throw InputError("fit_spatial_model: values and regions differ in length");
  if (!groups.empty() && groups.size() != values.size()) {
    throw InputError("fit_spatial_model: group labels differ in length");
  }
  SpatialFit out;
  std::vector<double> y(values.begin(), values.end());
  if (!groups.empty()) {
    std::map<int, std::pair<double, std::size_t>> means;
    for (std::size_t i = 0; i < y.size(); ++i) {
      auto& m = means[groups[i]];
      m.first += y[i];
      ++m.second;
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
      const auto& m = means[groups[i]];
      y[i] -= m.first / static_cast<double>(m.second);
    }
    out.residualized = true;
    out.notes = "residuals after group means";
  } else {
    out.notes = "raw values";
  }

  out.intraclass = fit_intraclass(y, region);
  out.tau2_marginal = out.intraclass.tau2;

  const auto counts = region_counts(region, w.size());
  std::vector<double> sums(w.size(), 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) sums[region[i]] += y[i];
  std::vector<std::size_t> observed;
  std::vector<double> means;
  for (std::size_t l = 0; l < w.size(); ++l) {
    if (counts[l] > 0) {
      observed.push_back(l);
      means.push_back(sums[l] / counts[l]);
    }
  }

  if (observed.size() >= 4 && w.row_standardized) {
    const auto sub = subset(w, observed, /*restandardize=*/true);
    if (sub.w.sum() > 0.0) {
      try {
        out.sar = fit_sar_rho(means, sub);
      } catch (const StatError&) {
      }
    }
  }

  double rho = 0.0;
  double tau2 = out.tau2_marginal;
  try {
    std::vector<double> observed_counts;
    for (auto l : observed) observed_counts.push_back(counts[l]);
    out.reml = fit_region_reml(means, observed_counts, observed, w, out.intraclass.sigma_e2);
    rho = out.reml->rho;
    tau2 = out.reml->tau2;
    if (!out.reml->significant) out.notes += "; spatial field not significant at 5% (LR test), rho = tau2 = 0";
  } catch (const StatError& e) {
    out.notes += std::string("; rho fixed at 0 (") + e.what() + ")";
  }
  out.model = make_spatial_model(w, rho, tau2, out.intraclass.sigma_e2);
  return out;
}

}  // namespace crowdstat
