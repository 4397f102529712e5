#pragma once

// Online phase and measurement protocols: the controlled estimator
// (1/M) sum (h(x_j) - g_ens(x_j, y_obs)), variance reduction factors,
// Stein zero-mean checks, sample-size sweeps, ensemble-size ablations and
// amortisation across observations.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cncv/model.hpp"
#include "cncv/problems.hpp"
#include "cncv/rng.hpp"
#include "cncv/training.hpp"

namespace cncv {

// --- statistics ------------------------------------------------------------------

struct ComponentStats {
  double var_h = 0.0;
  double var_hg = 0.0;
  double vrf = 0.0;
  double corr = 0.0;
  double raw_estimate = 0.0;
  double cv_estimate = 0.0;
};

/// Unbiased per-component statistics of h and h - g over the same samples.
/// Columns are samples.
inline std::vector<ComponentStats> component_stats(const Mat& h, const Mat& g) {
  if (h.rows() != g.rows() || h.cols() != g.cols()) throw StructuralError("component_stats: shape mismatch");
  const Eigen::Index n = h.cols();
  if (n < 2) throw StructuralError("controlled estimate needs at least 2 samples");
  std::vector<ComponentStats> out(static_cast<std::size_t>(h.rows()));
  const double denom = static_cast<double>(n - 1);
  for (Eigen::Index j = 0; j < h.rows(); ++j) {
    const double mh = h.row(j).mean();
    const double mg = g.row(j).mean();
    const Eigen::ArrayXd dh = h.row(j).array() - mh;
    const Eigen::ArrayXd dg = g.row(j).array() - mg;
    const double var_h = dh.square().sum() / denom;
    const double var_g = dg.square().sum() / denom;
    const double var_hg = (dh - dg).square().sum() / denom;
    const double cov = (dh * dg).sum() / denom;
    ComponentStats& s = out[static_cast<std::size_t>(j)];
    s.var_h = var_h;
    s.var_hg = var_hg;
    s.vrf = var_h > 0.0 ? var_hg / var_h : (var_hg > 0.0 ? INFINITY : 1.0);
    s.corr = (var_h > 0.0 && var_g > 0.0) ? std::clamp(cov / std::sqrt(var_h * var_g), -1.0, 1.0) : 0.0;
    s.raw_estimate = mh;
    s.cv_estimate = mh - mg;
  }
  return out;
}

struct ControlledEstimate {
  Vec estimate;
  std::vector<ComponentStats> stats;
};

/// h - g averaged over samples; xs and scores are d x M.
inline ControlledEstimate controlled_estimate(const Mat& xs, const Mat& scores, const CvEnsemble& ens,
                                              const Vec& y_obs, const Qoi& qoi) {
  if (xs.cols() < 2) throw StructuralError("controlled estimate needs at least 2 samples");
  const Mat h = qoi.eval_batch(xs);
  const Mat g = ensemble_cv_single_obs(ens, xs, y_obs, scores);
  ControlledEstimate out;
  out.stats = component_stats(h, g);
  out.estimate = (h - g).rowwise().mean();
  return out;
}

// --- observations -------------------------------------------------------------

/// Held-out test observation i, from a stream disjoint from training data.
inline Vec test_observation(const InverseProblem& problem, std::uint64_t seed, std::size_t i) {
  RngStream rng = RngStream(seed).split(0x74657374ULL).split(i);
  return problem.simulate_pair(rng).second;
}

inline RngStream observation_stream(std::uint64_t seed, std::size_t obs_id, std::uint64_t purpose) {
  return RngStream(seed).split(purpose).split(obs_id);
}

/// Posterior mean used to centre the variance quantity of interest: exact for
/// Gaussian problems, otherwise a plug-in mean from a separate sampler run.
inline Vec variance_center(const InverseProblem& problem, const Vec& y, std::uint64_t seed, std::size_t obs_id,
                           Eigen::Index center_samples) {
  if (problem.kind() == ProblemKind::Gaussian) return problem.gaussian_posterior_moments(y).mean;
  RngStream rng = observation_stream(seed, obs_id, 0x63656E74ULL);
  return problem.sample_posterior(y, center_samples, rng).rowwise().mean();
}

inline Qoi make_qoi(QoiKind kind, const InverseProblem& problem, const Vec& y, std::uint64_t seed,
                    std::size_t obs_id, Eigen::Index center_samples) {
  if (kind == QoiKind::Mean) return Qoi::mean();
  return Qoi::variance(variance_center(problem, y, seed, obs_id, center_samples));
}

// --- VRF study -------------------------------------------------------------------

struct EvalRow {
  std::size_t obs_id = 0;
  int component = 0;
  ComponentStats stats;
  long n_samples = 0;
  std::uint64_t seed = 0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<std::size_t> skipped;  // observations whose sampler failed
  std::vector<Vec> observations;
  std::vector<double> acceptance;  // sampler acceptance rate per evaluated observation
  int dim = 0;
  bool correlated_samples = false;

  /// Per-component VRF averaged over observations, then mean/std across components.
  MeanStd vrf_by_component() const {
    std::vector<double> sum(static_cast<std::size_t>(dim), 0.0);
    std::vector<int> count(static_cast<std::size_t>(dim), 0);
    for (const auto& r : rows) {
      sum[static_cast<std::size_t>(r.component)] += r.stats.vrf;
      ++count[static_cast<std::size_t>(r.component)];
    }
    std::vector<double> per;
    for (std::size_t j = 0; j < sum.size(); ++j)
      if (count[j]) per.push_back(sum[j] / count[j]);
    return mean_std(per);
  }

  /// Per-observation VRF averaged over components, then mean/std across observations.
  MeanStd vrf_by_observation() const { return mean_std(per_observation(&ComponentStats::vrf)); }

  MeanStd corr_by_component() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.stats.corr);
    return mean_std(v);
  }

  std::vector<double> per_observation(double ComponentStats::*field) const {
    std::vector<double> out;
    std::vector<std::size_t> ids;
    for (const auto& r : rows) {
      if (ids.empty() || ids.back() != r.obs_id) {
        ids.push_back(r.obs_id);
        out.push_back(0.0);
      }
      out.back() += r.stats.*field / dim;
    }
    return out;
  }

  /// Per-observation mean VRF, in observation order.
  std::vector<double> per_observation_vrf() const { return per_observation(&ComponentStats::vrf); }
};

struct VrfStudyConfig {
  int n_obs = 100;
  Eigen::Index n_samples = 5000;
  std::uint64_t seed = 2024;
  Eigen::Index center_samples = 100000;
  QoiKind qoi = QoiKind::Mean;
};

/// Evaluates one observation and appends its rows.
inline void evaluate_observation(const InverseProblem& problem, const CvEnsemble& ens, const Vec& y,
                                 std::size_t obs_id, const VrfStudyConfig& cfg, EvalReport& report) {
  RngStream rng = observation_stream(cfg.seed, obs_id, 0x73616D70ULL);
  double acc = 1.0;
  const Mat xs = problem.sample_posterior(y, cfg.n_samples, rng, &acc);
  const Mat scores = problem.posterior_scores(xs, y);
  const Qoi qoi = make_qoi(cfg.qoi, problem, y, cfg.seed, obs_id, cfg.center_samples);
  const auto est = controlled_estimate(xs, scores, ens, y, qoi);
  for (std::size_t j = 0; j < est.stats.size(); ++j) {
    report.rows.push_back({obs_id, static_cast<int>(j), est.stats[j], static_cast<long>(cfg.n_samples), cfg.seed});
  }
  report.observations.push_back(y);
  report.acceptance.push_back(acc);
}

inline EvalReport vrf_study_on(const InverseProblem& problem, const CvEnsemble& ens, const std::vector<Vec>& obs,
                               const VrfStudyConfig& cfg) {
  EvalReport report;
  report.dim = problem.dim();
  report.correlated_samples = problem.kind() != ProblemKind::Gaussian;
  for (std::size_t i = 0; i < obs.size(); ++i) {
    try {
      evaluate_observation(problem, ens, obs[i], i, cfg, report);
    } catch (const NumericError&) {
      report.skipped.push_back(i);
    }
  }
  if (report.skipped.size() * 10 > obs.size()) {
    throw NumericError("vrf study: sampler failed on " + std::to_string(report.skipped.size()) + " of " +
                       std::to_string(obs.size()) + " observations");
  }
  return report;
}

inline EvalReport vrf_study(const InverseProblem& problem, const CvEnsemble& ens, const VrfStudyConfig& cfg) {
  std::vector<Vec> obs;
  for (int i = 0; i < cfg.n_obs; ++i) obs.push_back(test_observation(problem, cfg.seed, static_cast<std::size_t>(i)));
  return vrf_study_on(problem, ens, obs, cfg);
}

// --- Stein verification ----------------------------------------------------------

struct SteinRow {
  std::size_t obs_id = 0;
  double statistic = 0.0;  // (1 / (M d)) sum_{i,j} g_j(x_i, y)
  double std_error = 0.0;
  double z = 0.0;
  std::vector<double> component_z;  // per-component z scores
};

struct SteinReport {
  std::vector<SteinRow> rows;
  MeanStd statistic;
  double pass_fraction = 0.0;            // |z| < 4 on the dimension-averaged statistic
  double component_pass_fraction = 0.0;  // |z| < 4 per component
};

/// The score used to build g may be overridden (negative controls); by
/// default it is the problem's own posterior score.
inline SteinReport stein_verify(const InverseProblem& problem, const CvEnsemble& ens, int n_obs, Eigen::Index m,
                                std::uint64_t seed, const InverseProblem* score_source = nullptr) {
  const InverseProblem& scorer = score_source ? *score_source : problem;
  SteinReport rep;
  std::vector<double> stats;
  long comp_pass = 0, comp_total = 0, pass = 0;
  for (int i = 0; i < n_obs; ++i) {
    const auto id = static_cast<std::size_t>(i);
    const Vec y = test_observation(problem, seed, id);
    RngStream rng = observation_stream(seed, id, 0x7374656EULL);
    const Mat xs = problem.sample_posterior(y, m, rng);
    const Mat g = ensemble_cv_single_obs(ens, xs, y, scorer.posterior_scores(xs, y));
    const Eigen::RowVectorXd avg = g.colwise().mean();
    SteinRow row;
    row.obs_id = id;
    row.statistic = avg.mean();
    const double var = (avg.array() - row.statistic).square().sum() / static_cast<double>(m - 1);
    row.std_error = std::sqrt(var / static_cast<double>(m));
    row.z = row.std_error > 0.0 ? row.statistic / row.std_error : 0.0;
    for (Eigen::Index j = 0; j < g.rows(); ++j) {
      const double mu = g.row(j).mean();
      const double v = (g.row(j).array() - mu).square().sum() / static_cast<double>(m - 1);
      const double se = std::sqrt(v / static_cast<double>(m));
      const double z = se > 0.0 ? mu / se : 0.0;
      row.component_z.push_back(z);
      comp_pass += std::abs(z) < 4.0;
      ++comp_total;
    }
    pass += std::abs(row.z) < 4.0;
    stats.push_back(row.statistic);
    rep.rows.push_back(std::move(row));
  }
  rep.statistic = mean_std(stats);
  rep.pass_fraction = n_obs ? static_cast<double>(pass) / n_obs : 0.0;
  rep.component_pass_fraction = comp_total ? static_cast<double>(comp_pass) / static_cast<double>(comp_total) : 0.0;
  return rep;
}

// --- sample-size sweep -------------------------------------------------------------

struct SweepRow {
  Eigen::Index n = 0;
  double vrf = 0.0;       // mean per-sample VRF over observations, repeats, components
  double mse_raw = 0.0;   // mean squared error of the plain MC estimate, averaged over components
  double mse_cv = 0.0;    // same for the controlled estimate
  double mse_ratio = 0.0; // mse_cv / mse_raw
};

struct SweepReport {
  std::vector<SweepRow> rows;
  double raw_slope = 0.0;  // least-squares slope of log mse_raw against log N
  double cv_slope = 0.0;
  bool analytic_reference = true;
};

inline double loglog_slope(const std::vector<double>& n, const std::vector<double>& v) {
  const std::size_t k = n.size();
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double x = std::log(n[i]), y = std::log(v[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double kk = static_cast<double>(k);
  return (kk * sxy - sx * sy) / (kk * sxx - sx * sx);
}

struct SweepConfig {
  std::vector<Eigen::Index> sizes{10, 30, 100, 300, 1000, 5000};
  int n_obs = 20;
  int repeats = 50;
  std::uint64_t seed = 2024;
  Eigen::Index reference_samples = 1000000;  // non-Gaussian reference mean
};

/// Mean estimation at several sample sizes; MSE is measured against the
/// analytic posterior mean (Gaussian) or a large-sample reference mean.
inline SweepReport sample_efficiency_sweep(const InverseProblem& problem, const CvEnsemble& ens,
                                           const SweepConfig& cfg) {
  SweepReport rep;
  rep.analytic_reference = problem.kind() == ProblemKind::Gaussian;
  std::vector<Vec> obs, refs;
  for (int i = 0; i < cfg.n_obs; ++i) {
    const auto id = static_cast<std::size_t>(i);
    obs.push_back(test_observation(problem, cfg.seed, id));
    if (rep.analytic_reference) {
      refs.push_back(problem.gaussian_posterior_moments(obs.back()).mean);
    } else {
      RngStream rng = observation_stream(cfg.seed, id, 0x72656665ULL);
      refs.push_back(problem.sample_posterior(obs.back(), cfg.reference_samples, rng).rowwise().mean());
    }
  }
  const Qoi qoi = Qoi::mean();
  std::vector<double> ns, raw, cv;
  for (std::size_t s = 0; s < cfg.sizes.size(); ++s) {
    const Eigen::Index n = cfg.sizes[s];
    double vrf_sum = 0, raw_sum = 0, cv_sum = 0;
    long count = 0;
    for (std::size_t i = 0; i < obs.size(); ++i) {
      for (int r = 0; r < cfg.repeats; ++r) {
        RngStream rng = RngStream(cfg.seed).split(0x73776565ULL).split(s).split(i).split(static_cast<std::uint64_t>(r));
        const Mat xs = problem.sample_posterior(obs[i], n, rng);
        const auto est = controlled_estimate(xs, problem.posterior_scores(xs, obs[i]), ens, obs[i], qoi);
        for (std::size_t j = 0; j < est.stats.size(); ++j) {
          const double ref = refs[i](static_cast<Eigen::Index>(j));
          vrf_sum += est.stats[j].vrf;
          raw_sum += (est.stats[j].raw_estimate - ref) * (est.stats[j].raw_estimate - ref);
          cv_sum += (est.stats[j].cv_estimate - ref) * (est.stats[j].cv_estimate - ref);
          ++count;
        }
      }
    }
    SweepRow row;
    row.n = n;
    row.vrf = vrf_sum / count;
    row.mse_raw = raw_sum / count;
    row.mse_cv = cv_sum / count;
    row.mse_ratio = row.mse_cv / row.mse_raw;
    rep.rows.push_back(row);
    ns.push_back(static_cast<double>(n));
    raw.push_back(row.mse_raw);
    cv.push_back(row.mse_cv);
  }
  if (ns.size() >= 2) {
    rep.raw_slope = loglog_slope(ns, raw);
    rep.cv_slope = loglog_slope(ns, cv);
  }
  return rep;
}

// --- ensemble-size ablation ------------------------------------------------------

struct AblationRow {
  int ensemble_size = 0;
  std::uint64_t seed = 0;
  double vrf = 0.0;  // mean over observations and components
};

struct AblationConfig {
  std::vector<int> sizes{1, 2, 4, 8, 16};
  std::vector<std::uint64_t> seeds{12, 13, 14};
  VrfStudyConfig eval{20, 2000, 2024, 100000, QoiKind::Mean};
};

/// Trains a fresh ensemble for every (size, seed); the dataset depends only on the seed.
inline std::vector<AblationRow> ensemble_ablation(const InverseProblem& problem, const TrainConfig& base,
                                                  const AblationConfig& cfg) {
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : cfg.seeds) {
    TrainConfig tc = base;
    tc.seed = seed;
    const Dataset ds = generate_dataset(problem, tc.n_train_samples, seed);
    const Mat targets = training_targets(problem, ds, cfg.eval.qoi);
    for (int l : cfg.sizes) {
      tc.ensemble_size = l;
      const TrainResult tr = train_on(ds, targets, tc);
      if (tr.aborted) throw NumericError("ablation: training aborted: " + tr.error);
      const EvalReport rep = vrf_study(problem, tr.ensemble, cfg.eval);
      rows.push_back({l, seed, rep.vrf_by_component().mean});
    }
  }
  return rows;
}

// --- amortisation ----------------------------------------------------------------

struct RegionObservation {
  std::string label;
  Vec y;
};

/// Three observations from distinct regions of the prior predictive:
/// the left tail of y_1, the right tail of y_1 with large y_2, and the
/// centre of the ridge.
inline std::vector<RegionObservation> region_observations(const InverseProblem& problem, std::uint64_t seed,
                                                          Eigen::Index pool = 20000) {
  RngStream rng = RngStream(seed).split(0x72656769ULL);
  Mat x = problem.sample_prior(pool, rng);
  Mat ys(problem.obs_dim(), pool);
  for (Eigen::Index i = 0; i < pool; ++i) ys.col(i) = problem.add_noise(problem.forward(x.col(i)), rng);

  auto quantile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    return v[static_cast<std::size_t>(q * static_cast<double>(v.size() - 1))];
  };
  std::vector<double> y1(static_cast<std::size_t>(pool)), y2(static_cast<std::size_t>(pool));
  for (Eigen::Index i = 0; i < pool; ++i) {
    y1[static_cast<std::size_t>(i)] = ys(0, i);
    y2[static_cast<std::size_t>(i)] = ys(ys.rows() > 1 ? 1 : 0, i);
  }
  const double y1_lo = quantile(y1, 0.05), y1_hi = quantile(y1, 0.95), y1_mid = quantile(y1, 0.5);
  const double y2_hi = quantile(y2, 0.9), y2_mid = quantile(y2, 0.5);
  auto closest = [&](double t1, double t2, double w2) {
    Eigen::Index best = 0;
    double best_d = INFINITY;
    for (Eigen::Index i = 0; i < pool; ++i) {
      const double d = std::pow(ys(0, i) - t1, 2) + w2 * std::pow(y2[static_cast<std::size_t>(i)] - t2, 2);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    return Vec(ys.col(best));
  };
  return {{"left_tail", closest(y1_lo, y2_mid, 0.0)},
          {"right_tail_high_x2", closest(y1_hi, y2_hi, 1.0)},
          {"ridge", closest(y1_mid, y2_mid, 1.0)}};
}

/// FNV-1a over member permutations and parameter bytes.
inline std::uint64_t ensemble_hash(const CvEnsemble& ens) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& m : ens.members) {
    for (std::size_t v : m.perm) {
      const std::uint64_t u = v;
      mix(&u, sizeof u);
    }
    const auto p = m.params.values();
    mix(p.data(), p.size() * sizeof(double));
  }
  return h;
}

struct AmortizationReport {
  std::vector<RegionObservation> observations;
  EvalReport report;
  std::vector<double> per_observation_vrf;
  std::uint64_t hash_before = 0;
  std::uint64_t hash_after = 0;
};

inline AmortizationReport amortization_study(const InverseProblem& problem, const CvEnsemble& ens,
                                             const VrfStudyConfig& cfg) {
  AmortizationReport out;
  out.hash_before = ensemble_hash(ens);
  out.observations = region_observations(problem, cfg.seed);
  std::vector<Vec> ys;
  for (const auto& o : out.observations) ys.push_back(o.y);
  out.report = vrf_study_on(problem, ens, ys, cfg);
  out.per_observation_vrf = out.report.per_observation_vrf();
  out.hash_after = ensemble_hash(ens);
  return out;
}

}  // namespace cncv
