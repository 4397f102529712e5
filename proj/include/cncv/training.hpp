#pragma once

// Offline phase: joint-sample datasets, the mean-squared objective
// E ||h(x) - g_ens(x, y)||^2, Adam with a cosine learning-rate schedule.
//
// Because E[g_ens] = 0 for every parameter value, the objective equals
// sum_j Var(h_j - g_j) + ||E h||^2 and minimising it minimises the variance of
// the controlled estimator.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "cncv/ad/tape.hpp"
#include "cncv/ad/tensor_tape.hpp"
#include "cncv/backends.hpp"
#include "cncv/model.hpp"
#include "cncv/parallel.hpp"
#include "cncv/problems.hpp"
#include "cncv/rng.hpp"

namespace cncv {

// --- datasets ----------------------------------------------------------------

/// Joint samples (x_i, y_i) with precomputed posterior scores, stored as columns.
struct Dataset {
  Mat x;       // d x n
  Mat y;       // m x n
  Mat scores;  // d x n

  Eigen::Index size() const noexcept { return x.cols(); }
};

inline Dataset generate_dataset(const InverseProblem& problem, Eigen::Index n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("dataset size must be >= 1");
  RngStream prior_rng = RngStream(seed).split(0x7072696FULL);
  RngStream noise_rng = RngStream(seed).split(0x6E6F6973ULL);
  Dataset ds;
  ds.x = problem.sample_prior(n, prior_rng);
  ds.y.resize(problem.obs_dim(), n);
  ds.scores.resize(problem.dim(), n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec xi = ds.x.col(i);
    ds.y.col(i) = problem.add_noise(problem.forward(xi), noise_rng);
    ds.scores.col(i) = problem.posterior_score(xi, ds.y.col(i));
  }
  return ds;
}

/// Closed-form posterior mean (Gaussian) or a linear-Gaussian approximation of
/// it (other kinds). Used as the centre of the variance quantity of interest
/// during training, where per-pair sampling would be prohibitive.
inline Vec approximate_posterior_mean(const InverseProblem& problem, const Vec& y) {
  const int d = problem.dim();
  const double s2 = problem.sigma() * problem.sigma();
  switch (problem.kind()) {
    case ProblemKind::Gaussian: return problem.gaussian_posterior_moments(y).mean;
    case ProblemKind::Rosenbrock: {
      const auto& r = problem.rosenbrock_params();
      const double v = 1.0 / (2.0 * r.a);
      Vec m0(2);
      m0 << r.mu, r.mu * r.mu + v;
      Mat c0(2, 2);
      c0 << v, 2.0 * r.mu * v, 2.0 * r.mu * v, 2.0 * v * v + 4.0 * r.mu * r.mu * v + 1.0 / (2.0 * r.b);
      Mat k = c0 + s2 * Mat::Identity(2, 2);
      return m0 + c0 * k.llt().solve(y - m0);
    }
    case ProblemKind::Nonlinear: {
      Mat j = problem.forward_matrix() + Mat::Identity(d, d);
      Mat k = j * j.transpose() + s2 * Mat::Identity(d, d);
      return j.transpose() * k.llt().solve(y);
    }
  }
  return Vec::Zero(d);
}

/// Training targets h(x_i) for every dataset column.
inline Mat training_targets(const InverseProblem& problem, const Dataset& ds, QoiKind kind) {
  if (kind == QoiKind::Mean) return ds.x;
  Mat h(ds.x.rows(), ds.x.cols());
  for (Eigen::Index i = 0; i < ds.size(); ++i) {
    const Vec c = approximate_posterior_mean(problem, ds.y.col(i));
    h.col(i) = (ds.x.col(i) - c).array().square().matrix();
  }
  return h;
}

// --- objective -----------------------------------------------------------------

/// Mean over the batch of ||h - g_ens||^2 on any differentiable backend.
template <class Backend>
typename Backend::Scalar ensemble_loss(const CvEnsemble& ens, std::vector<Backend>& backends,
                                       const Mat& x, const Mat& y, const Mat& scores, const Mat& h,
                                       double normaliser) {
  Backend& b0 = backends.front();
  const auto xv = b0.constant(x);
  const auto yv = b0.constant(y);
  const auto sv = b0.constant(scores);
  const auto hv = b0.constant(h);
  auto g_sum = member_cv(*ens.tree, ens.members[0], backends[0], xv, yv, sv);
  for (std::size_t l = 1; l < ens.members.size(); ++l) {
    g_sum = b0.add(g_sum, member_cv(*ens.tree, ens.members[l], backends[l], xv, yv, sv));
  }
  const auto g_ens = b0.scale(g_sum, 1.0 / static_cast<double>(ens.members.size()));
  return b0.sum_squares(b0.sub(hv, g_ens), 1.0 / normaliser);
}

/// Objective value without a tape.
inline double loss_value(const CvEnsemble& ens, const Mat& x, const Mat& y, const Mat& scores, const Mat& h) {
  if (x.cols() < 1) throw StructuralError("loss on an empty batch");
  const Mat g = ensemble_cv_batch(ens, x, y, scores);
  return (h - g).squaredNorm() / static_cast<double>(x.cols());
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;  // one vector per ensemble member
};

/// Objective and parameter gradient via the scalar tape (reference path).
inline LossAndGrad loss_and_grad_scalar(const CvEnsemble& ens, const Mat& x, const Mat& y, const Mat& scores,
                                        const Mat& h) {
  if (x.cols() < 1) throw StructuralError("loss on an empty batch");
  ad::Tape tape;
  std::vector<ScalarTapeBackend> backends;
  backends.reserve(ens.size());
  for (const auto& m : ens.members) backends.emplace_back(tape, *ens.tree, m.params);
  const ad::Var loss = ensemble_loss(ens, backends, x, y, scores, h, static_cast<double>(x.cols()));
  LossAndGrad out;
  out.loss = loss.value;
  tape.backward(loss);
  for (const auto& b : backends) out.grads.push_back(b.gradient(loss));
  return out;
}

/// Objective and gradient via the batched tape, in column chunks of `chunk`.
/// Chunks are independent tapes reduced in chunk order.
inline LossAndGrad loss_and_grad(const CvEnsemble& ens, const Mat& x, const Mat& y, const Mat& scores,
                                 const Mat& h, Eigen::Index chunk = 256, int threads = 1) {
  const Eigen::Index n = x.cols();
  if (n < 1) throw StructuralError("loss on an empty batch");
  chunk = std::max<Eigen::Index>(chunk, 1);
  const auto n_chunks = static_cast<std::size_t>((n + chunk - 1) / chunk);
  std::vector<LossAndGrad> parts(n_chunks);
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const Eigen::Index begin = static_cast<Eigen::Index>(c) * chunk;
    const Eigen::Index len = std::min(chunk, n - begin);
    ad::TensorTape tape;
    std::vector<TensorTapeBackend> backends;
    backends.reserve(ens.size());
    for (const auto& m : ens.members) backends.emplace_back(tape, *ens.tree, m.params);
    const ad::TVar loss = ensemble_loss(ens, backends, x.middleCols(begin, len), y.middleCols(begin, len),
                                        scores.middleCols(begin, len), h.middleCols(begin, len),
                                        static_cast<double>(n));
    tape.backward(loss);
    parts[c].loss = loss.value()(0, 0);
    for (const auto& b : backends) parts[c].grads.push_back(b.gradient());
  });
  LossAndGrad out = std::move(parts[0]);
  for (std::size_t c = 1; c < n_chunks; ++c) {
    out.loss += parts[c].loss;
    for (std::size_t l = 0; l < out.grads.size(); ++l)
      for (std::size_t k = 0; k < out.grads[l].size(); ++k) out.grads[l][k] += parts[c].grads[l][k];
  }
  return out;
}

// --- optimiser -------------------------------------------------------------------

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// Bias-corrected Adam update, in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st, double lr) {
  require_dims(grads.size(), params.size(), "adam_step");
  require_dims(st.m.size(), params.size(), "adam_step state");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
    const double m_hat = st.m[i] / c1;
    const double v_hat = st.v[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + st.eps);
  }
}

inline double cosine_lr(double epoch, double total_epochs, double lr_init, double lr_final) {
  if (total_epochs <= 0.0) return lr_init;
  return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

// --- training loop ---------------------------------------------------------------

struct TrainConfig {
  int batch_size = 2048;
  int epochs = 50;
  double lr_init = 1e-3;
  double lr_final = 1e-4;
  int n_train_samples = 65536;
  std::uint64_t seed = 12;
  int ensemble_size = 16;
  int depth = 2;
  int hidden_units = 64;
  int mlp_layers = 3;
  double validation_fraction = 0.1;
  double grad_clip = 10.0;
  int chunk_size = 256;
  int threads = 1;

  void validate() const {
    if (batch_size < 1 || epochs < 0 || n_train_samples < 2 || ensemble_size < 1 || depth < 1 ||
        hidden_units < 1 || mlp_layers < 1 || chunk_size < 1 || threads < 1) {
      throw ConfigError("train: sizes must be positive");
    }
    if (!(lr_init > 0.0) || !(lr_final > 0.0) || lr_final > lr_init) {
      throw ConfigError("train: need 0 < lr_final <= lr_init");
    }
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("train: validation_fraction must lie in [0, 1)");
    }
    if (!(grad_clip > 0.0)) throw ConfigError("train: grad_clip must be > 0");
  }

  ModelShape model_shape(int dim, int cond_dim) const {
    return ModelShape{dim, cond_dim, depth, hidden_units, mlp_layers};
  }
};

struct CurveRow {
  long samples_seen = 0;
  double batch_loss = 0.0;
  int epoch = 0;
  std::optional<double> val_loss;  // set on the last batch of each epoch
  double lr = 0.0;
};

struct TrainResult {
  CvEnsemble ensemble;
  std::vector<CurveRow> curve;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
  double final_loss = 0.0;
  long samples_seen = 0;
  bool aborted = false;
  std::string error;
};

struct EpochEvent {
  int epoch;  // epochs completed
  long samples_seen;
  const CvEnsemble& ensemble;
};

namespace detail {

inline Mat gather_cols(const Mat& m, const std::vector<Eigen::Index>& idx, std::size_t begin, std::size_t len) {
  Mat out(m.rows(), static_cast<Eigen::Index>(len));
  for (std::size_t k = 0; k < len; ++k) out.col(static_cast<Eigen::Index>(k)) = m.col(idx[begin + k]);
  return out;
}

inline double chunked_loss_value(const CvEnsemble& ens, const Mat& x, const Mat& y, const Mat& s, const Mat& h,
                                 Eigen::Index chunk) {
  double total = 0.0;
  for (Eigen::Index b = 0; b < x.cols(); b += chunk) {
    const Eigen::Index len = std::min(chunk, x.cols() - b);
    const Mat g = ensemble_cv_batch(ens, x.middleCols(b, len), y.middleCols(b, len), s.middleCols(b, len));
    total += (h.middleCols(b, len) - g).squaredNorm();
  }
  return total / static_cast<double>(x.cols());
}

}  // namespace detail

/// Epoch order for the training split: a seeded permutation per epoch.
inline std::vector<Eigen::Index> epoch_order(Eigen::Index n_train, std::uint64_t seed, int epoch) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_train));
  for (Eigen::Index i = 0; i < n_train; ++i) idx[static_cast<std::size_t>(i)] = i;
  RngStream rng = RngStream(seed).split(0x65706F63ULL).split(static_cast<std::uint64_t>(epoch));
  shuffle(std::span<Eigen::Index>(idx), rng);
  return idx;
}

/// Trains an ensemble on a prepared dataset and targets. The last
/// validation_fraction of the columns is held out.
inline TrainResult train_on(const Dataset& ds, const Mat& targets, const TrainConfig& cfg,
                            const std::function<void(const EpochEvent&)>& on_epoch = {}) {
  cfg.validate();
  const Eigen::Index n = ds.size();
  const auto n_val = static_cast<Eigen::Index>(std::floor(cfg.validation_fraction * static_cast<double>(n)));
  const Eigen::Index n_train = n - n_val;
  if (n_train < 1) throw ConfigError("train: no training samples after the validation split");

  RngStream init_rng = RngStream(cfg.seed).split(0x696E6974ULL);
  TrainResult res;
  res.ensemble = ensemble_init(cfg.model_shape(static_cast<int>(ds.x.rows()), static_cast<int>(ds.y.rows())),
                               cfg.ensemble_size, init_rng);
  CvEnsemble& ens = res.ensemble;

  const Mat vx = ds.x.rightCols(n_val), vy = ds.y.rightCols(n_val), vs = ds.scores.rightCols(n_val),
            vh = targets.rightCols(n_val);
  auto val_loss = [&] {
    return n_val > 0 ? detail::chunked_loss_value(ens, vx, vy, vs, vh, cfg.chunk_size) : 0.0;
  };
  res.initial_val_loss = val_loss();
  res.final_val_loss = res.initial_val_loss;

  const std::size_t per_member = ens.tree->num_params();
  AdamState adam(per_member * ens.size());
  std::vector<double> flat(per_member * ens.size());
  std::vector<double> flat_grad(per_member * ens.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_final);
    const auto order = epoch_order(n_train, cfg.seed, epoch);
    const auto batch = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t len = std::min(batch, order.size() - begin);
      const Mat bx = detail::gather_cols(ds.x, order, begin, len);
      const Mat by = detail::gather_cols(ds.y, order, begin, len);
      const Mat bs = detail::gather_cols(ds.scores, order, begin, len);
      const Mat bh = detail::gather_cols(targets, order, begin, len);

      LossAndGrad lg = loss_and_grad(ens, bx, by, bs, bh, cfg.chunk_size, cfg.threads);
      double norm2 = 0.0;
      for (const auto& g : lg.grads)
        for (double v : g) norm2 += v * v;
      if (!std::isfinite(lg.loss) || !std::isfinite(norm2)) {
        res.aborted = true;
        res.error = "non-finite loss in epoch " + std::to_string(epoch) + " at batch offset " +
                    std::to_string(begin);
        return res;
      }
      const double clip = std::sqrt(norm2) > cfg.grad_clip ? cfg.grad_clip / std::sqrt(norm2) : 1.0;
      for (std::size_t l = 0; l < ens.size(); ++l) {
        auto p = ens.members[l].params.values();
        std::copy(p.begin(), p.end(), flat.begin() + static_cast<std::ptrdiff_t>(l * per_member));
        for (std::size_t k = 0; k < per_member; ++k) flat_grad[l * per_member + k] = clip * lg.grads[l][k];
      }
      adam_step(flat, flat_grad, adam, lr);
      for (std::size_t l = 0; l < ens.size(); ++l) {
        ens.members[l].params.assign(
            std::span<const double>(flat).subspan(l * per_member, per_member));
      }

      res.samples_seen += static_cast<long>(len);
      res.final_loss = lg.loss;
      CurveRow row;
      row.samples_seen = res.samples_seen;
      row.batch_loss = lg.loss;
      row.epoch = epoch;
      row.lr = lr;
      if (begin + len == order.size()) {
        res.final_val_loss = val_loss();
        row.val_loss = res.final_val_loss;
      }
      res.curve.push_back(row);
    }
    if (on_epoch) on_epoch(EpochEvent{epoch + 1, res.samples_seen, ens});
  }
  return res;
}

/// Dataset generation plus training for one quantity of interest.
inline TrainResult train(const InverseProblem& problem, const TrainConfig& cfg, QoiKind qoi,
                         const std::function<void(const EpochEvent&)>& on_epoch = {}) {
  cfg.validate();
  const Dataset ds = generate_dataset(problem, cfg.n_train_samples, cfg.seed);
  return train_on(ds, training_targets(problem, ds, qoi), cfg, on_epoch);
}

}  // namespace cncv
