#include "articfeed/fitting.hpp"

#include <cmath>
#include <deque>

#include <spdlog/spdlog.h>

namespace articfeed::fitting {

void SolverOptions::validate() const {
  if (max_iterations < 1 || !(gradient_tolerance > 0.0) || memory < 1) {
    throw Error(Errc::InvalidArgument, "solver options must be positive");
  }
}

namespace {

bool finite(double value, const Eigen::VectorXd& grad) { return std::isfinite(value) && grad.allFinite(); }

// Two-loop recursion: returns -H * g for the implicit inverse-Hessian estimate.
Eigen::VectorXd lbfgs_direction(const Eigen::VectorXd& g, const std::deque<Eigen::VectorXd>& s_hist,
                                const std::deque<Eigen::VectorXd>& y_hist) {
  Eigen::VectorXd q = g;
  const std::size_t k = s_hist.size();
  std::vector<double> alpha(k);
  std::vector<double> rho(k);
  for (std::size_t idx = k; idx-- > 0;) {
    rho[idx] = 1.0 / y_hist[idx].dot(s_hist[idx]);
    alpha[idx] = rho[idx] * s_hist[idx].dot(q);
    q -= alpha[idx] * y_hist[idx];
  }
  if (k > 0) {
    q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
  }
  for (std::size_t idx = 0; idx < k; ++idx) {
    const double beta = rho[idx] * y_hist[idx].dot(q);
    q += (alpha[idx] - beta) * s_hist[idx];
  }
  return -q;
}

}  // namespace

SolverResult minimize(const Objective& f, const Eigen::VectorXd& x0, const SolverOptions& opts) {
  opts.validate();
  constexpr double kArmijo = 1e-4;
  constexpr int kMaxBacktracks = 60;

  SolverResult result;
  result.x = x0;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(x0.size());
  result.value = f(result.x, grad);
  if (!finite(result.value, grad)) {
    throw Error(Errc::NonFiniteObjective, "objective or gradient not finite at the start point");
  }

  std::deque<Eigen::VectorXd> s_hist;
  std::deque<Eigen::VectorXd> y_hist;
  Eigen::VectorXd trial_grad(x0.size());

  while (result.iterations < opts.max_iterations) {
    const double gnorm = grad.norm();
    if (gnorm <= opts.gradient_tolerance) break;

    Eigen::VectorXd direction = lbfgs_direction(grad, s_hist, y_hist);
    double slope = grad.dot(direction);
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      direction = -grad;
      slope = -gnorm * gnorm;
    }

    double step = s_hist.empty() ? std::min(1.0, 1.0 / gnorm) : 1.0;
    bool accepted = false;
    Eigen::VectorXd trial;
    double trial_value = 0.0;
    for (int k = 0; k < kMaxBacktracks; ++k, step *= 0.5) {
      trial = result.x + step * direction;
      trial_value = f(trial, trial_grad);
      if (std::isfinite(trial_value) && trial_value < result.value &&
          trial_value <= result.value + kArmijo * step * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      if (s_hist.empty()) break;  // steepest descent also failed: at numerical floor
      s_hist.clear();
      y_hist.clear();
      continue;
    }
    if (!trial_grad.allFinite()) {
      throw Error(Errc::NonFiniteObjective, "gradient not finite at an accepted iterate");
    }

    Eigen::VectorXd s = trial - result.x;
    Eigen::VectorXd y = trial_grad - grad;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm() && sy > 0.0) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      if (static_cast<int>(s_hist.size()) > opts.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
      }
    }
    result.x = std::move(trial);
    result.value = trial_value;
    grad = trial_grad;
    ++result.iterations;
  }

  result.gradient_norm = grad.norm();
  result.converged = result.gradient_norm <= opts.gradient_tolerance;
  return result;
}

// ---------------------------------------------------------------------------

namespace {

struct PalateCorrespondences {
  std::vector<geometry::SurfaceHit> hits;
  double mean_distance = 0.0;
};

PalateCorrespondences closest_points(const geometry::Mesh& mesh, std::span<const Vec3> trace) {
  PalateCorrespondences out;
  out.hits.reserve(trace.size());
  double total = 0.0;
  for (const auto& q : trace) {
    out.hits.push_back(geometry::closest_point_on_mesh(q, mesh));
    total += out.hits.back().distance;
  }
  out.mean_distance = total / static_cast<double>(trace.size());
  return out;
}

}  // namespace

PalateFit fit_palate(const PcaModel& model, std::span<const Vec3> trace, double prior_weight, int outer_iterations) {
  const int n = model.dims();
  if (n == 0) throw Error(Errc::DegenerateModel, "palate model has no weights");
  if (trace.empty()) throw Error(Errc::EmptyTrace, "palate trace has no points");
  if (prior_weight < 0.0 || outer_iterations < 1) {
    throw Error(Errc::InvalidArgument, "fit_palate: prior_weight >= 0 and outer_iterations >= 1 required");
  }
  if (static_cast<int>(trace.size()) < 3 * n) {
    spdlog::warn("palate trace has {} points for {} weights; fit is weakly constrained", trace.size(), n);
  }

  PalateFit fit;
  fit.x = Eigen::VectorXd::Zero(n);
  auto current = closest_points(models::reconstruct_pca(model, fit.x), trace);
  fit.residual_history.push_back(current.mean_distance);

  const Eigen::VectorXd inv_var = model.sigmas.array().square().inverse();
  SolverOptions inner;
  inner.max_iterations = 500;

  // With the barycentric targets fixed, s_k(x) = a_k + J_k x. The point-to-point
  // energy sum |s_k - q_k|^2 slides tangentially very slowly, so each outer
  // iteration first tries a step dominated by the distance along the face
  // normal and falls back to point-to-point when that step does not help.
  const auto solve_step = [&](const Eigen::VectorXd& start, double tangential) {
    const geometry::Mesh mesh = models::reconstruct_pca(model, start);
    Eigen::MatrixXd hessian = prior_weight * Eigen::MatrixXd(inv_var.asDiagonal());
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n);
    double constant = 0.0;
    for (std::size_t k = 0; k < trace.size(); ++k) {
      const auto& hit = current.hits[k];
      const auto& face = model.faces[static_cast<std::size_t>(hit.face_index)];
      Eigen::Vector3d anchor = Eigen::Vector3d::Zero();
      Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(3, n);
      for (int b = 0; b < 3; ++b) {
        anchor += hit.barycentric[b] * model.mean.segment<3>(3 * face[b]);
        jac += hit.barycentric[b] * model.basis.middleRows(3 * face[b], 3);
      }
      Eigen::Matrix3d metric = Eigen::Matrix3d::Identity();
      if (tangential < 1.0) {
        const Vec3 normal = (mesh.vertices[face[1]] - mesh.vertices[face[0]])
                                .cross(mesh.vertices[face[2]] - mesh.vertices[face[0]])
                                .normalized();
        if (normal.allFinite()) metric = tangential * Eigen::Matrix3d::Identity() + (1.0 - tangential) * normal * normal.transpose();
      }
      const Eigen::Vector3d offset = trace[k] - anchor;
      hessian.noalias() += jac.transpose() * metric * jac;
      rhs.noalias() += jac.transpose() * metric * offset;
      constant += offset.dot(metric * offset);
    }
    inner.gradient_tolerance = 1e-10 * std::max(1.0, rhs.norm());
    const Objective energy = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
      const Eigen::VectorXd hx = hessian * x;
      grad = 2.0 * (hx - rhs);
      return x.dot(hx) - 2.0 * rhs.dot(x) + constant;
    };
    return minimize(energy, start, inner);
  };

  for (int outer = 0; outer < outer_iterations; ++outer) {
    SolverResult solved = solve_step(fit.x, 1e-3);
    if (closest_points(models::reconstruct_pca(model, solved.x), trace).mean_distance > fit.residual_history.back()) {
      solved = solve_step(fit.x, 1.0);
    }

    auto next = closest_points(models::reconstruct_pca(model, solved.x), trace);
    if (next.mean_distance > fit.residual_history.back()) break;

    bool same_faces = true;
    for (std::size_t k = 0; k < trace.size() && same_faces; ++k) {
      same_faces = next.hits[k].face_index == current.hits[k].face_index;
    }
    const double change = (solved.x - fit.x).lpNorm<Eigen::Infinity>();
    fit.x = solved.x;
    current = std::move(next);
    fit.residual_history.push_back(current.mean_distance);
    ++fit.outer_iterations;
    if (same_faces && change < 1e-10) break;
  }
  fit.mean_residual = fit.residual_history.back();
  return fit;
}

// ---------------------------------------------------------------------------

void TrackerConfig::validate() const {
  if (correspondences.empty()) throw Error(Errc::InvalidArgument, "tracker needs at least one correspondence");
  if (alpha_prior < 0.0 || beta_temporal < 0.0) {
    throw Error(Errc::InvalidArgument, "regularization weights must be non-negative");
  }
  if (freeze_after < 1) throw Error(Errc::InvalidArgument, "freeze_after must be >= 1");
  solver.validate();
}

TrackerState TrackerState::neutral(const MultilinearModel& model) {
  TrackerState state;
  state.x = model.neutral_x;
  state.y = model.neutral_y;
  return state;
}

TongueObjective::TongueObjective(const MultilinearModel& model, const TrackerConfig& cfg, const CoilPositions& coils,
                                 const Eigen::VectorXd& x_prev, const Eigen::VectorXd& y_prev, bool fixed_anatomy)
    : model_(model),
      alpha_(cfg.alpha_prior),
      beta_(cfg.beta_temporal),
      x_prev_(x_prev),
      y_prev_(y_prev),
      fixed_anatomy_(fixed_anatomy) {
  if (x_prev.size() != model.n || y_prev.size() != model.m) {
    throw Error(Errc::DimensionMismatch, "tracker weights do not match the tongue model");
  }
  models::validate_correspondences(cfg.correspondences, model.vertex_count());
  for (const auto& corr : cfg.correspondences) {
    const auto it = coils.find(corr.coil_id);
    if (it == coils.end() || !it->second) continue;
    Target t;
    t.mean = model.mean.segment<3>(3 * corr.vertex_index);
    t.block = model.core.middleRows(3 * corr.vertex_index, 3);
    t.position = *it->second;
    targets_.push_back(std::move(t));
  }
}

int TongueObjective::dims() const { return fixed_anatomy_ ? model_.m : model_.n + model_.m; }

Eigen::VectorXd TongueObjective::scales() const {
  if (fixed_anatomy_) return model_.sigmas_y;
  Eigen::VectorXd s(dims());
  s << model_.sigmas_x, model_.sigmas_y;
  return s;
}

Eigen::VectorXd TongueObjective::pack(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  if (fixed_anatomy_) return y;
  Eigen::VectorXd z(dims());
  z << x, y;
  return z;
}

double TongueObjective::operator()(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const {
  const int n = model_.n;
  const int m = model_.m;
  const Eigen::VectorXd x = fixed_anatomy_ ? x_prev_ : Eigen::VectorXd(z.head(n));
  const Eigen::VectorXd y = fixed_anatomy_ ? z : Eigen::VectorXd(z.tail(m));

  double value = 0.0;
  Eigen::VectorXd gx = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd gy = Eigen::VectorXd::Zero(m);
  Eigen::MatrixXd partial(3, n);  // column i = sum_j y_j c_ij at this vertex
  for (const auto& t : targets_) {
    for (int i = 0; i < n; ++i) partial.col(i).noalias() = t.block.middleCols(i * m, m) * y;
    const Eigen::Vector3d r = t.mean + partial * x - t.position;
    value += r.squaredNorm();
    gx.noalias() += 2.0 * partial.transpose() * r;
    const Eigen::VectorXd w = t.block.transpose() * r;
    for (int i = 0; i < n; ++i) gy.noalias() += (2.0 * x[i]) * w.segment(i * m, m);
  }

  const Eigen::VectorXd dy = (y - model_.neutral_y).cwiseQuotient(model_.sigmas_y);
  value += alpha_ * dy.squaredNorm() + beta_ * (y - y_prev_).squaredNorm();
  gy += 2.0 * alpha_ * dy.cwiseQuotient(model_.sigmas_y) + 2.0 * beta_ * (y - y_prev_);

  if (fixed_anatomy_) {
    grad = gy;
    return value;
  }
  const Eigen::VectorXd dx = (x - model_.neutral_x).cwiseQuotient(model_.sigmas_x);
  value += alpha_ * dx.squaredNorm() + beta_ * (x - x_prev_).squaredNorm();
  gx += 2.0 * alpha_ * dx.cwiseQuotient(model_.sigmas_x) + 2.0 * beta_ * (x - x_prev_);
  grad.resize(n + m);
  grad << gx, gy;
  return value;
}

std::pair<double, double> TongueObjective::residual(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  if (targets_.empty()) return {0.0, 0.0};
  Eigen::VectorXd outer(static_cast<Eigen::Index>(model_.n) * model_.m);
  for (int i = 0; i < model_.n; ++i) outer.segment(i * model_.m, model_.m) = x[i] * y;
  double worst = 0.0;
  double sum2 = 0.0;
  for (const auto& t : targets_) {
    const double d = (t.mean + t.block * outer - t.position).norm();
    worst = std::max(worst, d);
    sum2 += d * d;
  }
  return {worst, std::sqrt(sum2 / static_cast<double>(targets_.size()))};
}

double objective_gradient_check(const TongueObjective& objective, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const Eigen::VectorXd z = objective.pack(x, y);
  const Eigen::VectorXd scale = objective.scales();
  Eigen::VectorXd analytic(z.size());
  objective(z, analytic);

  Eigen::VectorXd numeric(z.size());
  Eigen::VectorXd scratch(z.size());
  for (Eigen::Index k = 0; k < z.size(); ++k) {
    const double h = 1e-5 * scale[k];
    Eigen::VectorXd plus = z;
    Eigen::VectorXd minus = z;
    plus[k] += h;
    minus[k] -= h;
    numeric[k] = (objective(plus, scratch) - objective(minus, scratch)) / (2.0 * h);
  }
  const double denom = std::max(analytic.lpNorm<Eigen::Infinity>(), numeric.lpNorm<Eigen::Infinity>());
  const double diff = (analytic - numeric).lpNorm<Eigen::Infinity>();
  return denom > 0.0 ? diff / denom : diff;
}

FrameFit track_frame(const TrackerState& state, const MultilinearModel& model, const TrackerConfig& cfg,
                     const CoilPositions& coils) {
  if (state.x.size() != model.n || state.y.size() != model.m) {
    throw Error(Errc::DimensionMismatch, "tracker state does not match the tongue model");
  }
  cfg.validate();

  FrameFit fit;
  fit.state = state;
  const TongueObjective objective(model, cfg, coils, state.x, state.y, state.frozen);
  fit.diagnostics.visible_coils = objective.visible();
  if (objective.visible() == 0) {
    fit.diagnostics.no_visible_coils = true;
    fit.vertices = models::reconstruct_multilinear_flat(model, state.x, state.y);
    return fit;
  }

  SolverResult solved = minimize(objective, objective.pack(state.x, state.y), cfg.solver);
  if (state.frozen) {
    fit.state.y = solved.x;
  } else {
    fit.state.x = solved.x.head(model.n);
    fit.state.y = solved.x.tail(model.m);
    fit.state.x_history.push_back(fit.state.x);
  }
  ++fit.state.frame_count;
  int iterations = solved.iterations;

  if (!state.frozen && fit.state.frame_count >= cfg.freeze_after) {
    Eigen::VectorXd average = Eigen::VectorXd::Zero(model.n);
    for (const auto& x : fit.state.x_history) average += x;
    fit.state.x = average / static_cast<double>(fit.state.x_history.size());
    fit.state.frozen = true;
    const TongueObjective pose_only(model, cfg, coils, fit.state.x, state.y, true);
    solved = minimize(pose_only, fit.state.y, cfg.solver);
    fit.state.y = solved.x;
    iterations += solved.iterations;
  }

  const auto [worst, rms] = objective.residual(fit.state.x, fit.state.y);
  fit.diagnostics.iterations = iterations;
  fit.diagnostics.gradient_norm = solved.gradient_norm;
  fit.diagnostics.converged = solved.converged;
  fit.diagnostics.residual_max = worst;
  fit.diagnostics.residual_rms = rms;
  fit.vertices = models::reconstruct_multilinear_flat(model, fit.state.x, fit.state.y);
  return fit;
}

}  // namespace articfeed::fitting
