#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "articfeed/models.hpp"

namespace articfeed::fitting {

using geometry::Vec3;
using models::Correspondence;
using models::MultilinearModel;
using models::PcaModel;

// ---------------------------------------------------------------------------
// Limited-memory quasi-Newton minimizer

struct SolverOptions {
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;
  int memory = 8;

  void validate() const;
};

/// Returns f(x) and writes the gradient into `grad` (already sized like x).
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

struct SolverResult {
  Eigen::VectorXd x;
  double value = 0.0;
  double gradient_norm = 0.0;
  int iterations = 0;
  bool converged = false;  // gradient_norm <= gradient_tolerance
};

/// L-BFGS with a backtracking Armijo line search. Accepted iterates never
/// increase the objective. Throws NonFiniteObjective if f or its gradient is
/// not finite at the start point or at an accepted iterate.
SolverResult minimize(const Objective& f, const Eigen::VectorXd& x0, const SolverOptions& opts = {});

// ---------------------------------------------------------------------------
// Palate fit

struct PalateFit {
  Eigen::VectorXd x;
  double mean_residual = 0.0;
  /// Mean point-to-mesh distance at the start weights and after each accepted
  /// outer iteration; non-increasing.
  std::vector<double> residual_history;
  int outer_iterations = 0;
};

/// Alternates closest-point correspondences on the current reconstruction with
/// a weight fit against those fixed barycentric targets. An outer iteration
/// that would raise the mean residual is rejected and ends the fit.
PalateFit fit_palate(const PcaModel& model, std::span<const Vec3> trace, double prior_weight = 1e-4,
                     int outer_iterations = 10);

// ---------------------------------------------------------------------------
// Tongue tracking

struct TrackerConfig {
  std::vector<Correspondence> correspondences;
  double alpha_prior = 0.1;
  double beta_temporal = 1.0;
  int freeze_after = 200;
  SolverOptions solver;

  void validate() const;
};

struct TrackerState {
  Eigen::VectorXd x;
  Eigen::VectorXd y;
  int frame_count = 0;
  bool frozen = false;
  std::vector<Eigen::VectorXd> x_history;

  /// Neutral weights, no history.
  static TrackerState neutral(const MultilinearModel& model);
};

/// Coil id -> position; std::nullopt marks a dropped-out coil.
using CoilPositions = std::map<std::string, std::optional<Vec3>>;

/// Per-frame tongue-fit energy over the stacked weights [x; y], or [y] alone
/// when the anatomy is held fixed:
///   sum_c |v_c(x, y) - p_c|^2
///   + alpha (|x - x0|^2_sigma + |y - y0|^2_sigma)
///   + beta (|x - x_prev|^2 + |y - y_prev|^2)
/// With fixed anatomy, the x terms are constant and omitted.
class TongueObjective {
 public:
  TongueObjective(const MultilinearModel& model, const TrackerConfig& cfg, const CoilPositions& coils,
                  const Eigen::VectorXd& x_prev, const Eigen::VectorXd& y_prev, bool fixed_anatomy);

  double operator()(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const;

  int dims() const;
  /// Number of coils that contribute to the data term.
  int visible() const { return static_cast<int>(targets_.size()); }
  /// sigma-scale for each stacked weight, used for finite-difference steps.
  Eigen::VectorXd scales() const;
  Eigen::VectorXd pack(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const;

  /// Max and RMS distance between the corresponding vertices and the coils.
  std::pair<double, double> residual(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const;

 private:
  struct Target {
    Eigen::Vector3d mean;
    Eigen::MatrixXd block;  // 3 x (n*m) rows of the core
    Eigen::Vector3d position;
  };

  const MultilinearModel& model_;
  std::vector<Target> targets_;
  double alpha_;
  double beta_;
  Eigen::VectorXd x_prev_;
  Eigen::VectorXd y_prev_;
  bool fixed_anatomy_;
};

/// Max relative error between the analytic gradient and central differences
/// (step 1e-5 in sigma units), measured as |g_a - g_fd|_inf / max(|g_a|_inf, |g_fd|_inf).
double objective_gradient_check(const TongueObjective& objective, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& y);

struct FrameDiagnostics {
  int iterations = 0;
  double gradient_norm = 0.0;
  double residual_rms = 0.0;
  double residual_max = 0.0;
  int visible_coils = 0;
  bool converged = false;
  bool no_visible_coils = false;
};

struct FrameFit {
  TrackerState state;
  Eigen::VectorXd vertices;  // 3V flat, consistent with state.x / state.y
  FrameDiagnostics diagnostics;
};

/// One tracking step: warm-started joint fit of (x, y) until the anatomy
/// freezes at frame `freeze_after` (x := mean of the history), y-only after.
/// With no visible coil the previous weights are returned unchanged and
/// diagnostics.no_visible_coils is set. Throws DimensionMismatch.
FrameFit track_frame(const TrackerState& state, const MultilinearModel& model, const TrackerConfig& cfg,
                     const CoilPositions& coils);

}  // namespace articfeed::fitting
