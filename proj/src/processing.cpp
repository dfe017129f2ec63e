#include <cmath>
#include <set>

#include <spdlog/spdlog.h>

#include "articfeed/pipeline.hpp"

namespace articfeed::pipeline {

HeadCorrection head_correct(const CoilFrame& frame, const CoilRoles& roles,
                            const std::map<std::string, Vec3>& reference_pose) {
  if (reference_pose.empty()) throw Error(Errc::NoReferencePose, "no reference pose has been captured");
  std::vector<Vec3> current;
  std::vector<Vec3> target;
  for (const auto& id : roles.reference) {
    const CoilSample* c = frame.find(id);
    const auto ref = reference_pose.find(id);
    if (c == nullptr || !c->ok || ref == reference_pose.end()) continue;
    current.push_back(c->pos);
    target.push_back(ref->second);
  }
  HeadCorrection out{frame, false};
  if (current.size() < 3) {
    out.insufficient_reference = true;
    return out;
  }
  RigidTransform align;
  try {
    align = geometry::rigid_align(current, target);
  } catch (const Error& e) {
    if (e.code() != Errc::CollinearPoints) throw;
    out.insufficient_reference = true;
    return out;
  }
  for (auto& c : out.frame.coils) {
    if (!c.ok) continue;
    c.pos = align(c.pos);
    if (c.ori) c.ori = (align.rotation() * *c.ori).normalized();
  }
  return out;
}

CoilFrame normalize(const CoilFrame& frame, const SessionConfig& cfg) {
  CoilFrame out = frame;
  for (auto& c : out.coils) {
    if (!c.ok) continue;
    if (cfg.bite_transform) {
      c.pos = (*cfg.bite_transform)(c.pos);
      if (c.ori) c.ori = (cfg.bite_transform->rotation() * *c.ori).normalized();
    }
    if (cfg.transform) c.pos = cfg.transform->topLeftCorner<3, 3>() * c.pos + cfg.transform->topRightCorner<3, 1>();
  }
  return out;
}

Smoother::Smoother(int window) : window_(window) {
  if (window < 1 || window % 2 == 0) throw Error(Errc::InvalidArgument, "smoothing window must be odd and >= 1");
}

CoilFrame Smoother::process(const CoilFrame& frame) {
  CoilFrame out = frame;
  for (auto& c : out.coils) {
    if (!c.ok) continue;
    auto& hist = history_[c.id];
    hist.push_back(c.pos);
    if (hist.size() > static_cast<std::size_t>(window_)) hist.pop_front();
    Vec3 sum = Vec3::Zero();
    for (const auto& p : hist) sum += p;
    c.pos = sum / static_cast<double>(hist.size());
  }
  return out;
}

std::map<std::string, Vec3> capture_reference_pose(const CoilRoles& roles, std::span<const CoilFrame> frames) {
  std::map<std::string, Vec3> pose;
  for (const auto& id : roles.reference) {
    Vec3 sum = Vec3::Zero();
    int count = 0;
    for (const auto& f : frames) {
      const CoilSample* c = f.find(id);
      if (c != nullptr && c->ok) {
        sum += c->pos;
        ++count;
      }
    }
    if (count == 0) throw Error(Errc::InsufficientReference, "reference coil '" + id + "' was never visible");
    pose[id] = sum / count;
  }
  return pose;
}

namespace {

struct Mean {
  Vec3 sum = Vec3::Zero();
  int count = 0;
  void add(const Vec3& p) {
    sum += p;
    ++count;
  }
  Vec3 value() const { return sum / count; }
};

const CoilSample* visible(const CoilFrame& f, const std::string& id) {
  const CoilSample* c = f.find(id);
  return c != nullptr && c->ok ? c : nullptr;
}

}  // namespace

SessionConfig record_bite_plane(const SessionConfig& cfg, std::span<const CoilFrame> frames) {
  if (cfg.reference_pose.empty()) throw Error(Errc::NoReferencePose, "bite plane needs a reference pose");
  const auto& r = cfg.roles;
  const bool origin_coil = !r.origin_is_recorded();
  Mean left, right, front, origin;
  for (const auto& raw : frames) {
    const HeadCorrection hc = head_correct(raw, r, cfg.reference_pose);
    if (hc.insufficient_reference) continue;
    const auto* l = visible(hc.frame, r.bite_left);
    const auto* rt = visible(hc.frame, r.bite_right);
    const auto* f = visible(hc.frame, r.bite_front);
    const auto* o = origin_coil ? visible(hc.frame, r.origin) : nullptr;
    if (l == nullptr || rt == nullptr || f == nullptr || (origin_coil && o == nullptr)) continue;
    left.add(l->pos);
    right.add(rt->pos);
    front.add(f->pos);
    if (o != nullptr) origin.add(o->pos);
  }
  if (frames.empty() || left.count == 0 || 2 * static_cast<std::size_t>(left.count) < frames.size()) {
    throw Error(Errc::BiteCoilsMissing, "bite coils visible in " + std::to_string(left.count) + " of " +
                                            std::to_string(frames.size()) + " frames (need at least half)");
  }
  Vec3 origin_point;
  if (origin_coil) {
    origin_point = origin.value();
  } else if (cfg.origin_point) {
    origin_point = *cfg.origin_point;
  } else {
    throw Error(Errc::OriginMissing, "origin is \"recorded\" but no origin point has been recorded");
  }
  SessionConfig out = cfg;
  out.bite_transform = geometry::bite_plane_frame(left.value(), right.value(), front.value(), origin_point);
  return out;
}

SessionConfig record_origin(const SessionConfig& cfg, std::span<const CoilFrame> frames) {
  if (cfg.reference_pose.empty()) throw Error(Errc::NoReferencePose, "origin needs a reference pose");
  const std::string id = cfg.roles.trace_coil();
  Mean mean;
  for (const auto& raw : frames) {
    const HeadCorrection hc = head_correct(raw, cfg.roles, cfg.reference_pose);
    if (hc.insufficient_reference) continue;
    if (const auto* c = visible(hc.frame, id)) mean.add(c->pos);
  }
  if (mean.count == 0) throw Error(Errc::EmptyTrace, "coil '" + id + "' was never visible during the origin task");
  SessionConfig out = cfg;
  out.origin_point = mean.value();
  return out;
}

SessionConfig record_palate_trace(const SessionConfig& cfg, std::span<const CoilFrame> frames,
                                  const models::PcaModel& palate) {
  if (!cfg.bite_transform) throw Error(Errc::NoBitePlane, "record the bite plane before the palate trace");
  const std::string id = cfg.roles.trace_coil();
  std::vector<Vec3> trace;
  for (const auto& raw : frames) {
    const HeadCorrection hc = head_correct(raw, cfg.roles, cfg.reference_pose);
    if (hc.insufficient_reference) continue;
    const CoilFrame n = normalize(hc.frame, cfg);
    if (const auto* c = visible(n, id)) trace.push_back(c->pos);
  }
  if (trace.empty()) throw Error(Errc::EmptyTrace, "trace coil '" + id + "' was never visible");
  const fitting::PalateFit fit = fitting::fit_palate(palate, trace);
  SessionConfig out = cfg;
  out.palate_weights = fit.x;
  out.palate_residual = fit.mean_residual;
  out.palate_skipped = false;
  return out;
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(SessionConfig cfg, Models models)
    : cfg_(std::move(cfg)), models_(std::move(models)), smoother_(cfg_.smoothing_window) {
  cfg_.validate();
  if (!models_.tongue) throw Error(Errc::InvalidArgument, "a tongue model is required");
  models_.tongue->validate();
  models::validate_correspondences(cfg_.roles.tongue, models_.tongue->vertex_count());
  if (models_.palate) {
    models_.palate->validate();
    if (cfg_.palate_weights && cfg_.palate_weights->size() != models_.palate->dims()) {
      throw Error(Errc::DimensionMismatch, "palate weights do not match the palate model");
    }
  }
  tracker_ = fitting::TrackerState::neutral(*models_.tongue);
}

void Pipeline::reset_tracking() {
  tracker_ = fitting::TrackerState::neutral(*models_.tongue);
  smoother_.reset();
}

Phase Pipeline::phase() const {
  if (cfg_.reference_pose.empty()) return Phase::Setup;
  if (task_ == Task::BitePlane || !cfg_.bite_transform) return Phase::BitePlane;
  if (task_ == Task::Palate) return Phase::Palate;
  if (models_.palate && !cfg_.palate_weights && !cfg_.palate_skipped) return Phase::Palate;
  return Phase::Live;
}

ProcessedFrame Pipeline::process(const CoilFrame& raw) {
  if (!first_t_) first_t_ = raw.t;
  if (task_) task_frames_.push_back(raw);

  if (cfg_.reference_pose.empty() && task_ != Task::Reference) {
    if (raw.t - *first_t_ < 1.0) {
      auto_reference_.push_back(raw);
    } else {
      try {
        cfg_.reference_pose = capture_reference_pose(cfg_.roles, auto_reference_);
        reset_tracking();
        ++revision_;
        spdlog::info("reference pose captured from {} frames", auto_reference_.size());
      } catch (const Error& e) {
        spdlog::warn("reference capture failed, retrying: {}", e.what());
        first_t_ = raw.t;
      }
      auto_reference_.clear();
    }
  }

  ProcessedFrame out;
  out.seq = raw.seq;
  out.t = raw.t;
  out.x = tracker_.x;
  out.y = tracker_.y;
  if (cfg_.reference_pose.empty()) {
    out.coils = raw.coils;
    return out;
  }

  const HeadCorrection hc = head_correct(raw, cfg_.roles, cfg_.reference_pose);
  if (hc.insufficient_reference) {
    out.insufficient_reference = true;
    out.coils = raw.coils;
    return out;
  }
  const CoilFrame smoothed = smoother_.process(normalize(hc.frame, cfg_));
  out.coils = smoothed.coils;
  if (!cfg_.bite_transform) return out;

  fitting::CoilPositions positions;
  for (const auto& c : cfg_.roles.tongue) {
    const CoilSample* s = smoothed.find(c.coil_id);
    positions[c.coil_id] = s != nullptr && s->ok ? std::optional<Vec3>(s->pos) : std::nullopt;
  }
  fitting::FrameFit fit = fitting::track_frame(tracker_, *models_.tongue, cfg_.tracker_config(), positions);
  tracker_ = std::move(fit.state);
  out.x = tracker_.x;
  out.y = tracker_.y;
  out.vertices = std::move(fit.vertices);
  out.fit_residual = fit.diagnostics.residual_rms;
  out.solver_iterations = fit.diagnostics.iterations;
  out.no_visible_coils = fit.diagnostics.no_visible_coils;
  out.tracked = !out.no_visible_coils;
  return out;
}

void Pipeline::start_task(Task task) {
  if (task_) throw Error(Errc::InvalidState, std::string("task '") + to_string(*task_) + "' is already running");
  switch (task) {
    case Task::Reference:
      break;
    case Task::Origin:
    case Task::BitePlane:
      if (cfg_.reference_pose.empty()) throw Error(Errc::NoReferencePose, "capture the reference pose first");
      break;
    case Task::Palate:
      if (!models_.palate) throw Error(Errc::InvalidState, "no palate model is loaded");
      if (!cfg_.bite_transform) throw Error(Errc::NoBitePlane, "record the bite plane before the palate trace");
      break;
  }
  task_ = task;
  task_frames_.clear();
  ++revision_;
}

void Pipeline::cancel_task() {
  if (!task_) return;
  task_.reset();
  task_frames_.clear();
  ++revision_;
}

void Pipeline::stop_task() {
  if (!task_) throw Error(Errc::InvalidState, "no task is running");
  const Task task = *task_;
  std::vector<CoilFrame> frames = std::move(task_frames_);
  cancel_task();
  switch (task) {
    case Task::Reference: {
      auto pose = capture_reference_pose(cfg_.roles, frames);
      cfg_.reference_pose = std::move(pose);
      // Head-corrected coordinates changed; anything recorded in them is stale.
      cfg_.bite_transform.reset();
      cfg_.origin_point.reset();
      reset_tracking();
      break;
    }
    case Task::Origin:
      cfg_ = record_origin(cfg_, frames);
      break;
    case Task::BitePlane:
      cfg_ = record_bite_plane(cfg_, frames);
      reset_tracking();
      break;
    case Task::Palate:
      cfg_ = record_palate_trace(cfg_, frames, *models_.palate);
      break;
  }
  ++revision_;
}

void Pipeline::skip_palate() {
  if (!cfg_.bite_transform) throw Error(Errc::NoBitePlane, "record the bite plane first");
  cfg_.palate_skipped = true;
  ++revision_;
}

void Pipeline::set_roles(CoilRoles roles) {
  roles.validate();
  models::validate_correspondences(roles.tongue, models_.tongue->vertex_count());
  const bool reference_changed =
      std::set<std::string>(roles.reference.begin(), roles.reference.end()) !=
      std::set<std::string>(cfg_.roles.reference.begin(), cfg_.roles.reference.end());
  cancel_task();
  cfg_.roles = std::move(roles);
  if (reference_changed) {
    cfg_.reference_pose.clear();
    cfg_.bite_transform.reset();
    cfg_.origin_point.reset();
    auto_reference_.clear();
    first_t_.reset();
  }
  reset_tracking();
  ++revision_;
}

void Pipeline::set_smoothing_window(int window) {
  smoother_ = Smoother(window);
  cfg_.smoothing_window = window;
  ++revision_;
}

void Pipeline::set_delay(double seconds) {
  if (!std::isfinite(seconds) || seconds < 0.0) throw Error(Errc::InvalidArgument, "delay must be >= 0 seconds");
  cfg_.delay = seconds;
  ++revision_;
}

}  // namespace articfeed::pipeline
