#include <cmath>
#include <thread>

#include "articfeed/stream.hpp"

namespace articfeed::stream {

SweepSource::SweepSource(Sweep sweep, bool realtime) : sweep_(std::move(sweep)), realtime_(realtime) {
  sweep_.header.validate();
}

std::optional<CoilFrame> SweepSource::next() {
  if (interrupted_.load() || cursor_ >= sweep_.frames.size()) return std::nullopt;
  CoilFrame frame = sweep_.frames[cursor_++];
  frame.seq = seq_++;
  if (realtime_) {
    if (!start_) start_ = std::chrono::steady_clock::now();
    const auto due = *start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                   std::chrono::duration<double>(frame.t - sweep_.frames.front().t));
    // Sleep in short slices so interrupt() takes effect promptly.
    while (std::chrono::steady_clock::now() < due) {
      if (interrupted_.load()) return std::nullopt;
      std::this_thread::sleep_until(std::min(due, std::chrono::steady_clock::now() + std::chrono::milliseconds(20)));
    }
  }
  return frame;
}

void SweepSource::interrupt() { interrupted_.store(true); }

// ---------------------------------------------------------------------------

const std::vector<std::pair<std::string, Vec3>>& SyntheticLayout::head_coils() {
  static const std::vector<std::pair<std::string, Vec3>> coils = {
      {"ref1", {0.0, 10.0, 45.0}},   {"ref2", {50.0, -75.0, 15.0}}, {"ref3", {-50.0, -75.0, 15.0}},
      {"bl", {22.0, -38.0, -2.0}},   {"br", {-22.0, -38.0, -2.0}},  {"bf", {0.0, -6.0, -2.0}},
      {"ui", {0.0, 0.0, 0.0}},
  };
  return coils;
}

namespace {

// Rises from 0 with zero slope, then oscillates in [0, 1].
double ease(double s, double freq) { return 0.5 * (1.0 - std::cos(2.0 * M_PI * freq * s)); }

}  // namespace

SyntheticSource::SyntheticSource(std::shared_ptr<const models::MultilinearModel> model, SyntheticConfig cfg)
    : model_(std::move(model)), cfg_(std::move(cfg)), rng_(cfg_.seed) {
  if (!model_) throw Error(Errc::InvalidArgument, "synthetic source needs a model");
  model_->validate();
  models::validate_correspondences(cfg_.tongue, model_->vertex_count());
  if (!(cfg_.rate > 0.0)) throw Error(Errc::InvalidArgument, "rate must be positive");
  if (cfg_.dropout_probability < 0.0 || cfg_.dropout_probability > 1.0) {
    throw Error(Errc::InvalidArgument, "dropout probability must be in [0, 1]");
  }
  if (cfg_.noise_mm < 0.0) throw Error(Errc::InvalidArgument, "noise must be non-negative");
  for (const auto& c : cfg_.tongue) {
    for (const auto& [id, _] : SyntheticLayout::head_coils()) {
      if (id == c.coil_id) throw Error(Errc::InvalidArgument, "tongue coil id '" + id + "' clashes with a head coil");
    }
  }

  std::mt19937_64 setup(cfg_.seed ^ 0x5eed5eedULL);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int j = 0; j < model_->m; ++j) phases_.push_back(2.0 * M_PI * unit(setup));
  const Vec3 axis = Vec3(unit(setup) - 0.5, unit(setup) - 0.5, 1.0).normalized();
  placement_ = geometry::RigidTransform(Eigen::Quaterniond(Eigen::AngleAxisd(0.2 + 0.4 * unit(setup), axis)),
                                        Vec3(40.0 * unit(setup) - 20.0, 40.0 * unit(setup) - 20.0, 100.0));
}

SweepHeader SyntheticSource::describe() {
  SweepHeader header;
  header.rate = cfg_.rate;
  for (const auto& [id, _] : SyntheticLayout::head_coils()) header.coil_ids.push_back(id);
  for (const auto& c : cfg_.tongue) header.coil_ids.push_back(c.coil_id);
  return header;
}

Eigen::VectorXd SyntheticSource::pose_weights(std::uint64_t k) const {
  const double t = static_cast<double>(k) / cfg_.rate;
  Eigen::VectorXd y = model_->neutral_y;
  for (int j = 0; j < model_->m; ++j) {
    y[j] += cfg_.pose_amplitude * model_->sigmas_y[j] * std::sin(2.0 * M_PI * (0.4 + 0.13 * j) * t + phases_[j]);
  }
  return y;
}

geometry::RigidTransform SyntheticSource::device_from_canonical(std::uint64_t k) const {
  const double s = static_cast<double>(k) / cfg_.rate - cfg_.still_time;
  if (s <= 0.0) return placement_;
  const double r = cfg_.head_rotation;
  const double d = cfg_.head_translation;
  const Eigen::Quaterniond q = Eigen::AngleAxisd(r * ease(s, 0.23), Vec3::UnitX()) *
                               Eigen::AngleAxisd(-r * ease(s, 0.31), Vec3::UnitY()) *
                               Eigen::AngleAxisd(r * ease(s, 0.17), Vec3::UnitZ());
  const Vec3 shift(d * ease(s, 0.19), -d * ease(s, 0.29), d * ease(s, 0.37));
  return placement_ * geometry::RigidTransform(q, shift);
}

CoilFrame SyntheticSource::canonical_frame(std::uint64_t k) const {
  CoilFrame frame;
  frame.seq = k;
  frame.t = static_cast<double>(k) / cfg_.rate;
  for (const auto& [id, p] : SyntheticLayout::head_coils()) frame.coils.push_back({id, p, std::nullopt, true});
  if (!cfg_.tongue.empty()) {
    const Eigen::VectorXd v = models::reconstruct_multilinear_flat(*model_, model_->neutral_x, pose_weights(k));
    for (const auto& c : cfg_.tongue) {
      frame.coils.push_back({c.coil_id, v.segment<3>(3 * c.vertex_index), std::nullopt, true});
    }
  }
  return frame;
}

std::optional<CoilFrame> SyntheticSource::next() {
  if (cfg_.frames != 0 && index_ >= cfg_.frames) return std::nullopt;
  const std::uint64_t k = index_++;
  CoilFrame frame = canonical_frame(k);
  const auto device = device_from_canonical(k);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution drop(cfg_.dropout_probability);
  const std::size_t head = SyntheticLayout::head_coils().size();
  for (std::size_t c = 0; c < frame.coils.size(); ++c) {
    auto& coil = frame.coils[c];
    coil.pos = device(coil.pos);
    if (cfg_.noise_mm > 0.0) coil.pos += cfg_.noise_mm * Vec3(noise(rng_), noise(rng_), noise(rng_));
    if (c >= head && cfg_.dropout_probability > 0.0 && drop(rng_)) {
      coil.ok = false;
      coil.pos.setZero();
    }
  }
  return frame;
}

Sweep record_synthetic(std::shared_ptr<const models::MultilinearModel> model, SyntheticConfig cfg,
                       std::uint64_t frames) {
  cfg.frames = frames;
  SyntheticSource source(std::move(model), std::move(cfg));
  Sweep sweep;
  sweep.header = source.describe();
  while (auto f = source.next()) sweep.frames.push_back(std::move(*f));
  return sweep;
}

}  // namespace articfeed::stream
