#pragma once

#include <vector>

#include "uniphy/mpm.hpp"
#include "uniphy/tape.hpp"

namespace uniphy {

struct RolloutGradConfig {
  int checkpoint_interval = 20;
  bool wrt_initial_velocity = false;
  bool check_adjoints = true;
};

// Teacher forcing: the simulated state is overwritten by ground truth every
// `period` steps. Gradients do not flow across the reset boundaries.
struct TeacherForcingPlan {
  int period = 0;  // 0 or >= steps: off
  const std::vector<std::vector<Vec3>>* x = nullptr;
  const std::vector<std::vector<Vec3>>* v = nullptr;
  const std::vector<std::vector<Mat3>>* C = nullptr;
  const std::vector<std::vector<Mat3>>* F = nullptr;
};

// Mean over states and particles of the squared position error. gt must
// cover steps+1 states.
double position_mse(const std::vector<std::vector<Vec3>>& pred,
                    const std::vector<std::vector<Vec3>>& gt);

// Reverse-mode gradient of the position MSE of a rollout with respect to the
// provider's parameters (latent, optionally per-layer weights) and optionally
// the initial particle velocities. Memory is bounded by the checkpoint
// interval: the forward pass stores snapshots, the backward pass re-runs each
// segment on a fresh tape and chains the state adjoints across segments.
GradReport checkpointed_rollout_grad(const SimState& initial, TapedProvider& provider,
                                     const SimConfig& sim,
                                     const std::vector<std::vector<Vec3>>& gt_positions,
                                     const RolloutGradConfig& cfg,
                                     const TeacherForcingPlan* tf = nullptr);

}  // namespace uniphy
