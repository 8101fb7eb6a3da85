#pragma once

#include <memory>
#include <vector>

#include "uniphy/materials.hpp"
#include "uniphy/tape.hpp"
#include "uniphy/tensor3.hpp"

namespace uniphy {

struct ParticleState {
  Vec3 x;              // m, inside the unit cube
  Vec3 v;              // m/s
  Mat3 C;              // 1/s, affine velocity
  Mat3 F;              // deformation gradient
  double mass = 0.0;   // kg
  double volume0 = 0.0;  // m^3
};

enum class BoundaryKind : uint8_t { Sticky = 0, SlipWalls = 1 };

struct GridConfig {
  int n = 32;              // nodes per axis; cell size h = 1/(n-1)
  int boundary_width = 3;  // cells
  BoundaryKind boundary = BoundaryKind::Sticky;
  double h() const { return 1.0 / (n - 1); }
};

struct SimConfig {
  double dt = 1e-4;  // s
  Vec3 gravity{0.0, -9.8, 0.0};
  int steps = 0;
};

struct SimState {
  std::vector<ParticleState> particles;
  GridConfig grid;
};

// Per-particle per-step supervision: trial F fed to the projection, the
// projected F, the affine velocity the stress saw, and the stress itself.
struct SupervisionTuple {
  Mat3 F, F_proj, C, S;
};

struct Trajectory {
  SimState initial;
  std::vector<std::vector<Vec3>> positions;           // (steps+1) x P
  std::vector<std::vector<SupervisionTuple>> tuples;  // steps x P when recorded
  int steps() const { return static_cast<int>(positions.size()) - 1; }
  int particle_count() const {
    return positions.empty() ? 0 : static_cast<int>(positions.front().size());
  }
};

// Constitutive provider seen by the simulator: the projection of the trial
// deformation gradient and the Cauchy stress. Implementations bind whatever
// parameters they own (weights, latents) onto the tape first.
class TapedProvider {
 public:
  virtual ~TapedProvider() = default;
  virtual void bind(Tape& t) { (void)t; }
  virtual M3h project(Tape& t, M3h F, double dt) = 0;
  virtual M3h stress(Tape& t, M3h F_proj, M3h C) = 0;
  // Differentiable parameter groups bound by the last bind() call.
  virtual void collect_params(std::vector<ParamGroup>& out) const { (void)out; }
};

class AnalyticProvider final : public TapedProvider {
 public:
  explicit AnalyticProvider(const MaterialSpec& spec) : spec_(validate_params(spec)) {}
  M3h project(Tape& t, M3h F, double dt) override {
    return project_deformation(t, spec_, F, dt);
  }
  M3h stress(Tape& t, M3h F_proj, M3h C) override { return cauchy_stress(t, spec_, F_proj, C); }
  const MaterialSpec& spec() const { return spec_; }

 private:
  MaterialSpec spec_;
};

// Particle state as tape handles; the unit a taped step advances. Mass and
// rest volume are plain constants.
struct TapedState {
  std::vector<V3h> x, v;
  std::vector<M3h> C, F;
  std::vector<double> mass, volume0;
  size_t size() const { return x.size(); }
};

TapedState bind_state(Tape& t, const SimState& s);
void extract_state(const Tape& t, const TapedState& ts, SimState& s);

// Reusable buffers for active-node bookkeeping inside a step.
struct StepScratch {
  std::vector<int32_t> node_slot;   // per grid node: block slot or stale
  std::vector<int32_t> node_stamp;
  int32_t stamp = 0;
  std::vector<int32_t> active_ids;  // first-touch order
  std::vector<int32_t> vel_slots;   // per active node
  std::vector<int32_t> particle_nodes;  // 27 per particle
};

// Optional per-step capture of grid values for tests and diagnostics.
struct StepTrace {
  std::vector<int32_t> node_ids;
  std::vector<double> node_mass;
  std::vector<Vec3> node_momentum, node_force, node_velocity;
};

// One MPM step: p2g (projection + stress + scatter) -> grid update ->
// g2p -> advect + F update. Throws CflError when dt > 0.5 h / v_max and
// OutOfDomainError when a particle's stencil leaves the grid.
void step(Tape& t, TapedState& state, TapedProvider& provider, const GridConfig& grid,
          const SimConfig& sim, StepScratch& scratch,
          std::vector<SupervisionTuple>* record = nullptr, StepTrace* trace = nullptr);

// Plain-value step for a SimState (one-shot scratch tape inside).
void step(SimState& state, TapedProvider& provider, const SimConfig& sim,
          std::vector<SupervisionTuple>* record = nullptr, StepTrace* trace = nullptr);

// Runs `sim.steps` steps, recording positions (and supervision tuples when
// asked). NaN state aborts with DivergenceError carrying the step index.
Trajectory rollout(const SimState& initial, TapedProvider& provider, const SimConfig& sim,
                   bool record_tuples = false);

}  // namespace uniphy
