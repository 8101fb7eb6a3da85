#include "uniphy/mpm.hpp"

#include <cmath>

#include "uniphy/errors.hpp"

namespace uniphy {

TapedState bind_state(Tape& t, const SimState& s) {
  TapedState ts;
  size_t p = s.particles.size();
  ts.x.reserve(p);
  ts.v.reserve(p);
  ts.C.reserve(p);
  ts.F.reserve(p);
  for (const ParticleState& ps : s.particles) {
    ts.x.push_back(t.leaf(ps.x));
    ts.v.push_back(t.leaf(ps.v));
    ts.C.push_back(t.leaf(ps.C));
    ts.F.push_back(t.leaf(ps.F));
    ts.mass.push_back(ps.mass);
    ts.volume0.push_back(ps.volume0);
  }
  return ts;
}

void extract_state(const Tape& t, const TapedState& ts, SimState& s) {
  for (size_t i = 0; i < ts.size(); ++i) {
    ParticleState& ps = s.particles[i];
    ps.x = t.val(ts.x[i]);
    ps.v = t.val(ts.v[i]);
    ps.C = t.val(ts.C[i]);
    ps.F = t.val(ts.F[i]);
  }
}

namespace {

inline int node_linear(int i, int j, int k, int n) { return (i * n + j) * n + k; }

// Slip-wall mask: zero the normal velocity component on nodes inside the
// wall band of each face.
inline uint8_t slip_mask_for(int i, int j, int k, int n, int bw) {
  uint8_t m = 0;
  if (i <= bw || i >= n - 1 - bw) m |= 1;
  if (j <= bw || j >= n - 1 - bw) m |= 2;
  if (k <= bw || k >= n - 1 - bw) m |= 4;
  return m;
}

inline bool is_boundary_node(int i, int j, int k, int n, int bw) {
  return slip_mask_for(i, j, k, n, bw) != 0;
}

}  // namespace

void step(Tape& t, TapedState& state, TapedProvider& provider, const GridConfig& grid,
          const SimConfig& sim, StepScratch& scratch, std::vector<SupervisionTuple>* record,
          StepTrace* trace) {
  const int n = grid.n;
  const double h = grid.h();
  const double dt = sim.dt;
  const size_t pcount = state.size();

  // Runtime CFL guard on particle velocities.
  double vmax = 0.0;
  for (size_t p = 0; p < pcount; ++p) {
    Vec3 v = t.val(state.v[p]);
    vmax = std::max({vmax, std::abs(v.x), std::abs(v.y), std::abs(v.z)});
  }
  if (vmax > 0.0 && dt > 0.5 * h / vmax)
    throw CflError("dt " + std::to_string(dt) + " exceeds CFL bound " +
                   std::to_string(0.5 * h / vmax));

  const size_t total_nodes = static_cast<size_t>(n) * n * n;
  if (scratch.node_slot.size() != total_nodes) {
    scratch.node_slot.assign(total_nodes, -1);
    scratch.node_stamp.assign(total_nodes, -1);
    scratch.stamp = 0;
  }
  scratch.stamp++;
  scratch.active_ids.clear();
  scratch.vel_slots.clear();
  scratch.particle_nodes.assign(pcount * 27, -1);

  // Phase A: projection + stress per particle, active node discovery.
  std::vector<M3h> f_proj(pcount), stress(pcount);
  if (record) record->resize(pcount);
  for (size_t p = 0; p < pcount; ++p) {
    M3h fp = provider.project(t, state.F[p], dt);
    M3h sp = provider.stress(t, fp, state.C[p]);
    f_proj[p] = fp;
    stress[p] = sp;
    if (record) {
      SupervisionTuple& row = (*record)[p];
      row.F = t.val(state.F[p]);
      row.F_proj = t.val(fp);
      row.C = t.val(state.C[p]);
      row.S = t.val(sp);
    }

    Vec3 xp = t.val(state.x[p]);
    int base[3];
    for (int d = 0; d < 3; ++d) {
      base[d] = static_cast<int>(std::floor(xp[d] / h - 0.5));
      if (base[d] < 0 || base[d] + 2 > n - 1)
        throw OutOfDomainError("particle " + std::to_string(p) + " outside grid interior");
    }
    int32_t* pn = scratch.particle_nodes.data() + p * 27;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) {
          int id = node_linear(base[0] + i, base[1] + j, base[2] + k, n);
          if (scratch.node_stamp[id] != scratch.stamp) {
            scratch.node_stamp[id] = scratch.stamp;
            scratch.node_slot[id] = t.alloc_zeros(7).i;  // [mass, mom3, frc3]
            scratch.active_ids.push_back(id);
          }
          pn[(i * 3 + j) * 3 + k] = scratch.node_slot[id];
        }
  }

  // Phase B: scatter mass, momentum and stress forces.
  for (size_t p = 0; p < pcount; ++p) {
    t.p2g_scatter(state.x[p], state.v[p], state.C[p], stress[p],
                  scratch.particle_nodes.data() + p * 27, state.mass[p], state.volume0[p], h);
  }

  // Phase C: nodal velocities with boundary handling.
  scratch.vel_slots.resize(scratch.active_ids.size());
  V3h zero3 = t.leaf(Vec3{0, 0, 0});
  for (size_t a = 0; a < scratch.active_ids.size(); ++a) {
    int id = scratch.active_ids[a];
    int i = id / (n * n), j = (id / n) % n, k = id % n;
    int32_t block = scratch.node_slot[id];
    double mass = t.raw_values()[block];
    V3h vel;
    if (mass <= 0.0) {
      vel = zero3;
    } else if (grid.boundary == BoundaryKind::Sticky &&
               is_boundary_node(i, j, k, n, grid.boundary_width)) {
      vel = zero3;
    } else {
      uint8_t mask = grid.boundary == BoundaryKind::SlipWalls
                         ? slip_mask_for(i, j, k, n, grid.boundary_width)
                         : 0;
      vel = t.grid_velocity(block, dt, sim.gravity, mask);
    }
    scratch.vel_slots[a] = vel.i;
    if (trace) {
      trace->node_ids.push_back(id);
      trace->node_mass.push_back(mass);
      const double* b = t.raw_values().data() + block;
      trace->node_momentum.push_back({b[1], b[2], b[3]});
      trace->node_force.push_back({b[4], b[5], b[6]});
      trace->node_velocity.push_back(t.val(vel));
    }
  }
  // Map node block slots to velocity slots for the gather.
  for (size_t a = 0; a < scratch.active_ids.size(); ++a)
    scratch.node_slot[scratch.active_ids[a]] = scratch.vel_slots[a];

  // Phase D: gather, advect, update F.
  const double lo = 0.51 * h, hi = 1.0 - 0.51 * h;
  for (size_t p = 0; p < pcount; ++p) {
    Vec3 xp = t.val(state.x[p]);
    int base[3];
    for (int d = 0; d < 3; ++d) base[d] = static_cast<int>(std::floor(xp[d] / h - 0.5));
    int32_t nodes[27];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k)
          nodes[(i * 3 + j) * 3 + k] =
              scratch.node_slot[node_linear(base[0] + i, base[1] + j, base[2] + k, n)];
    Tape::G2pOut out = t.g2p_gather(state.x[p], nodes, h);
    state.v[p] = out.v;
    state.C[p] = out.C;
    state.x[p] = t.clamp(t.axpy(state.x[p], dt, out.v), lo, hi);
    state.F[p] = t.matmul(t.id_plus_scale(dt, out.C), f_proj[p]);
  }
}

void step(SimState& state, TapedProvider& provider, const SimConfig& sim,
          std::vector<SupervisionTuple>* record, StepTrace* trace) {
  Tape tape;
  provider.bind(tape);
  TapedState ts = bind_state(tape, state);
  StepScratch scratch;
  step(tape, ts, provider, state.grid, sim, scratch, record, trace);
  extract_state(tape, ts, state);
}

Trajectory rollout(const SimState& initial, TapedProvider& provider, const SimConfig& sim,
                   bool record_tuples) {
  Trajectory traj;
  traj.initial = initial;
  SimState state = initial;
  const size_t pcount = state.particles.size();

  auto snapshot = [&]() {
    std::vector<Vec3> xs(pcount);
    for (size_t p = 0; p < pcount; ++p) xs[p] = state.particles[p].x;
    traj.positions.push_back(std::move(xs));
  };
  snapshot();

  Tape tape;
  provider.bind(tape);
  size_t base_mark = tape.mark();
  StepScratch scratch;
  for (int s = 0; s < sim.steps; ++s) {
    for (size_t p = 0; p < pcount; ++p) {
      const ParticleState& ps = state.particles[p];
      if (!finite(ps.x) || !finite(ps.v) || !finite(ps.C) || !finite(ps.F))
        throw DivergenceError("rollout: non-finite particle state", s);
    }
    std::vector<SupervisionTuple> row;
    TapedState ts = bind_state(tape, state);
    step(tape, ts, provider, state.grid, sim, scratch, record_tuples ? &row : nullptr);
    extract_state(tape, ts, state);
    tape.reset(base_mark);
    if (record_tuples) traj.tuples.push_back(std::move(row));
    snapshot();
  }
  return traj;
}

}  // namespace uniphy
