#include "uniphy/autodiff.hpp"

#include <cmath>

#include "uniphy/errors.hpp"

namespace uniphy {

double position_mse(const std::vector<std::vector<Vec3>>& pred,
                    const std::vector<std::vector<Vec3>>& gt) {
  if (pred.size() != gt.size() || pred.empty())
    throw ValidationError("position_mse: step count mismatch");
  double acc = 0.0;
  size_t count = 0;
  for (size_t t = 0; t < pred.size(); ++t) {
    if (pred[t].size() != gt[t].size())
      throw ValidationError("position_mse: particle count mismatch at step " + std::to_string(t));
    for (size_t p = 0; p < pred[t].size(); ++p) {
      Vec3 d = pred[t][p] - gt[t][p];
      acc += dot(d, d);
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

namespace {

bool reset_due(const TeacherForcingPlan* tf, int step, int total_steps) {
  return tf && tf->period > 0 && tf->period < total_steps && step > 0 &&
         step % tf->period == 0;
}

void apply_reset_plain(SimState& state, const TeacherForcingPlan& tf, int step) {
  for (size_t p = 0; p < state.particles.size(); ++p) {
    ParticleState& ps = state.particles[p];
    ps.x = (*tf.x)[step][p];
    ps.v = (*tf.v)[step][p];
    ps.C = (*tf.C)[step][p];
    ps.F = (*tf.F)[step][p];
  }
}

void apply_reset_taped(Tape& t, TapedState& ts, const TeacherForcingPlan& tf, int step) {
  for (size_t p = 0; p < ts.size(); ++p) {
    ts.x[p] = t.leaf((*tf.x)[step][p]);
    ts.v[p] = t.leaf((*tf.v)[step][p]);
    ts.C[p] = t.leaf((*tf.C)[step][p]);
    ts.F[p] = t.leaf((*tf.F)[step][p]);
  }
}

struct StateAdj {
  std::vector<Vec3> x, v;
  std::vector<Mat3> C, F;
  bool present = false;
};

}  // namespace

GradReport checkpointed_rollout_grad(const SimState& initial, TapedProvider& provider,
                                     const SimConfig& sim,
                                     const std::vector<std::vector<Vec3>>& gt_positions,
                                     const RolloutGradConfig& cfg,
                                     const TeacherForcingPlan* tf) {
  const int steps = sim.steps;
  const size_t pcount = initial.particles.size();
  if (static_cast<int>(gt_positions.size()) < steps + 1)
    throw ValidationError("checkpointed_rollout_grad: ground truth shorter than rollout");
  const int interval = std::max(1, cfg.checkpoint_interval);
  const double norm = 1.0 / (static_cast<double>(steps + 1) * static_cast<double>(pcount));

  // Forward pass, forward-only tape, snapshot at every segment start.
  std::vector<SimState> snapshots;
  std::vector<std::vector<Vec3>> pred(steps + 1, std::vector<Vec3>(pcount));
  {
    SimState state = initial;
    Tape tape;
    provider.bind(tape);
    size_t base = tape.mark();
    StepScratch scratch;
    for (int t = 0; t <= steps; ++t) {
      for (size_t p = 0; p < pcount; ++p) {
        if (!finite(state.particles[p].x))
          throw DivergenceError("rollout gradient: non-finite position", t);
        pred[t][p] = state.particles[p].x;
      }
      if (t == steps) break;
      if (reset_due(tf, t, steps)) apply_reset_plain(state, *tf, t);
      if (t % interval == 0) snapshots.push_back(state);
      TapedState ts = bind_state(tape, state);
      step(tape, ts, provider, state.grid, sim, scratch);
      extract_state(tape, ts, state);
      tape.reset(base);
    }
  }

  GradReport report;
  {
    double acc = 0.0;
    for (int t = 0; t <= steps; ++t)
      for (size_t p = 0; p < pcount; ++p) {
        Vec3 d = pred[t][p] - gt_positions[t][p];
        acc += dot(d, d);
      }
    report.loss = acc * norm;
  }

  // Backward over segments, last to first.
  const int nseg = steps == 0 ? 0 : (steps + interval - 1) / interval;
  StateAdj carried;
  Tape tape;
  tape.set_recording(true);
  tape.check_adjoints = cfg.check_adjoints;
  StepScratch scratch;
  for (int seg = nseg - 1; seg >= 0; --seg) {
    const int t0 = seg * interval;
    const int t1 = std::min(steps, t0 + interval);
    tape.clear();
    provider.bind(tape);
    std::vector<ParamGroup> groups;
    provider.collect_params(groups);

    TapedState ts = bind_state(tape, snapshots[seg]);
    TapedState input = ts;
    std::vector<TapedState> produced;  // states t0+1 .. t1
    for (int t = t0; t < t1; ++t) {
      if (t > t0 && reset_due(tf, t, steps)) apply_reset_taped(tape, ts, *tf, t);
      step(tape, ts, provider, snapshots[seg].grid, sim, scratch);
      produced.push_back(ts);
    }

    tape.zero_adjoints();
    // Loss terms for the states this segment produced.
    for (int t = t0 + 1; t <= t1; ++t) {
      const TapedState& st = produced[t - t0 - 1];
      for (size_t p = 0; p < pcount; ++p) {
        Vec3 d = (tape.val(st.x[p]) - gt_positions[t][p]) * (2.0 * norm);
        tape.seed(st.x[p], d);
      }
    }
    // Adjoint carried from the following segment, unless a reset cut it.
    if (carried.present && !reset_due(tf, t1, steps)) {
      const TapedState& st = produced.back();
      for (size_t p = 0; p < pcount; ++p) {
        tape.seed(st.x[p], carried.x[p]);
        tape.seed(st.v[p], carried.v[p]);
        tape.seed(st.C[p], carried.C[p]);
        tape.seed(st.F[p], carried.F[p]);
      }
    }
    tape.run_backward();

    // Accumulate parameter gradients across segments.
    for (const ParamGroup& g : groups) {
      GradGroup* dst = nullptr;
      for (auto& existing : report.groups)
        if (existing.name == g.name) dst = &existing;
      if (!dst) {
        report.groups.push_back({g.name, std::vector<double>(g.n, 0.0)});
        dst = &report.groups.back();
      }
      for (int32_t k = 0; k < g.n; ++k) dst->grad[k] += tape.adj(g.slot + k);
    }
    if (seg == 0 && cfg.wrt_initial_velocity) {
      GradGroup v0;
      v0.name = "v0";
      v0.grad.reserve(pcount * 3);
      for (size_t p = 0; p < pcount; ++p) {
        Vec3 g = tape.adj(input.v[p]);
        v0.grad.push_back(g.x);
        v0.grad.push_back(g.y);
        v0.grad.push_back(g.z);
      }
      report.groups.push_back(std::move(v0));
    }

    // Carry the input-state adjoint to the previous segment, unless this
    // segment started at a teacher-forcing reset (the reset is a constant).
    carried.present = t0 > 0 && !reset_due(tf, t0, steps);
    if (carried.present) {
      carried.x.resize(pcount);
      carried.v.resize(pcount);
      carried.C.resize(pcount);
      carried.F.resize(pcount);
      for (size_t p = 0; p < pcount; ++p) {
        carried.x[p] = tape.adj(input.x[p]);
        carried.v[p] = tape.adj(input.v[p]);
        carried.C[p] = tape.adj(input.C[p]);
        carried.F[p] = tape.adj(input.F[p]);
      }
    }
  }

  for (const auto& g : report.groups)
    for (double v : g.grad) {
      if (!std::isfinite(v)) report.all_finite = false;
      report.max_abs = std::max(report.max_abs, std::abs(v));
    }
  return report;
}

}  // namespace uniphy
