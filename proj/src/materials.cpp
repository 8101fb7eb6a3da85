#include "uniphy/materials.hpp"

#include <cmath>

#include "uniphy/errors.hpp"

namespace uniphy {

const char* to_string(MaterialKind kind) {
  switch (kind) {
    case MaterialKind::Elastic: return "elastic";
    case MaterialKind::Newtonian: return "newtonian";
    case MaterialKind::Plasticine: return "plasticine";
    case MaterialKind::Sand: return "sand";
    case MaterialKind::NonNewtonian: return "nonnewtonian";
  }
  return "?";
}

MaterialKind material_kind_from_string(const std::string& name) {
  if (name == "elastic") return MaterialKind::Elastic;
  if (name == "newtonian") return MaterialKind::Newtonian;
  if (name == "plasticine") return MaterialKind::Plasticine;
  if (name == "sand") return MaterialKind::Sand;
  if (name == "nonnewtonian" || name == "non-newtonian") return MaterialKind::NonNewtonian;
  throw ValidationError("unknown material kind: '" + name + "'");
}

const MaterialRanges& parameter_ranges(MaterialKind kind) {
  static const MaterialRanges elastic{{350.0, 2595196.0}, {500.0, 2580120.0}, {}, {}, {}};
  static const MaterialRanges newtonian{{50.0, 1e3}, {30.0, 5e5}, {}, {}, {}};
  static const MaterialRanges plasticine{
      {1e4, 1e6}, {1e4, 3e6}, ParamRange{5e3, 1e4}, {}, {}};
  static const MaterialRanges sand{
      {2400.0, 9e6}, {2400.0, 9e6}, {}, ParamRange{0.01, 0.4}, {}};
  static const MaterialRanges nonnewtonian{
      {1e3, 2e6}, {1e3, 2e6}, ParamRange{1e3, 2e6}, {}, ParamRange{0.1, 100.0}};
  switch (kind) {
    case MaterialKind::Elastic: return elastic;
    case MaterialKind::Newtonian: return newtonian;
    case MaterialKind::Plasticine: return plasticine;
    case MaterialKind::Sand: return sand;
    case MaterialKind::NonNewtonian: return nonnewtonian;
  }
  return elastic;
}

namespace {

void check_range(const char* field, double value, const ParamRange& r, MaterialKind kind) {
  if (!(value >= r.lo && value <= r.hi))
    throw ValidationError(std::string(to_string(kind)) + ": " + field + " = " +
                          std::to_string(value) + " outside [" + std::to_string(r.lo) + ", " +
                          std::to_string(r.hi) + "]");
}

void check_optional(const char* field, const std::optional<double>& value,
                    const std::optional<ParamRange>& r, MaterialKind kind) {
  if (r.has_value()) {
    if (!value.has_value())
      throw ValidationError(std::string(to_string(kind)) + ": missing required field " + field);
    check_range(field, *value, *r, kind);
  }
}

}  // namespace

MaterialSpec validate_params(const MaterialSpec& spec) {
  const MaterialRanges& r = parameter_ranges(spec.kind);
  check_range("mu", spec.mu, r.mu, spec.kind);
  check_range("lambda", spec.lambda, r.lambda, spec.kind);
  check_optional("tau_y", spec.tau_y, r.tau_y, spec.kind);
  check_optional("theta_fric", spec.theta_fric, r.theta_fric, spec.kind);
  check_optional("eta", spec.eta, r.eta, spec.kind);
  return spec;
}

namespace {

constexpr double kHenckyFloor = 1e-12;

void require_positive_det(double det, const char* where) {
  if (!(det > 0.0))
    throw SingularDeformationError(std::string(where) + ": det(F) = " + std::to_string(det) +
                                   " <= 0");
}

// Shared tail of the von Mises style mappings: U exp(eps_new) V^T.
M3h rebuild_from_strain(Tape& t, const Svd3h& s, V3h eps_new) {
  return t.matmul_tb(t.matmul(s.U, t.diag(t.exp(eps_new))), s.V);
}

struct HenckyParts {
  Svd3h svd;
  V3h eps;
  Sc tr;
  V3h dev;
  Sc dev_norm;  // ||eps_hat||
};

HenckyParts hencky_parts(Tape& t, M3h F) {
  HenckyParts p;
  p.svd = t.svd(F);
  p.eps = t.log_clamped(p.svd.sigma, kHenckyFloor);
  p.tr = t.sum(Vh{p.eps.i, 3});
  p.dev = t.axpy_bcast(p.eps, -1.0 / 3.0, p.tr);
  p.dev_norm = t.sqrt_(t.dot(p.dev, p.dev));
  return p;
}

M3h project_plasticine(Tape& t, const MaterialSpec& spec, M3h F) {
  HenckyParts p = hencky_parts(t, F);
  double tau = *spec.tau_y;
  double yield_radius = tau / (2.0 * spec.mu);
  if (t.val(p.dev_norm) - yield_radius <= 0.0) return F;  // inside the yield surface
  Sc dgamma = t.add_const(p.dev_norm, -yield_radius);
  V3h corr = t.scale(p.dev, t.div(dgamma, p.dev_norm));
  V3h eps_new = t.sub(p.eps, corr);
  return rebuild_from_strain(t, p.svd, eps_new);
}

M3h project_sand(Tape& t, const MaterialSpec& spec, M3h F) {
  HenckyParts p = hencky_parts(t, F);
  double theta = *spec.theta_fric;
  double alpha = std::sqrt(2.0 / 3.0) * 2.0 * std::sin(theta) / (3.0 - std::sin(theta));
  if (t.val(p.tr) > 0.0) {
    // Expansion: project all the way to the volume-preserving rotation.
    return t.matmul_tb(p.svd.U, p.svd.V);
  }
  double k = alpha * (3.0 * spec.lambda + 2.0 * spec.mu) / (2.0 * spec.mu);
  double dgamma_val = t.val(p.dev_norm) + k * t.val(p.tr);
  if (dgamma_val <= 0.0) return F;
  Sc dgamma = t.add(p.dev_norm, t.scale(p.tr, k));
  V3h corr = t.scale(p.dev, t.div(dgamma, p.dev_norm));
  V3h eps_new = t.sub(p.eps, corr);
  return rebuild_from_strain(t, p.svd, eps_new);
}

M3h project_nonnewtonian(Tape& t, const MaterialSpec& spec, M3h F, double dt) {
  HenckyParts p = hencky_parts(t, F);
  double tau = *spec.tau_y;
  double eta = *spec.eta;
  double two_mu = 2.0 * spec.mu;
  double s_norm_val = two_mu * t.val(p.dev_norm);
  if (s_norm_val - tau <= 0.0) return F;
  // Viscous overshoot decay: the deviatoric stress magnitude relaxes toward
  // the yield surface at a rate set by eta; eta -> 0 recovers plasticine.
  Sc s_norm = t.scale(p.dev_norm, two_mu);
  Sc dgamma = t.add_const(s_norm, -tau);
  Sc mu_hat = t.scale(t.dot(p.svd.sigma, p.svd.sigma), spec.mu / 3.0);
  Sc denom = t.add_const(t.div(t.leaf(eta / (2.0 * dt)), mu_hat), 1.0);
  Sc s_hat = t.sub(s_norm, t.div(dgamma, denom));
  Sc dev_scale = t.div(s_hat, s_norm);  // (s_hat/2mu) / ||eps_hat||
  V3h new_dev = t.scale(p.dev, dev_scale);
  V3h eps_new = t.axpy_bcast(new_dev, 1.0 / 3.0, p.tr);
  return rebuild_from_strain(t, p.svd, eps_new);
}

M3h project_newtonian(Tape& t, M3h F) {
  // Volume-only tracking: F_proj = J^{1/3} I. Shear never accumulates in F;
  // the stress law reads only J and the velocity gradient.
  Sc j = t.det(F);
  require_positive_det(t.val(j), "newtonian projection");
  Sc c = t.cbrt_(j);
  V3h ones = t.leaf(Vec3{1, 1, 1});
  return t.diag(t.scale(ones, c));
}

// StVK in principal space: J S = U (2 mu eps + lambda tr(eps) I) U^T.
M3h stvk_stress(Tape& t, const MaterialSpec& spec, M3h F_proj) {
  Sc j = t.det(F_proj);
  require_positive_det(t.val(j), "stvk stress");
  HenckyParts p = hencky_parts(t, F_proj);
  V3h principal = t.axpy_bcast(t.scale(p.eps, 2.0 * spec.mu), spec.lambda, p.tr);
  M3h tau = t.matmul_tb(t.matmul(p.svd.U, t.diag(principal)), p.svd.U);
  return t.scale(tau, t.div(t.leaf(1.0), j));
}

M3h stress_elastic(Tape& t, const MaterialSpec& spec, M3h F) {
  Sc j = t.det(F);
  require_positive_det(t.val(j), "neo-hookean stress");
  M3h b = t.matmul_tb(F, F);  // F F^T
  Sc lnj = t.log_clamped(j, kHenckyFloor);
  Sc coef = t.add_const(t.scale(lnj, spec.lambda), -spec.mu);
  // mu F F^T + (lambda ln J - mu) I, then divide by J.
  M3h tau = t.add(t.scale(b, spec.mu), t.diag(t.scale(t.leaf(Vec3{1, 1, 1}), coef)));
  return t.scale(tau, t.div(t.leaf(1.0), j));
}

M3h stress_newtonian(Tape& t, const MaterialSpec& spec, M3h F_proj, M3h C) {
  Sc j = t.det(F_proj);
  require_positive_det(t.val(j), "newtonian stress");
  double kappa = (2.0 / 3.0) * spec.mu + spec.lambda;
  Sc j2 = t.mul(j, j);
  Sc j3 = t.mul(j2, j);
  Sc j6 = t.mul(j3, j3);
  Sc vol = t.scale(t.sub(j, t.div(t.leaf(1.0), j6)), kappa);  // kappa (J - 1/J^6)
  M3h visc = t.scale(t.symmetrize(C), spec.mu);               // 1/2 mu (C + C^T)
  M3h tau = t.add(visc, t.diag(t.scale(t.leaf(Vec3{1, 1, 1}), vol)));
  return t.scale(tau, t.div(t.leaf(1.0), j));
}

}  // namespace

M3h project_deformation(Tape& t, const MaterialSpec& spec, M3h F, double dt) {
  switch (spec.kind) {
    case MaterialKind::Elastic:
      return F;
    case MaterialKind::Newtonian:
      return project_newtonian(t, F);
    case MaterialKind::Plasticine: {
      require_positive_det(t.val(t.det(F)), "plasticine projection");
      return project_plasticine(t, spec, F);
    }
    case MaterialKind::Sand: {
      require_positive_det(t.val(t.det(F)), "sand projection");
      return project_sand(t, spec, F);
    }
    case MaterialKind::NonNewtonian: {
      if (!(dt > 0.0)) throw ValidationError("nonnewtonian projection: dt must be > 0");
      require_positive_det(t.val(t.det(F)), "nonnewtonian projection");
      return project_nonnewtonian(t, spec, F, dt);
    }
  }
  throw ValidationError("project_deformation: bad material kind");
}

M3h cauchy_stress(Tape& t, const MaterialSpec& spec, M3h F_proj, M3h C) {
  switch (spec.kind) {
    case MaterialKind::Elastic:
      return stress_elastic(t, spec, F_proj);
    case MaterialKind::Newtonian:
      return stress_newtonian(t, spec, F_proj, C);
    case MaterialKind::Plasticine:
    case MaterialKind::Sand:
    case MaterialKind::NonNewtonian:
      return stvk_stress(t, spec, F_proj);
  }
  throw ValidationError("cauchy_stress: bad material kind");
}

Mat3 project_deformation(const MaterialSpec& spec, const Mat3& F, double dt) {
  if (!finite(F)) throw DomainError("project_deformation: non-finite F");
  Tape& t = scratch_tape();
  size_t m = t.mark();
  Mat3 out;
  try {
    out = t.val(project_deformation(t, spec, t.leaf(F), dt));
  } catch (...) {
    t.reset(m);
    throw;
  }
  t.reset(m);
  return out;
}

Mat3 cauchy_stress(const MaterialSpec& spec, const Mat3& F_proj, const Mat3& C) {
  if (!finite(F_proj) || !finite(C)) throw DomainError("cauchy_stress: non-finite input");
  Tape& t = scratch_tape();
  size_t m = t.mark();
  Mat3 out;
  try {
    out = t.val(cauchy_stress(t, spec, t.leaf(F_proj), t.leaf(C)));
  } catch (...) {
    t.reset(m);
    throw;
  }
  t.reset(m);
  return out;
}

}  // namespace uniphy
