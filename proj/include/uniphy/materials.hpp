#pragma once

#include <optional>
#include <string>

#include "uniphy/tape.hpp"
#include "uniphy/tensor3.hpp"

namespace uniphy {

enum class MaterialKind : uint8_t {
  Elastic = 0,
  Newtonian = 1,
  Plasticine = 2,
  Sand = 3,
  NonNewtonian = 4,
};

const char* to_string(MaterialKind kind);
MaterialKind material_kind_from_string(const std::string& name);  // throws ValidationError

struct MaterialSpec {
  MaterialKind kind = MaterialKind::Elastic;
  double mu = 0.0;      // Pa
  double lambda = 0.0;  // Pa
  std::optional<double> tau_y;       // Pa, Plasticine / NonNewtonian
  std::optional<double> theta_fric;  // rad, Sand
  std::optional<double> eta;         // Pa.s, NonNewtonian
};

struct ParamRange {
  double lo, hi;
};
struct MaterialRanges {
  ParamRange mu, lambda;
  std::optional<ParamRange> tau_y, theta_fric, eta;
};
const MaterialRanges& parameter_ranges(MaterialKind kind);

// Returns the spec unchanged when every required parameter is present and in
// range; throws ValidationError naming the offending field and bound.
MaterialSpec validate_params(const MaterialSpec& spec);

// Return mapping G(F): pulls the trial deformation gradient back onto the
// material's admissible set. dt is consumed only by the NonNewtonian
// viscoplastic flow. Throws SingularDeformationError when det(F) <= 0.
M3h project_deformation(Tape& t, const MaterialSpec& spec, M3h F, double dt);
Mat3 project_deformation(const MaterialSpec& spec, const Mat3& F, double dt);

// Cauchy stress S(F_proj, C); C enters only the Newtonian viscosity term.
M3h cauchy_stress(Tape& t, const MaterialSpec& spec, M3h F_proj, M3h C);
Mat3 cauchy_stress(const MaterialSpec& spec, const Mat3& F_proj, const Mat3& C);

}  // namespace uniphy
