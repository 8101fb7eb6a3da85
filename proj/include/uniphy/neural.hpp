#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "uniphy/mpm.hpp"
#include "uniphy/rng.hpp"
#include "uniphy/tape.hpp"
#include "uniphy/tensor3.hpp"

namespace uniphy {

inline constexpr int kLatentDim = 32;
inline constexpr int kProjFeatureDim = 59;    // F(9) U(9) V^T(9) z(32)
inline constexpr int kStressFeatureDim = 57;  // sigma(3) F^T F(9) det(1) log det(1) Fmax(1) log Fmax(1) C(9) z(32)
inline constexpr int kGPhiHidden = 32;
inline constexpr int kFThetaHidden = 128;
inline constexpr int kMlpLayers = 5;

struct Latent {
  std::array<double, kLatentDim> z{};
};

struct LinearLayer {
  int in = 0, out = 0;
  std::vector<double> w;  // row-major out x in
  std::vector<double> b;
};

struct Mlp {
  std::vector<LinearLayer> layers;  // GELU between layers
  int input_dim() const { return layers.front().in; }
  int output_dim() const { return layers.back().out; }
  size_t param_count() const;
};

struct ModelWeights {
  Mlp g_phi;    // 59 -> 32 -> 32 -> 32 -> 32 -> 9, final layer zero-initialized
  Mlp f_theta;  // 57 -> 128 -> 128 -> 128 -> 128 -> 9
};

// Fan-in-scaled uniform init; the g_phi head starts at zero so the projection
// network is the identity residual before any training.
ModelWeights init_model(Rng& rng);
Latent init_latent(Rng& rng);  // 32 iid N(0,1) draws

// Feature layouts of the two networks, exact order is a shape contract.
std::array<double, kProjFeatureDim> features_projection(const Mat3& F, const Svd3& svd,
                                                        const Latent& z);
std::array<double, kStressFeatureDim> features_stress(const Mat3& F_proj, const Mat3& C,
                                                      const Latent& z);

// Plain forward passes (value in, value out).
std::vector<double> mlp_forward(const Mlp& mlp, std::span<const double> input);
Mat3 g_phi_forward(const Mlp& g_phi, const Mat3& F, const Latent& z);
Mat3 f_theta_forward(const Mlp& f_theta, const Mat3& F_proj, const Mat3& C, const Latent& z);

// Tape-side network binding: weights live in contiguous tape slots.
struct MlpOnTape {
  std::vector<Tape::LinearRef> layers;
};
MlpOnTape bind_mlp(Tape& t, const Mlp& mlp);
Vh mlp_forward(Tape& t, const MlpOnTape& mlp, Vh x, bool accum_wgrad);

Vh pack_projection_features(Tape& t, M3h F, const Svd3h& svd, Vh z);
Vh pack_stress_features(Tape& t, M3h F_proj, M3h C, Vh z);
M3h g_phi_forward(Tape& t, const MlpOnTape& g, M3h F, Vh z, bool accum_wgrad);
M3h f_theta_forward(Tape& t, const MlpOnTape& f, M3h F_proj, M3h C, Vh z, bool accum_wgrad);

// Latent-conditioned constitutive provider: F_proj = F + g_phi(...) and
// S = sym(f_theta(...)), both conditioned on one latent.
class NeuralProvider final : public TapedProvider {
 public:
  NeuralProvider(const ModelWeights& weights, const Latent& z)
      : weights_(&weights), latent_(z) {}

  void bind(Tape& t) override;
  M3h project(Tape& t, M3h F, double dt) override;
  M3h stress(Tape& t, M3h F_proj, M3h C) override;
  void collect_params(std::vector<ParamGroup>& out) const override;

  bool accumulate_weight_grads = false;
  Vh z_slot() const { return z_; }
  const MlpOnTape& g_slots() const { return g_; }
  const MlpOnTape& f_slots() const { return f_; }
  const ModelWeights& weights() const { return *weights_; }
  const Latent& latent() const { return latent_; }
  Mat3 last_rotation() const { return last_rotation_; }  // R = U_proj V_proj^T

 private:
  const ModelWeights* weights_;
  Latent latent_;
  MlpOnTape g_, f_;
  Vh z_;
  Mat3 last_rotation_ = Mat3::identity();
};

// Versioned binary checkpoint: weights plus the per-trajectory latent
// codebook and optimizer step counters.
struct Checkpoint {
  ModelWeights weights;
  std::vector<std::pair<uint64_t, Latent>> codebook;
  uint64_t epoch = 0;
  uint64_t adam_step_weights = 0;
  uint64_t adam_step_latents = 0;
};
void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace uniphy
