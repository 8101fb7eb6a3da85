#include "uniphy/neural.hpp"

#include <cmath>

#include "uniphy/errors.hpp"
#include "uniphy/serialize.hpp"

namespace uniphy {

size_t Mlp::param_count() const {
  size_t n = 0;
  for (const auto& l : layers) n += l.w.size() + l.b.size();
  return n;
}

namespace {

Mlp make_mlp(std::span<const int> dims, Rng& rng, bool zero_last) {
  Mlp mlp;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    LinearLayer l;
    l.in = dims[i];
    l.out = dims[i + 1];
    l.w.resize(static_cast<size_t>(l.in) * l.out);
    l.b.resize(l.out);
    bool last = i + 2 == dims.size();
    double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    for (double& v : l.w) v = (last && zero_last) ? 0.0 : rng.uniform(-bound, bound);
    for (double& v : l.b) v = (last && zero_last) ? 0.0 : rng.uniform(-bound, bound);
    mlp.layers.push_back(std::move(l));
  }
  return mlp;
}

}  // namespace

ModelWeights init_model(Rng& rng) {
  const int g_dims[] = {kProjFeatureDim, kGPhiHidden, kGPhiHidden, kGPhiHidden, kGPhiHidden, 9};
  const int f_dims[] = {kStressFeatureDim, kFThetaHidden, kFThetaHidden, kFThetaHidden,
                        kFThetaHidden, 9};
  ModelWeights w;
  w.g_phi = make_mlp(g_dims, rng, /*zero_last=*/true);
  w.f_theta = make_mlp(f_dims, rng, /*zero_last=*/false);
  return w;
}

Latent init_latent(Rng& rng) {
  Latent l;
  for (double& v : l.z) v = rng.normal();
  return l;
}

std::array<double, kProjFeatureDim> features_projection(const Mat3& F, const Svd3& svd,
                                                        const Latent& z) {
  std::array<double, kProjFeatureDim> out;
  size_t at = 0;
  for (double v : F.m) out[at++] = v;
  for (double v : svd.U.m) out[at++] = v;
  Mat3 vt = transpose3(svd.V);
  for (double v : vt.m) out[at++] = v;
  for (double v : z.z) out[at++] = v;
  return out;
}

std::array<double, kStressFeatureDim> features_stress(const Mat3& F_proj, const Mat3& C,
                                                      const Latent& z) {
  std::array<double, kStressFeatureDim> out;
  size_t at = 0;
  Svd3 s = svd3(F_proj);
  out[at++] = s.sigma.x;
  out[at++] = s.sigma.y;
  out[at++] = s.sigma.z;
  Mat3 ftf = matmul3(transpose3(F_proj), F_proj);
  for (double v : ftf.m) out[at++] = v;
  double det = det3(F_proj);
  out[at++] = det;
  out[at++] = std::log(det < 1e-6 ? 1e-6 : det);
  double fmax = F_proj(0, 0) > 1e-6 ? F_proj(0, 0) : 1e-6;
  out[at++] = fmax;
  out[at++] = std::log(fmax);
  for (double v : C.m) out[at++] = v;
  for (double v : z.z) out[at++] = v;
  return out;
}

std::vector<double> mlp_forward(const Mlp& mlp, std::span<const double> input) {
  std::vector<double> cur(input.begin(), input.end());
  std::vector<double> next;
  for (size_t li = 0; li < mlp.layers.size(); ++li) {
    const LinearLayer& l = mlp.layers[li];
    next.assign(l.out, 0.0);
    for (int i = 0; i < l.out; ++i) {
      const double* row = l.w.data() + static_cast<size_t>(i) * l.in;
      double acc = l.b[i];
      for (int j = 0; j < l.in; ++j) acc += row[j] * cur[j];
      next[i] = acc;
    }
    if (li + 1 < mlp.layers.size())
      for (double& v : next) v = gelu(v);
    cur.swap(next);
  }
  return cur;
}

Mat3 g_phi_forward(const Mlp& g_phi, const Mat3& F, const Latent& z) {
  auto feat = features_projection(F, svd3(F), z);
  std::vector<double> y = mlp_forward(g_phi, feat);
  Mat3 delta;
  for (int k = 0; k < 9; ++k) delta.m[k] = y[k];
  return F + delta;
}

Mat3 f_theta_forward(const Mlp& f_theta, const Mat3& F_proj, const Mat3& C, const Latent& z) {
  auto feat = features_stress(F_proj, C, z);
  std::vector<double> y = mlp_forward(f_theta, feat);
  Mat3 s1;
  for (int k = 0; k < 9; ++k) s1.m[k] = y[k];
  Mat3 out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out(i, j) = 0.5 * (s1(i, j) + s1(j, i));
  return out;
}

MlpOnTape bind_mlp(Tape& t, const Mlp& mlp) {
  MlpOnTape out;
  for (const LinearLayer& l : mlp.layers) {
    Tape::LinearRef ref;
    ref.in = l.in;
    ref.out = l.out;
    ref.w = t.leaf_vec(l.w).i;
    ref.b = t.leaf_vec(l.b).i;
    out.layers.push_back(ref);
  }
  return out;
}

Vh mlp_forward(Tape& t, const MlpOnTape& mlp, Vh x, bool accum_wgrad) {
  Vh cur = x;
  for (size_t li = 0; li < mlp.layers.size(); ++li) {
    cur = t.linear(mlp.layers[li], cur, accum_wgrad);
    if (li + 1 < mlp.layers.size()) cur = t.gelu(cur);
  }
  return cur;
}

Vh pack_projection_features(Tape& t, M3h F, const Svd3h& svd, Vh z) {
  Vh feat = t.alloc_vec(kProjFeatureDim);
  M3h vt = t.transpose(svd.V);
  t.copy_into(feat, 0, F.i, 9);
  t.copy_into(feat, 9, svd.U.i, 9);
  t.copy_into(feat, 18, vt.i, 9);
  t.copy_into(feat, 27, z.i, kLatentDim);
  return feat;
}

Vh pack_stress_features(Tape& t, M3h F_proj, M3h C, Vh z) {
  Vh feat = t.alloc_vec(kStressFeatureDim);
  Svd3h s = t.svd(F_proj);
  M3h ftf = t.matmul_ta(F_proj, F_proj);
  Sc det = t.det(F_proj);
  Sc logdet = t.log_clamped(det, 1e-6);
  Sc fmax = t.max_const(Sc{F_proj.i}, 1e-6);  // F[0,0] clamp, as the feature list states
  Sc logfmax = t.log_clamped(fmax, 1e-12);
  t.copy_into(feat, 0, s.sigma.i, 3);
  t.copy_into(feat, 3, ftf.i, 9);
  t.copy_into(feat, 12, det.i, 1);
  t.copy_into(feat, 13, logdet.i, 1);
  t.copy_into(feat, 14, fmax.i, 1);
  t.copy_into(feat, 15, logfmax.i, 1);
  t.copy_into(feat, 16, C.i, 9);
  t.copy_into(feat, 25, z.i, kLatentDim);
  return feat;
}

M3h g_phi_forward(Tape& t, const MlpOnTape& g, M3h F, Vh z, bool accum_wgrad) {
  Svd3h svd = t.svd(F);
  Vh feat = pack_projection_features(t, F, svd, z);
  Vh y = mlp_forward(t, g, feat, accum_wgrad);
  return t.add(F, M3h{y.i});  // residual head
}

M3h f_theta_forward(Tape& t, const MlpOnTape& f, M3h F_proj, M3h C, Vh z, bool accum_wgrad) {
  Vh feat = pack_stress_features(t, F_proj, C, z);
  Vh y = mlp_forward(t, f, feat, accum_wgrad);
  return t.symmetrize(M3h{y.i});
}

void NeuralProvider::bind(Tape& t) {
  g_ = bind_mlp(t, weights_->g_phi);
  f_ = bind_mlp(t, weights_->f_theta);
  z_ = t.leaf_vec(std::span<const double>(latent_.z.data(), kLatentDim));
}

void NeuralProvider::collect_params(std::vector<ParamGroup>& out) const {
  out.push_back({"z", z_.i, kLatentDim});
  if (accumulate_weight_grads) {
    auto add_mlp = [&](const char* prefix, const MlpOnTape& mlp) {
      for (size_t li = 0; li < mlp.layers.size(); ++li) {
        const auto& l = mlp.layers[li];
        out.push_back({std::string(prefix) + ".w" + std::to_string(li), l.w, l.in * l.out});
        out.push_back({std::string(prefix) + ".b" + std::to_string(li), l.b, l.out});
      }
    };
    add_mlp("g_phi", g_);
    add_mlp("f_theta", f_);
  }
}

M3h NeuralProvider::project(Tape& t, M3h F, double dt) {
  (void)dt;  // dt dependence, if any, must live in the latent
  return g_phi_forward(t, g_, F, z_, accumulate_weight_grads);
}

M3h NeuralProvider::stress(Tape& t, M3h F_proj, M3h C) {
  // R = U_proj V_proj^T is computed for parity with the projection pipeline
  // but is not part of the stress features.
  Svd3 s = svd3(t.val(F_proj));
  last_rotation_ = matmul3(s.U, transpose3(s.V));
  return f_theta_forward(t, f_, F_proj, C, z_, accumulate_weight_grads);
}

namespace {
constexpr char kCkptMagic[4] = {'U', 'P', 'H', 'N'};
constexpr uint32_t kCkptVersion = 1;

void write_mlp_dims(ByteWriter& w, const Mlp& mlp) {
  w.u32(static_cast<uint32_t>(mlp.layers.size()));
  for (const auto& l : mlp.layers) {
    w.u32(static_cast<uint32_t>(l.in));
    w.u32(static_cast<uint32_t>(l.out));
  }
}
void write_mlp_payload(ByteWriter& w, const Mlp& mlp) {
  for (const auto& l : mlp.layers) {
    for (double v : l.w) w.f32(static_cast<float>(v));
    for (double v : l.b) w.f32(static_cast<float>(v));
  }
}
Mlp read_mlp_dims(ByteReader& r) {
  Mlp mlp;
  uint32_t count = r.u32();
  if (count == 0 || count > 64) throw IoError("checkpoint: bad layer count");
  for (uint32_t i = 0; i < count; ++i) {
    LinearLayer l;
    l.in = static_cast<int>(r.u32());
    l.out = static_cast<int>(r.u32());
    if (l.in <= 0 || l.out <= 0 || l.in > 65536 || l.out > 65536)
      throw IoError("checkpoint: bad layer dims");
    mlp.layers.push_back(std::move(l));
  }
  for (size_t i = 0; i + 1 < mlp.layers.size(); ++i)
    if (mlp.layers[i].out != mlp.layers[i + 1].in)
      throw IoError("checkpoint: layer dims do not chain");
  return mlp;
}
void read_mlp_payload(ByteReader& r, Mlp& mlp) {
  for (auto& l : mlp.layers) {
    l.w.resize(static_cast<size_t>(l.in) * l.out);
    l.b.resize(l.out);
    for (double& v : l.w) v = r.f32();
    for (double& v : l.b) v = r.f32();
  }
}
}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  ByteWriter w;
  w.bytes(kCkptMagic, 4);
  w.u32(kCkptVersion);
  w.u64(ckpt.epoch);
  w.u64(ckpt.adam_step_weights);
  w.u64(ckpt.adam_step_latents);
  write_mlp_dims(w, ckpt.weights.g_phi);
  write_mlp_dims(w, ckpt.weights.f_theta);
  w.u32(static_cast<uint32_t>(ckpt.codebook.size()));
  for (const auto& [id, z] : ckpt.codebook) {
    w.u64(id);
    for (double v : z.z) w.f32(static_cast<float>(v));
  }
  write_mlp_payload(w, ckpt.weights.g_phi);
  write_mlp_payload(w, ckpt.weights.f_theta);
  write_file_bytes(path, w.buf);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::vector<uint8_t> bytes = read_file_bytes(path);
  ByteReader r{bytes};
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCkptMagic, 4) != 0)
    throw BadMagicError("'" + path + "' is not a checkpoint file");
  uint32_t version = r.u32();
  if (version != kCkptVersion)
    throw BadVersionError("checkpoint version " + std::to_string(version) + " unsupported");
  Checkpoint ckpt;
  ckpt.epoch = r.u64();
  ckpt.adam_step_weights = r.u64();
  ckpt.adam_step_latents = r.u64();
  ckpt.weights.g_phi = read_mlp_dims(r);
  ckpt.weights.f_theta = read_mlp_dims(r);
  uint32_t nz = r.u32();
  for (uint32_t i = 0; i < nz; ++i) {
    uint64_t id = r.u64();
    Latent z;
    for (double& v : z.z) v = r.f32();
    ckpt.codebook.emplace_back(id, z);
  }
  read_mlp_payload(r, ckpt.weights.g_phi);
  read_mlp_payload(r, ckpt.weights.f_theta);
  return ckpt;
}

}  // namespace uniphy
