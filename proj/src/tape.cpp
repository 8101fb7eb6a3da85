#include "uniphy/tape.hpp"

#include <cmath>
#include <cstring>

#include "uniphy/errors.hpp"

namespace uniphy {

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_derivative(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Tape& scratch_tape() {
  thread_local Tape tape;
  return tape;
}

Mat3 svd3_vjp(const Svd3& s, const Mat3& u_bar, const Vec3& sigma_bar, const Mat3& v_bar,
              double eps_gap) {
  const Mat3 g = matmul3(transpose3(s.U), u_bar);  // U^T dL/dU
  const Mat3 h = matmul3(transpose3(s.V), v_bar);  // V^T dL/dV
  const Vec3& sg = s.sigma;
  Mat3 q;
  q(0, 0) = sigma_bar.x;
  q(1, 1) = sigma_bar.y;
  q(2, 2) = sigma_bar.z;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      double denom = sg[j] * sg[j] - sg[i] * sg[i];
      denom = denom >= 0.0 ? denom + eps_gap : denom - eps_gap;
      q(i, j) = (sg[j] * (g(i, j) - g(j, i)) + sg[i] * (h(i, j) - h(j, i))) / denom;
    }
  }
  return matmul3(matmul3(s.U, q), transpose3(s.V));
}

void Tape::reset(size_t mark) {
  // Only meaningful in forward-only mode: recorded ops would dangle.
  val_.resize(mark);
}

void Tape::clear() {
  val_.clear();
  adj_.clear();
  ops_.clear();
  aux_.clear();
}

int32_t Tape::alloc(int32_t n) {
  int32_t at = static_cast<int32_t>(val_.size());
  val_.resize(val_.size() + n);
  return at;
}

Sc Tape::leaf(double v) {
  int32_t at = alloc(1);
  val_[at] = v;
  return Sc{at};
}
V3h Tape::leaf(const Vec3& v) {
  int32_t at = alloc(3);
  val_[at] = v.x;
  val_[at + 1] = v.y;
  val_[at + 2] = v.z;
  return V3h{at};
}
M3h Tape::leaf(const Mat3& m) {
  int32_t at = alloc(9);
  std::memcpy(val_.data() + at, m.m.data(), 9 * sizeof(double));
  return M3h{at};
}
Vh Tape::leaf_vec(std::span<const double> v) {
  int32_t at = alloc(static_cast<int32_t>(v.size()));
  std::memcpy(val_.data() + at, v.data(), v.size() * sizeof(double));
  return Vh{at, static_cast<int32_t>(v.size())};
}
Vh Tape::alloc_zeros(int32_t n) {
  int32_t at = alloc(n);
  std::memset(val_.data() + at, 0, n * sizeof(double));
  return Vh{at, n};
}

Mat3 Tape::val(M3h h) const {
  Mat3 m;
  std::memcpy(m.m.data(), val_.data() + h.i, 9 * sizeof(double));
  return m;
}
Mat3 Tape::adj(M3h h) const {
  Mat3 m;
  std::memcpy(m.m.data(), adj_.data() + h.i, 9 * sizeof(double));
  return m;
}

int32_t Tape::nary(OpCode code, int32_t n, int32_t a, int32_t b) {
  int32_t out = alloc(code == OpCode::kMatMul || code == OpCode::kMatMulTA ||
                              code == OpCode::kMatMulTB || code == OpCode::kOuter3
                          ? 9
                          : (code == OpCode::kMatVec ? 3
                                                     : (code == OpCode::kDot ? 1 : n)));
  const double* pa = val_.data() + a;
  const double* pb = val_.data() + b;
  double* po = val_.data() + out;
  switch (code) {
    case OpCode::kAddN:
      for (int k = 0; k < n; ++k) po[k] = pa[k] + pb[k];
      break;
    case OpCode::kSubN:
      for (int k = 0; k < n; ++k) po[k] = pa[k] - pb[k];
      break;
    case OpCode::kMulN:
      for (int k = 0; k < n; ++k) po[k] = pa[k] * pb[k];
      break;
    case OpCode::kDot: {
      double acc = 0;
      for (int k = 0; k < n; ++k) acc += pa[k] * pb[k];
      po[0] = acc;
      break;
    }
    case OpCode::kMatMul:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          po[i * 3 + j] =
              pa[i * 3] * pb[j] + pa[i * 3 + 1] * pb[3 + j] + pa[i * 3 + 2] * pb[6 + j];
      break;
    case OpCode::kMatMulTA:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          po[i * 3 + j] = pa[i] * pb[j] + pa[3 + i] * pb[3 + j] + pa[6 + i] * pb[6 + j];
      break;
    case OpCode::kMatMulTB:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          po[i * 3 + j] = pa[i * 3] * pb[j * 3] + pa[i * 3 + 1] * pb[j * 3 + 1] +
                          pa[i * 3 + 2] * pb[j * 3 + 2];
      break;
    case OpCode::kMatVec:
      for (int i = 0; i < 3; ++i)
        po[i] = pa[i * 3] * pb[0] + pa[i * 3 + 1] * pb[1] + pa[i * 3 + 2] * pb[2];
      break;
    case OpCode::kOuter3:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) po[i * 3 + j] = pa[i] * pb[j];
      break;
    default:
      throw Error("tape: bad nary opcode");
  }
  Op op;
  op.code = code;
  op.out = out;
  op.a = a;
  op.b = b;
  op.n = n;
  push(op);
  return out;
}

int32_t Tape::nary_imm(OpCode code, int32_t n, int32_t a, int32_t b, double imm0) {
  int32_t out = alloc(n);
  const double* pa = val_.data() + a;
  const double* pb = val_.data() + b;
  double* po = val_.data() + out;
  switch (code) {
    case OpCode::kAxpyC:
      for (int k = 0; k < n; ++k) po[k] = pa[k] + imm0 * pb[k];
      break;
    case OpCode::kAxpyS: {
      double s = pb[0];
      for (int k = 0; k < n; ++k) po[k] = pa[k] + imm0 * s;
      break;
    }
    default:
      throw Error("tape: bad nary_imm opcode");
  }
  Op op;
  op.code = code;
  op.out = out;
  op.a = a;
  op.b = b;
  op.n = n;
  op.imm[0] = imm0;
  push(op);
  return out;
}

int32_t Tape::unary_imm(OpCode code, int32_t n, int32_t a, double imm0) {
  int32_t outn = n;
  if (code == OpCode::kDet3 || code == OpCode::kTrace3) outn = 1;
  if (code == OpCode::kDiag3 || code == OpCode::kIdPlusScale) outn = 9;
  int32_t out = alloc(outn);
  const double* pa = val_.data() + a;
  double* po = val_.data() + out;
  switch (code) {
    case OpCode::kScaleC:
      for (int k = 0; k < n; ++k) po[k] = imm0 * pa[k];
      break;
    case OpCode::kAddConst:
      for (int k = 0; k < n; ++k) po[k] = pa[k] + imm0;
      break;
    case OpCode::kExpN:
      for (int k = 0; k < n; ++k) po[k] = std::exp(pa[k]);
      break;
    case OpCode::kLogClampN:
      for (int k = 0; k < n; ++k) po[k] = std::log(pa[k] < imm0 ? imm0 : pa[k]);
      break;
    case OpCode::kMaxConst:
      for (int k = 0; k < n; ++k) po[k] = pa[k] > imm0 ? pa[k] : imm0;
      break;
    case OpCode::kTranspose3:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) po[i * 3 + j] = pa[j * 3 + i];
      break;
    case OpCode::kDet3: {
      Mat3 m;
      std::memcpy(m.m.data(), pa, 9 * sizeof(double));
      po[0] = det3(m);
      break;
    }
    case OpCode::kTrace3:
      po[0] = pa[0] + pa[4] + pa[8];
      break;
    case OpCode::kSym3:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) po[i * 3 + j] = 0.5 * (pa[i * 3 + j] + pa[j * 3 + i]);
      break;
    case OpCode::kDiag3:
      std::memset(po, 0, 9 * sizeof(double));
      po[0] = pa[0];
      po[4] = pa[1];
      po[8] = pa[2];
      break;
    case OpCode::kIdPlusScale:
      for (int k = 0; k < 9; ++k) po[k] = imm0 * pa[k];
      po[0] += 1.0;
      po[4] += 1.0;
      po[8] += 1.0;
      break;
    default:
      throw Error("tape: bad unary opcode");
  }
  Op op;
  op.code = code;
  op.out = out;
  op.a = a;
  op.n = n;
  op.imm[0] = imm0;
  push(op);
  return out;
}

int32_t Tape::mul_sv(int32_t n, int32_t a, Sc s) {
  int32_t out = alloc(n);
  double sv = val_[s.i];
  const double* pa = val_.data() + a;
  double* po = val_.data() + out;
  for (int k = 0; k < n; ++k) po[k] = sv * pa[k];
  Op op;
  op.code = OpCode::kMulSV;
  op.out = out;
  op.a = a;
  op.b = s.i;
  op.n = n;
  push(op);
  return out;
}

Sc Tape::div(Sc a, Sc b) {
  int32_t out = alloc(1);
  val_[out] = val_[a.i] / val_[b.i];
  Op op;
  op.code = OpCode::kDiv;
  op.out = out;
  op.a = a.i;
  op.b = b.i;
  op.n = 1;
  push(op);
  return Sc{out};
}

Sc Tape::sqrt_(Sc a) {
  int32_t out = alloc(1);
  val_[out] = std::sqrt(val_[a.i]);
  Op op;
  op.code = OpCode::kSqrt;
  op.out = out;
  op.a = a.i;
  op.n = 1;
  push(op);
  return Sc{out};
}

Sc Tape::cbrt_(Sc a) {
  int32_t out = alloc(1);
  val_[out] = std::cbrt(val_[a.i]);
  Op op;
  op.code = OpCode::kCbrt;
  op.out = out;
  op.a = a.i;
  op.n = 1;
  push(op);
  return Sc{out};
}

Sc Tape::sum(Vh a) {
  int32_t out = alloc(1);
  double acc = 0;
  for (int k = 0; k < a.n; ++k) acc += val_[a.i + k];
  val_[out] = acc;
  Op op;
  op.code = OpCode::kSum;
  op.out = out;
  op.a = a.i;
  op.n = a.n;
  push(op);
  return Sc{out};
}

Sc Tape::dot(Vh a, Vh b) { return Sc{nary(OpCode::kDot, a.n, a.i, b.i)}; }

V3h Tape::clamp(V3h a, double lo, double hi) {
  int32_t out = alloc(3);
  for (int k = 0; k < 3; ++k) {
    double v = val_[a.i + k];
    val_[out + k] = v < lo ? lo : (v > hi ? hi : v);
  }
  Op op;
  op.code = OpCode::kClampC;
  op.out = out;
  op.a = a.i;
  op.n = 3;
  op.imm[0] = lo;
  op.imm[1] = hi;
  push(op);
  return V3h{out};
}

Svd3h Tape::svd(M3h a) {
  Svd3 s = svd3(val(a));
  int32_t out = alloc(21);
  std::memcpy(val_.data() + out, s.U.m.data(), 9 * sizeof(double));
  val_[out + 9] = s.sigma.x;
  val_[out + 10] = s.sigma.y;
  val_[out + 11] = s.sigma.z;
  std::memcpy(val_.data() + out + 12, s.V.m.data(), 9 * sizeof(double));
  Op op;
  op.code = OpCode::kSvd3;
  op.out = out;
  op.a = a.i;
  op.n = 21;
  op.imm[0] = 1e-8;  // gap regularizer
  push(op);
  return Svd3h{M3h{out}, V3h{out + 9}, M3h{out + 12}};
}

void Tape::copy_into(Vh dst, int32_t off, int32_t src_slot, int32_t n) {
  std::memcpy(val_.data() + dst.i + off, val_.data() + src_slot, n * sizeof(double));
  Op op;
  op.code = OpCode::kCopy;
  op.out = dst.i + off;
  op.a = src_slot;
  op.n = n;
  push(op);
}

Vh Tape::gelu(Vh a) {
  int32_t out = alloc(a.n);
  const double* pa = val_.data() + a.i;
  double* po = val_.data() + out;
  for (int k = 0; k < a.n; ++k) po[k] = uniphy::gelu(pa[k]);
  Op op;
  op.code = OpCode::kGelu;
  op.out = out;
  op.a = a.i;
  op.n = a.n;
  push(op);
  return Vh{out, a.n};
}

Vh Tape::linear(const LinearRef& l, Vh x, bool accum_wgrad) {
  int32_t out = alloc(l.out);
  const double* w = val_.data() + l.w;
  const double* b = val_.data() + l.b;
  const double* px = val_.data() + x.i;
  double* po = val_.data() + out;
  for (int i = 0; i < l.out; ++i) {
    const double* row = w + static_cast<size_t>(i) * l.in;
    double acc = b[i];
    for (int j = 0; j < l.in; ++j) acc += row[j] * px[j];
    po[i] = acc;
  }
  Op op;
  op.code = OpCode::kLinear;
  op.flags = accum_wgrad ? 1 : 0;
  op.out = out;
  op.a = x.i;
  op.b = l.w;
  op.c = l.b;
  op.m = l.out;
  op.n = l.in;
  push(op);
  return Vh{out, l.out};
}

void Tape::p2g_scatter(V3h x, V3h v, M3h C, M3h S, const int32_t* node_slots27, double mass,
                       double vol0, double h) {
  const double inv_h = 1.0 / h;
  const double co = 4.0 * inv_h * inv_h;
  const Vec3 xp = val(x);
  const Vec3 vp = val(v);
  const Mat3 cp = val(C);
  const Mat3 sp = val(S);
  int base[3];
  double wgt[3][3];
  for (int d = 0; d < 3; ++d) {
    double fx = xp[d] * inv_h - 0.5;
    base[d] = static_cast<int>(std::floor(fx));
    bspline_weights(xp[d] * inv_h - base[d], wgt[d]);
  }
  const double fcoef = -vol0 * co;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) {
        int32_t ns = node_slots27[(i * 3 + j) * 3 + k];
        double w = wgt[0][i] * wgt[1][j] * wgt[2][k];
        Vec3 dpos{(base[0] + i) * h - xp.x, (base[1] + j) * h - xp.y, (base[2] + k) * h - xp.z};
        Vec3 cd = cp * dpos;
        Vec3 sd = sp * dpos;
        val_[ns] += w * mass;
        for (int r = 0; r < 3; ++r) {
          val_[ns + 1 + r] += w * mass * (vp[r] + cd[r]);
          val_[ns + 4 + r] += w * fcoef * sd[r];
        }
      }
  if (recording_) {
    Op op;
    op.code = OpCode::kP2G;
    op.a = x.i;
    op.b = v.i;
    op.c = C.i;
    op.d = S.i;
    op.imm[0] = mass;
    op.imm[1] = vol0;
    op.imm[2] = h;
    op.aux = static_cast<int32_t>(aux_.size());
    aux_.insert(aux_.end(), node_slots27, node_slots27 + 27);
    ops_.push_back(op);
  }
}

V3h Tape::grid_velocity(int32_t node_slot, double dt, const Vec3& gravity, uint8_t slip_mask) {
  int32_t out = alloc(3);
  double mass = val_[node_slot];
  for (int c = 0; c < 3; ++c) {
    if (slip_mask & (1 << c)) {
      val_[out + c] = 0.0;
    } else {
      val_[out + c] =
          val_[node_slot + 1 + c] / mass + dt * (val_[node_slot + 4 + c] / mass + gravity[c]);
    }
  }
  Op op;
  op.code = OpCode::kGridVel;
  op.flags = slip_mask;
  op.out = out;
  op.a = node_slot;
  op.imm[0] = dt;
  op.imm[1] = gravity.x;
  op.imm[2] = gravity.y;
  op.imm[3] = gravity.z;
  push(op);
  return V3h{out};
}

Tape::G2pOut Tape::g2p_gather(V3h x, const int32_t* vel_slots27, double h) {
  const double inv_h = 1.0 / h;
  const double co = 4.0 * inv_h * inv_h;
  const Vec3 xp = val(x);
  int32_t out = alloc(12);  // v3 then C9
  int base[3];
  double wgt[3][3];
  for (int d = 0; d < 3; ++d) {
    double fx = xp[d] * inv_h - 0.5;
    base[d] = static_cast<int>(std::floor(fx));
    bspline_weights(xp[d] * inv_h - base[d], wgt[d]);
  }
  double* po = val_.data() + out;
  std::memset(po, 0, 12 * sizeof(double));
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) {
        int32_t vs = vel_slots27[(i * 3 + j) * 3 + k];
        double w = wgt[0][i] * wgt[1][j] * wgt[2][k];
        Vec3 dpos{(base[0] + i) * h - xp.x, (base[1] + j) * h - xp.y, (base[2] + k) * h - xp.z};
        const double* vel = val_.data() + vs;
        for (int r = 0; r < 3; ++r) {
          po[r] += w * vel[r];
          for (int c = 0; c < 3; ++c) po[3 + r * 3 + c] += co * w * vel[r] * dpos[c];
        }
      }
  if (recording_) {
    Op op;
    op.code = OpCode::kG2P;
    op.out = out;
    op.a = x.i;
    op.imm[0] = h;
    op.aux = static_cast<int32_t>(aux_.size());
    aux_.insert(aux_.end(), vel_slots27, vel_slots27 + 27);
    ops_.push_back(op);
  }
  return G2pOut{V3h{out}, M3h{out + 3}};
}

void Tape::zero_adjoints() { adj_.assign(val_.size(), 0.0); }

void Tape::seed(V3h h, const Vec3& g) {
  adj_[h.i] += g.x;
  adj_[h.i + 1] += g.y;
  adj_[h.i + 2] += g.z;
}
void Tape::seed(M3h h, const Mat3& g) {
  for (int k = 0; k < 9; ++k) adj_[h.i + k] += g.m[k];
}

void Tape::run_backward() {
  for (size_t idx = ops_.size(); idx-- > 0;) {
    backward_op(ops_[idx]);
    if (check_adjoints) {
      const Op& op = ops_[idx];
      auto bad = [&](int32_t slot, int32_t len) {
        if (slot < 0) return false;
        for (int32_t k = 0; k < len; ++k)
          if (!std::isfinite(adj_[slot + k])) return true;
        return false;
      };
      int32_t n = op.n > 0 ? op.n : 1;
      if (bad(op.a, op.code == OpCode::kLinear ? op.n : n) ||
          (op.code != OpCode::kLinear && bad(op.b, n)))
        throw DivergenceError("non-finite adjoint", static_cast<long>(idx));
    }
  }
}

void Tape::backward_op(const Op& op) {
  double* adj = adj_.data();
  const double* val = val_.data();
  const double* go = op.out >= 0 ? adj + op.out : nullptr;
  switch (op.code) {
    case OpCode::kAddN:
      for (int k = 0; k < op.n; ++k) {
        adj[op.a + k] += go[k];
        adj[op.b + k] += go[k];
      }
      break;
    case OpCode::kSubN:
      for (int k = 0; k < op.n; ++k) {
        adj[op.a + k] += go[k];
        adj[op.b + k] -= go[k];
      }
      break;
    case OpCode::kMulN:
      for (int k = 0; k < op.n; ++k) {
        adj[op.a + k] += go[k] * val[op.b + k];
        adj[op.b + k] += go[k] * val[op.a + k];
      }
      break;
    case OpCode::kDiv: {
      double b = val[op.b];
      adj[op.a] += go[0] / b;
      adj[op.b] -= go[0] * val[op.out] / b;
      break;
    }
    case OpCode::kScaleC:
      for (int k = 0; k < op.n; ++k) adj[op.a + k] += op.imm[0] * go[k];
      break;
    case OpCode::kAddConst:
      for (int k = 0; k < op.n; ++k) adj[op.a + k] += go[k];
      break;
    case OpCode::kAxpyC:
      for (int k = 0; k < op.n; ++k) {
        adj[op.a + k] += go[k];
        adj[op.b + k] += op.imm[0] * go[k];
      }
      break;
    case OpCode::kAxpyS: {
      double acc = 0;
      for (int k = 0; k < op.n; ++k) {
        adj[op.a + k] += go[k];
        acc += go[k];
      }
      adj[op.b] += op.imm[0] * acc;
      break;
    }
    case OpCode::kMulSV: {
      double s = val[op.b];
      double acc = 0;
      for (int k = 0; k < op.n; ++k) {
        adj[op.a + k] += s * go[k];
        acc += go[k] * val[op.a + k];
      }
      adj[op.b] += acc;
      break;
    }
    case OpCode::kCopy:
      for (int k = 0; k < op.n; ++k) adj[op.a + k] += go[k];
      break;
    case OpCode::kSum:
      for (int k = 0; k < op.n; ++k) adj[op.a + k] += go[0];
      break;
    case OpCode::kDot:
      for (int k = 0; k < op.n; ++k) {
        adj[op.a + k] += go[0] * val[op.b + k];
        adj[op.b + k] += go[0] * val[op.a + k];
      }
      break;
    case OpCode::kExpN:
      for (int k = 0; k < op.n; ++k) adj[op.a + k] += go[k] * val[op.out + k];
      break;
    case OpCode::kLogClampN:
      for (int k = 0; k < op.n; ++k)
        if (val[op.a + k] > op.imm[0]) adj[op.a + k] += go[k] / val[op.a + k];
      break;
    case OpCode::kMaxConst:
      for (int k = 0; k < op.n; ++k)
        if (val[op.a + k] > op.imm[0]) adj[op.a + k] += go[k];
      break;
    case OpCode::kClampC:
      for (int k = 0; k < op.n; ++k) {
        double v = val[op.a + k];
        if (v > op.imm[0] && v < op.imm[1]) adj[op.a + k] += go[k];
      }
      break;
    case OpCode::kSqrt: {
      double o = val[op.out];
      if (o > 0.0) adj[op.a] += go[0] / (2.0 * o);
      break;
    }
    case OpCode::kCbrt: {
      double o = val[op.out];
      if (o != 0.0) adj[op.a] += go[0] / (3.0 * o * o);
      break;
    }
    case OpCode::kGelu:
      for (int k = 0; k < op.n; ++k) adj[op.a + k] += go[k] * gelu_derivative(val[op.a + k]);
      break;
    case OpCode::kMatMul:
      // C = A B: dA += dC B^T, dB += A^T dC
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double g = go[i * 3 + j];
          for (int k = 0; k < 3; ++k) {
            adj[op.a + i * 3 + k] += g * val[op.b + k * 3 + j];
            adj[op.b + k * 3 + j] += val[op.a + i * 3 + k] * g;
          }
        }
      break;
    case OpCode::kMatMulTA:
      // C = A^T B: dA += B dC^T, dB += A dC
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double g = go[i * 3 + j];
          for (int k = 0; k < 3; ++k) {
            adj[op.a + k * 3 + i] += val[op.b + k * 3 + j] * g;
            adj[op.b + k * 3 + j] += val[op.a + k * 3 + i] * g;
          }
        }
      break;
    case OpCode::kMatMulTB:
      // C = A B^T: dA += dC B, dB += dC^T A
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double g = go[i * 3 + j];
          for (int k = 0; k < 3; ++k) {
            adj[op.a + i * 3 + k] += g * val[op.b + j * 3 + k];
            adj[op.b + j * 3 + k] += g * val[op.a + i * 3 + k];
          }
        }
      break;
    case OpCode::kMatVec:
      for (int i = 0; i < 3; ++i) {
        double g = go[i];
        for (int k = 0; k < 3; ++k) {
          adj[op.a + i * 3 + k] += g * val[op.b + k];
          adj[op.b + k] += val[op.a + i * 3 + k] * g;
        }
      }
      break;
    case OpCode::kOuter3:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double g = go[i * 3 + j];
          adj[op.a + i] += g * val[op.b + j];
          adj[op.b + j] += g * val[op.a + i];
        }
      break;
    case OpCode::kTranspose3:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) adj[op.a + j * 3 + i] += go[i * 3 + j];
      break;
    case OpCode::kDet3: {
      Mat3 m;
      std::memcpy(m.m.data(), val + op.a, 9 * sizeof(double));
      Mat3 cof = cofactor3(m);
      for (int k = 0; k < 9; ++k) adj[op.a + k] += go[0] * cof.m[k];
      break;
    }
    case OpCode::kTrace3:
      adj[op.a] += go[0];
      adj[op.a + 4] += go[0];
      adj[op.a + 8] += go[0];
      break;
    case OpCode::kSym3:
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          adj[op.a + i * 3 + j] += 0.5 * (go[i * 3 + j] + go[j * 3 + i]);
      break;
    case OpCode::kDiag3:
      adj[op.a] += go[0];
      adj[op.a + 1] += go[4];
      adj[op.a + 2] += go[8];
      break;
    case OpCode::kIdPlusScale:
      for (int k = 0; k < 9; ++k) adj[op.a + k] += op.imm[0] * go[k];
      break;
    case OpCode::kSvd3: {
      Svd3 s;
      std::memcpy(s.U.m.data(), val + op.out, 9 * sizeof(double));
      s.sigma = {val[op.out + 9], val[op.out + 10], val[op.out + 11]};
      std::memcpy(s.V.m.data(), val + op.out + 12, 9 * sizeof(double));
      Mat3 ub, vb;
      std::memcpy(ub.m.data(), go, 9 * sizeof(double));
      Vec3 sb{go[9], go[10], go[11]};
      std::memcpy(vb.m.data(), go + 12, 9 * sizeof(double));
      Mat3 mb = svd3_vjp(s, ub, sb, vb, op.imm[0]);
      for (int k = 0; k < 9; ++k) adj[op.a + k] += mb.m[k];
      break;
    }
    case OpCode::kLinear: {
      const double* w = val + op.b;
      const double* x = val + op.a;
      double* gx = adj + op.a;
      for (int i = 0; i < op.m; ++i) {
        double g = go[i];
        const double* row = w + static_cast<size_t>(i) * op.n;
        for (int j = 0; j < op.n; ++j) gx[j] += row[j] * g;
      }
      if (op.flags & 1) {
        double* gw = adj + op.b;
        double* gb = adj + op.c;
        for (int i = 0; i < op.m; ++i) {
          double g = go[i];
          double* grow = gw + static_cast<size_t>(i) * op.n;
          for (int j = 0; j < op.n; ++j) grow[j] += g * x[j];
          gb[i] += g;
        }
      }
      break;
    }
    case OpCode::kGridVel: {
      double mass = val[op.a];
      double inv_m = 1.0 / mass;
      for (int c = 0; c < 3; ++c) {
        if (op.flags & (1 << c)) continue;
        double g = go[c];
        adj[op.a + 1 + c] += g * inv_m;
        adj[op.a + 4 + c] += op.imm[0] * g * inv_m;
        adj[op.a] -= g * (val[op.a + 1 + c] + op.imm[0] * val[op.a + 4 + c]) * inv_m * inv_m;
      }
      break;
    }
    case OpCode::kP2G: {
      const double mass = op.imm[0], vol0 = op.imm[1], h = op.imm[2];
      const double inv_h = 1.0 / h;
      const double co = 4.0 * inv_h * inv_h;
      const double fcoef = -vol0 * co;
      Vec3 xp{val[op.a], val[op.a + 1], val[op.a + 2]};
      Vec3 vp{val[op.b], val[op.b + 1], val[op.b + 2]};
      Mat3 cp, sp;
      std::memcpy(cp.m.data(), val + op.c, 9 * sizeof(double));
      std::memcpy(sp.m.data(), val + op.d, 9 * sizeof(double));
      int base[3];
      double wgt[3][3], dwgt[3][3];
      for (int d = 0; d < 3; ++d) {
        double fx = xp[d] * inv_h - 0.5;
        base[d] = static_cast<int>(std::floor(fx));
        double f = xp[d] * inv_h - base[d];
        bspline_weights(f, wgt[d]);
        bspline_weight_derivs(f, dwgt[d]);
      }
      const int32_t* slots = aux_.data() + op.aux;
      Vec3 gx{}, gv{};
      Mat3 gC{}, gS{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k) {
            int32_t ns = slots[(i * 3 + j) * 3 + k];
            double w = wgt[0][i] * wgt[1][j] * wgt[2][k];
            Vec3 dpos{(base[0] + i) * h - xp.x, (base[1] + j) * h - xp.y,
                      (base[2] + k) * h - xp.z};
            Vec3 cd = cp * dpos;
            Vec3 sd = sp * dpos;
            double ga = adj[ns];
            Vec3 gm{adj[ns + 1], adj[ns + 2], adj[ns + 3]};
            Vec3 gf{adj[ns + 4], adj[ns + 5], adj[ns + 6]};
            double s_node = mass * ga;
            for (int r = 0; r < 3; ++r) {
              gv[r] += w * mass * gm[r];
              s_node += gm[r] * mass * (vp[r] + cd[r]) + gf[r] * fcoef * sd[r];
              for (int c = 0; c < 3; ++c) {
                gC(r, c) += w * mass * gm[r] * dpos[c];
                gS(r, c) += fcoef * w * gf[r] * dpos[c];
              }
            }
            for (int c = 0; c < 3; ++c) {
              double dsum = 0;
              for (int r = 0; r < 3; ++r) dsum += gm[r] * mass * cp(r, c) + gf[r] * fcoef * sp(r, c);
              gx[c] -= w * dsum;
            }
            gx.x += s_node * dwgt[0][i] * wgt[1][j] * wgt[2][k] * inv_h;
            gx.y += s_node * wgt[0][i] * dwgt[1][j] * wgt[2][k] * inv_h;
            gx.z += s_node * wgt[0][i] * wgt[1][j] * dwgt[2][k] * inv_h;
          }
      for (int c = 0; c < 3; ++c) {
        adj[op.a + c] += gx[c];
        adj[op.b + c] += gv[c];
      }
      for (int k = 0; k < 9; ++k) {
        adj[op.c + k] += gC.m[k];
        adj[op.d + k] += gS.m[k];
      }
      break;
    }
    case OpCode::kG2P: {
      const double h = op.imm[0];
      const double inv_h = 1.0 / h;
      const double co = 4.0 * inv_h * inv_h;
      Vec3 xp{val[op.a], val[op.a + 1], val[op.a + 2]};
      int base[3];
      double wgt[3][3], dwgt[3][3];
      for (int d = 0; d < 3; ++d) {
        double fx = xp[d] * inv_h - 0.5;
        base[d] = static_cast<int>(std::floor(fx));
        double f = xp[d] * inv_h - base[d];
        bspline_weights(f, wgt[d]);
        bspline_weight_derivs(f, dwgt[d]);
      }
      const int32_t* slots = aux_.data() + op.aux;
      const double* gv = go;       // adjoint of v3
      const double* gC = go + 3;   // adjoint of C9
      Vec3 gx{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k) {
            int32_t vs = slots[(i * 3 + j) * 3 + k];
            double w = wgt[0][i] * wgt[1][j] * wgt[2][k];
            Vec3 dpos{(base[0] + i) * h - xp.x, (base[1] + j) * h - xp.y,
                      (base[2] + k) * h - xp.z};
            const double* vel = val + vs;
            double s_node = 0;
            for (int r = 0; r < 3; ++r) {
              double gcd = gC[r * 3] * dpos.x + gC[r * 3 + 1] * dpos.y + gC[r * 3 + 2] * dpos.z;
              adj_[vs + r] += w * gv[r] + co * w * gcd;
              s_node += gv[r] * vel[r] + co * gcd * vel[r];
            }
            for (int c = 0; c < 3; ++c) {
              double acc = 0;
              for (int r = 0; r < 3; ++r) acc += gC[r * 3 + c] * vel[r];
              gx[c] -= co * w * acc;
            }
            gx.x += s_node * dwgt[0][i] * wgt[1][j] * wgt[2][k] * inv_h;
            gx.y += s_node * wgt[0][i] * dwgt[1][j] * wgt[2][k] * inv_h;
            gx.z += s_node * wgt[0][i] * wgt[1][j] * dwgt[2][k] * inv_h;
          }
      for (int c = 0; c < 3; ++c) adj[op.a + c] += gx[c];
      break;
    }
  }
}

GradReport Tape::grad(Sc loss, std::span<const ParamGroup> groups) {
  zero_adjoints();
  seed(loss, 1.0);
  run_backward();
  GradReport report;
  report.loss = val(loss);
  for (const auto& g : groups) {
    GradGroup out;
    out.name = g.name;
    out.grad.assign(adj_.begin() + g.slot, adj_.begin() + g.slot + g.n);
    for (double v : out.grad) {
      if (!std::isfinite(v)) report.all_finite = false;
      report.max_abs = std::max(report.max_abs, std::abs(v));
    }
    report.groups.push_back(std::move(out));
  }
  return report;
}

}  // namespace uniphy
