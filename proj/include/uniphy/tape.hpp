#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uniphy/tensor3.hpp"

namespace uniphy {

// Slot handles. A handle is an index into the tape's value arena; fixed-size
// aggregates occupy consecutive slots (Vec3: 3, Mat3: 9 row-major), so a
// contiguous sub-range of a vector handle is itself a valid handle (views are
// free, no copy op needed).
struct Sc {
  int32_t i = -1;
};
struct V3h {
  int32_t i = -1;
};
struct M3h {
  int32_t i = -1;
};
struct Vh {
  int32_t i = -1;
  int32_t n = 0;
};
struct Svd3h {
  M3h U;
  V3h sigma;
  M3h V;
};

enum class OpCode : uint8_t {
  kAddN,        // out[k] = A[k] + B[k]
  kSubN,        // out[k] = A[k] - B[k]
  kMulN,        // out[k] = A[k] * B[k]
  kDiv,         // out = A / B (scalars)
  kScaleC,      // out[k] = imm0 * A[k]
  kAddConst,    // out = A + imm0 (scalar)
  kAxpyC,       // out[k] = A[k] + imm0 * B[k]
  kAxpyS,       // out[k] = A[k] + imm0 * s   (s scalar slot, broadcast)
  kMulSV,       // out[k] = s * A[k]          (s scalar slot)
  kCopy,        // out[k] = A[k]              (feature packing)
  kSum,         // out = sum A[0..n)
  kDot,         // out = A . B over n entries
  kExpN,        // out[k] = exp(A[k])
  kLogClampN,   // out[k] = log(max(A[k], imm0))
  kMaxConst,    // out[k] = max(A[k], imm0)
  kClampC,      // out[k] = min(max(A[k], imm0), imm1)
  kSqrt,        // out = sqrt(A) (scalar)
  kCbrt,        // out = cbrt(A) (scalar)
  kGelu,        // out[k] = gelu(A[k])
  kMatMul,      // out9 = A9 B9
  kMatMulTA,    // out9 = A9^T B9
  kMatMulTB,    // out9 = A9 B9^T
  kMatVec,      // out3 = A9 * B3
  kOuter3,      // out9 = A3 B3^T
  kTranspose3,  // out9 = A9^T
  kDet3,        // out1 = det(A9)
  kTrace3,      // out1 = tr(A9)
  kSym3,        // out9 = (A9 + A9^T) / 2
  kDiag3,       // out9 = diag(A3)
  kIdPlusScale, // out9 = I + imm0 * A9
  kSvd3,        // out21 = [U9, sigma3, V9] of A9; imm0 = gap regularizer
  kLinear,      // out[m] = W[m*n] x[n] + b[m]; a = x, b = W, c = bias
  kGridVel,     // out3 = mask*(mom/mass + imm0*(frc/mass + g)); a = node block
  kP2G,         // scatter mass/momentum/force into 27 node blocks (aux slots)
  kG2P,         // gather v3 + C9 from 27 node velocity slots (aux slots)
};

struct Op {
  OpCode code;
  uint8_t flags = 0;  // kLinear: bit0 = accumulate weight/bias grads
                      // kGridVel: bits 0..2 zero the x/y/z component (walls)
  int32_t out = -1;
  int32_t a = -1, b = -1, c = -1, d = -1;
  int32_t m = 0, n = 0;
  int32_t aux = -1;
  double imm[4] = {0, 0, 0, 0};
};

// Per-parameter-group gradients extracted after a backward pass.
struct GradGroup {
  std::string name;
  std::vector<double> grad;
};
struct GradReport {
  std::vector<GradGroup> groups;
  bool all_finite = true;
  double max_abs = 0.0;
  double loss = 0.0;
  const std::vector<double>* find(const std::string& name) const {
    for (const auto& g : groups)
      if (g.name == name) return &g.grad;
    return nullptr;
  }
};
struct ParamGroup {
  std::string name;
  int32_t slot = -1;
  int32_t n = 0;
};

// Reverse-mode tape over a flat arena of double slots. Every builder call
// computes the forward value immediately; when recording is on it also
// appends the op for the backward pass. With recording off the tape doubles
// as the plain (forward-only) execution engine, so simulator and network
// math is written once against this interface.
class Tape {
 public:
  Tape() = default;

  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  // Arena stack discipline for forward-only reuse.
  size_t mark() const { return val_.size(); }
  void reset(size_t mark);
  void clear();

  size_t size() const { return val_.size(); }
  size_t op_count() const { return ops_.size(); }

  // ---- Leaves -------------------------------------------------------------
  Sc leaf(double v);
  V3h leaf(const Vec3& v);
  M3h leaf(const Mat3& m);
  Vh leaf_vec(std::span<const double> v);
  Vh alloc_zeros(int32_t n);

  // ---- Reads --------------------------------------------------------------
  double val(Sc h) const { return val_[h.i]; }
  Vec3 val(V3h h) const { return {val_[h.i], val_[h.i + 1], val_[h.i + 2]}; }
  Mat3 val(M3h h) const;
  std::span<const double> val(Vh h) const { return {val_.data() + h.i, size_t(h.n)}; }
  std::span<const double> raw_values() const { return val_; }

  // ---- Scalar ops ----------------------------------------------------------
  Sc add(Sc a, Sc b) { return Sc{nary(OpCode::kAddN, 1, a.i, b.i)}; }
  Sc sub(Sc a, Sc b) { return Sc{nary(OpCode::kSubN, 1, a.i, b.i)}; }
  Sc mul(Sc a, Sc b) { return Sc{nary(OpCode::kMulN, 1, a.i, b.i)}; }
  Sc div(Sc a, Sc b);
  Sc scale(Sc a, double c) { return Sc{unary_imm(OpCode::kScaleC, 1, a.i, c)}; }
  Sc add_const(Sc a, double c) { return Sc{unary_imm(OpCode::kAddConst, 1, a.i, c)}; }
  Sc exp(Sc a) { return Sc{unary_imm(OpCode::kExpN, 1, a.i, 0)}; }
  Sc log_clamped(Sc a, double floor) { return Sc{unary_imm(OpCode::kLogClampN, 1, a.i, floor)}; }
  Sc max_const(Sc a, double c) { return Sc{unary_imm(OpCode::kMaxConst, 1, a.i, c)}; }
  Sc sqrt_(Sc a);
  Sc cbrt_(Sc a);
  Sc sum(Vh a);
  Sc dot(Vh a, Vh b);
  Sc dot(V3h a, V3h b) { return dot(Vh{a.i, 3}, Vh{b.i, 3}); }

  // ---- Vec3 ops -----------------------------------------------------------
  V3h add(V3h a, V3h b) { return V3h{nary(OpCode::kAddN, 3, a.i, b.i)}; }
  V3h sub(V3h a, V3h b) { return V3h{nary(OpCode::kSubN, 3, a.i, b.i)}; }
  V3h scale(V3h a, double c) { return V3h{unary_imm(OpCode::kScaleC, 3, a.i, c)}; }
  V3h scale(V3h a, Sc s) { return V3h{mul_sv(3, a.i, s)}; }
  V3h axpy(V3h a, double c, V3h b) { return V3h{nary_imm(OpCode::kAxpyC, 3, a.i, b.i, c)}; }
  V3h axpy_bcast(V3h a, double c, Sc s) { return V3h{nary_imm(OpCode::kAxpyS, 3, a.i, s.i, c)}; }
  V3h exp(V3h a) { return V3h{unary_imm(OpCode::kExpN, 3, a.i, 0)}; }
  V3h log_clamped(V3h a, double floor) { return V3h{unary_imm(OpCode::kLogClampN, 3, a.i, floor)}; }
  V3h clamp(V3h a, double lo, double hi);

  // ---- Mat3 ops -----------------------------------------------------------
  M3h add(M3h a, M3h b) { return M3h{nary(OpCode::kAddN, 9, a.i, b.i)}; }
  M3h sub(M3h a, M3h b) { return M3h{nary(OpCode::kSubN, 9, a.i, b.i)}; }
  M3h scale(M3h a, double c) { return M3h{unary_imm(OpCode::kScaleC, 9, a.i, c)}; }
  M3h scale(M3h a, Sc s) { return M3h{mul_sv(9, a.i, s)}; }
  M3h axpy(M3h a, double c, M3h b) { return M3h{nary_imm(OpCode::kAxpyC, 9, a.i, b.i, c)}; }
  M3h matmul(M3h a, M3h b) { return M3h{nary(OpCode::kMatMul, 9, a.i, b.i)}; }
  M3h matmul_ta(M3h a, M3h b) { return M3h{nary(OpCode::kMatMulTA, 9, a.i, b.i)}; }
  M3h matmul_tb(M3h a, M3h b) { return M3h{nary(OpCode::kMatMulTB, 9, a.i, b.i)}; }
  V3h matvec(M3h a, V3h v) { return V3h{nary(OpCode::kMatVec, 3, a.i, v.i)}; }
  M3h outer(V3h a, V3h b) { return M3h{nary(OpCode::kOuter3, 9, a.i, b.i)}; }
  M3h transpose(M3h a) { return M3h{unary_imm(OpCode::kTranspose3, 9, a.i, 0)}; }
  Sc det(M3h a) { return Sc{unary_imm(OpCode::kDet3, 1, a.i, 0)}; }
  Sc trace(M3h a) { return Sc{unary_imm(OpCode::kTrace3, 1, a.i, 0)}; }
  M3h symmetrize(M3h a) { return M3h{unary_imm(OpCode::kSym3, 9, a.i, 0)}; }
  M3h diag(V3h a) { return M3h{unary_imm(OpCode::kDiag3, 9, a.i, 0)}; }
  M3h id_plus_scale(double c, M3h a) { return M3h{unary_imm(OpCode::kIdPlusScale, 9, a.i, c)}; }
  Svd3h svd(M3h a);

  // ---- Vectors / networks ---------------------------------------------------
  Vh alloc_vec(int32_t n) { return alloc_zeros(n); }
  void copy_into(Vh dst, int32_t off, int32_t src_slot, int32_t n);
  Vh gelu(Vh a);
  struct LinearRef {
    int32_t w = -1, b = -1;
    int32_t in = 0, out = 0;
  };
  Vh linear(const LinearRef& l, Vh x, bool accum_wgrad);

  // ---- MPM transfer ops -----------------------------------------------------
  // Scatters particle mass, APIC momentum and the stress force term into the
  // 27 neighboring node blocks ([mass, mom3, frc3], slot bases in node_slots).
  void p2g_scatter(V3h x, V3h v, M3h C, M3h S, const int32_t* node_slots27,
                   double mass, double vol0, double h);
  // out3 = mask*(mom/mass + dt*(frc/mass + g)) for one node block.
  V3h grid_velocity(int32_t node_slot, double dt, const Vec3& gravity, uint8_t slip_mask);
  struct G2pOut {
    V3h v;
    M3h C;
  };
  G2pOut g2p_gather(V3h x, const int32_t* vel_slots27, double h);

  // ---- Backward -------------------------------------------------------------
  void zero_adjoints();
  void seed(Sc h, double g) { adj_[h.i] += g; }
  void seed(V3h h, const Vec3& g);
  void seed(M3h h, const Mat3& g);
  void run_backward();  // reverse sweep over all recorded ops
  bool check_adjoints = false;  // per-op NaN detection (DivergenceError)

  double adj(int32_t slot) const { return adj_[slot]; }
  double adj(Sc h) const { return adj_[h.i]; }
  Vec3 adj(V3h h) const { return {adj_[h.i], adj_[h.i + 1], adj_[h.i + 2]}; }
  Mat3 adj(M3h h) const;
  std::span<const double> adj(Vh h) const { return {adj_.data() + h.i, size_t(h.n)}; }

  GradReport grad(Sc loss, std::span<const ParamGroup> groups);

 private:
  int32_t alloc(int32_t n);
  int32_t nary(OpCode code, int32_t n, int32_t a, int32_t b);
  int32_t nary_imm(OpCode code, int32_t n, int32_t a, int32_t b, double imm0);
  int32_t unary_imm(OpCode code, int32_t n, int32_t a, double imm0);
  int32_t mul_sv(int32_t n, int32_t a, Sc s);
  void push(const Op& op) {
    if (recording_) ops_.push_back(op);
  }
  void backward_op(const Op& op);

  std::vector<double> val_;
  std::vector<double> adj_;
  std::vector<Op> ops_;
  std::vector<int32_t> aux_;
  bool recording_ = false;
};

// Per-thread scratch tape used by the plain (value in, value out) wrappers.
Tape& scratch_tape();

// The standard SVD vector-Jacobian product with sign-preserving gap
// regularization: 1/(s_i^2 - s_j^2) terms get |gap| floored at eps_gap.
Mat3 svd3_vjp(const Svd3& s, const Mat3& u_bar, const Vec3& sigma_bar, const Mat3& v_bar,
              double eps_gap = 1e-8);

double gelu(double x);
double gelu_derivative(double x);

// Quadratic B-spline weights and d/dfx derivatives for fx in [0.5, 1.5].
inline void bspline_weights(double fx, double w[3]) {
  w[0] = 0.5 * (1.5 - fx) * (1.5 - fx);
  w[1] = 0.75 - (fx - 1.0) * (fx - 1.0);
  w[2] = 0.5 * (fx - 0.5) * (fx - 0.5);
}
inline void bspline_weight_derivs(double fx, double dw[3]) {
  dw[0] = fx - 1.5;
  dw[1] = -2.0 * (fx - 1.0);
  dw[2] = fx - 0.5;
}

}  // namespace uniphy
