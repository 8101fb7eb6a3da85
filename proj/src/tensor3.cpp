#include "uniphy/tensor3.hpp"

#include <algorithm>
#include <cmath>

namespace uniphy {

namespace {

// One cyclic Jacobi pass target: zero out A(p,q), accumulating rotations in V.
inline void jacobi_rotate(Mat3& a, Mat3& v, int p, int q) {
  double apq = a(p, q);
  if (apq == 0.0) return;
  double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
  double t;
  if (tau >= 0.0)
    t = 1.0 / (tau + std::sqrt(1.0 + tau * tau));
  else
    t = -1.0 / (-tau + std::sqrt(1.0 + tau * tau));
  double c = 1.0 / std::sqrt(1.0 + t * t);
  double s = t * c;

  double app = a(p, p), aqq = a(q, q);
  a(p, p) = c * c * app - 2.0 * s * c * apq + s * s * aqq;
  a(q, q) = s * s * app + 2.0 * s * c * apq + c * c * aqq;
  a(p, q) = 0.0;
  a(q, p) = 0.0;
  int r = 3 - p - q;
  double arp = a(r, p), arq = a(r, q);
  a(r, p) = c * arp - s * arq;
  a(p, r) = a(r, p);
  a(r, q) = s * arp + c * arq;
  a(q, r) = a(r, q);

  for (int i = 0; i < 3; ++i) {
    double vip = v(i, p), viq = v(i, q);
    v(i, p) = c * vip - s * viq;
    v(i, q) = s * vip + c * viq;
  }
}

inline double offdiag_norm(const Mat3& a) {
  return std::abs(a(0, 1)) + std::abs(a(0, 2)) + std::abs(a(1, 2));
}

inline Vec3 column(const Mat3& a, int c) { return {a(0, c), a(1, c), a(2, c)}; }
inline void set_column(Mat3& a, int c, const Vec3& v) {
  a(0, c) = v.x;
  a(1, c) = v.y;
  a(2, c) = v.z;
}

inline void swap_columns(Mat3& a, int i, int j) {
  for (int r = 0; r < 3; ++r) std::swap(a(r, i), a(r, j));
}

}  // namespace

Svd3 svd3(const Mat3& m) {
  if (!finite(m)) throw DomainError("svd3: non-finite input matrix");

  Svd3 out;
  out.U = Mat3::identity();
  out.V = Mat3::identity();
  out.sigma = {0, 0, 0};

  double scale = 0.0;
  for (double v : m.m) scale = std::max(scale, std::abs(v));
  if (scale == 0.0) return out;  // zero matrix

  // Eigendecomposition of A = M^T M by cyclic Jacobi sweeps.
  Mat3 a;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      a(i, j) = m(0, i) * m(0, j) + m(1, i) * m(1, j) + m(2, i) * m(2, j);
  Mat3 v = Mat3::identity();
  const double tol = 1e-40 * scale * scale;
  for (int sweep = 0; sweep < 30 && offdiag_norm(a) > tol; ++sweep) {
    jacobi_rotate(a, v, 0, 1);
    jacobi_rotate(a, v, 0, 2);
    jacobi_rotate(a, v, 1, 2);
  }

  // Sort eigenvalues descending, columns along.
  Vec3 lam = {a(0, 0), a(1, 1), a(2, 2)};
  int order[3] = {0, 1, 2};
  for (int i = 0; i < 2; ++i)
    for (int j = i + 1; j < 3; ++j)
      if (lam[order[j]] > lam[order[i]]) std::swap(order[i], order[j]);
  Mat3 vs;
  for (int c = 0; c < 3; ++c) set_column(vs, c, column(v, order[c]));
  // Keep V a proper rotation; a reflection here is pushed into U/sigma below.
  if (det3(vs) < 0.0) {
    for (int r = 0; r < 3; ++r) vs(r, 2) = -vs(r, 2);
  }

  // B = M V has orthogonal columns with norms sigma_i.
  Mat3 b = matmul3(m, vs);
  Vec3 b0 = column(b, 0), b1 = column(b, 1), b2 = column(b, 2);

  double s0 = norm(b0);
  Vec3 u0 = b0 * (1.0 / s0);

  Vec3 u1;
  if (norm(b1) > 1e-12 * s0) {
    u1 = b1 - dot(b1, u0) * u0;
    u1 = u1 * (1.0 / norm(u1));
  } else {
    // Rank-deficient: complete the frame from the axis least aligned with u0.
    int k = std::abs(u0.x) <= std::abs(u0.y)
                ? (std::abs(u0.x) <= std::abs(u0.z) ? 0 : 2)
                : (std::abs(u0.y) <= std::abs(u0.z) ? 1 : 2);
    Vec3 e{0, 0, 0};
    e[k] = 1.0;
    u1 = e - dot(e, u0) * u0;
    u1 = u1 * (1.0 / norm(u1));
  }
  Vec3 u2 = cross(u0, u1);  // right-handed by construction

  double s1 = dot(u1, b1);
  double s2 = dot(u2, b2);  // signed: absorbs an input reflection

  Mat3 u;
  set_column(u, 0, u0);
  set_column(u, 1, u1);
  set_column(u, 2, u2);

  // Rounding can invert the order of near-equal singular values; restore it
  // with pairing-preserving swaps (swap + sign flip keeps rotations proper).
  auto swap_pair = [&](int i, int j, double& si, double& sj) {
    swap_columns(u, i, j);
    swap_columns(vs, i, j);
    for (int r = 0; r < 3; ++r) {
      u(r, i) = -u(r, i);
      vs(r, i) = -vs(r, i);
    }
    std::swap(si, sj);
  };
  if (s1 > s0) swap_pair(0, 1, s0, s1);
  if (s2 > s1 && s2 >= 0.0) swap_pair(1, 2, s1, s2);
  if (s1 > s0) swap_pair(0, 1, s0, s1);

  out.U = u;
  out.V = vs;
  out.sigma = {s0, s1, s2};
  return out;
}

}  // namespace uniphy
