#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <vector>

#include "tinymol/molgraph.hpp"

namespace tinymol {

struct KabschResult {
  std::vector<Vec3> aligned;
  std::array<std::array<double, 3>, 3> rotation;  // row-major, applied to centered mobile
  double rmsd = 0.0;
  // Set when n < 3 or the centered mobile cloud has fewer than two
  // significant principal directions; the result is then translation-only.
  bool degenerate = false;
};

// Rigid superposition of `mobile` onto `target`: the rotation (det = +1)
// minimizing RMSD, found from the SVD of the cross-covariance with a sign
// flip on the smallest singular vector when the raw optimum is a reflection.
inline KabschResult kabsch_align(const std::vector<Vec3>& mobile, const std::vector<Vec3>& target) {
  const int n = static_cast<int>(mobile.size());
  if (n < 1 || target.size() != mobile.size())
    throw Error(ErrorCode::shape_mismatch, "kabsch_align: point sets of sizes " +
                                               std::to_string(mobile.size()) + " and " +
                                               std::to_string(target.size()));

  Eigen::MatrixXd P(n, 3), Q(n, 3);
  for (int i = 0; i < n; ++i) {
    P.row(i) << mobile[i].x, mobile[i].y, mobile[i].z;
    Q.row(i) << target[i].x, target[i].y, target[i].z;
  }
  const Eigen::RowVector3d cp = P.colwise().mean();
  const Eigen::RowVector3d cq = Q.colwise().mean();
  P.rowwise() -= cp;
  Q.rowwise() -= cq;

  KabschResult res;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();

  // Rank of the centered mobile cloud decides whether a rotation is
  // recoverable at all.
  bool rank_ok = false;
  if (n >= 3) {
    Eigen::JacobiSVD<Eigen::MatrixXd> psvd(P);
    const auto& sv = psvd.singularValues();
    rank_ok = sv(1) > 1e-9 * std::max(sv(0), 1.0);
  }

  if (rank_ok) {
    const Eigen::Matrix3d H = P.transpose() * Q;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1.0;
    R = svd.matrixV() * d * svd.matrixU().transpose();
  } else {
    res.degenerate = true;
  }

  res.aligned.resize(n);
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d a = R * P.row(i).transpose() + cq.transpose();
    res.aligned[i] = {a(0), a(1), a(2)};
    const Eigen::Vector3d diff = a - (Q.row(i) + cq).transpose();
    ss += diff.squaredNorm();
  }
  res.rmsd = std::sqrt(ss / n);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) res.rotation[r][c] = R(r, c);
  return res;
}

}  // namespace tinymol
