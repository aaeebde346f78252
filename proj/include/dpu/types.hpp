#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>

namespace dpu {

// Working scalar. Checkpoints narrow to 32-bit floats on disk; everything
// in memory runs in double so finite-difference checks stay meaningful.
using Real = double;

template <typename Scalar>
using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VecT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Mat = MatT<Real>;
using Vec = VecT<Real>;

using Index = Eigen::Index;

enum class TaskKind { Regression, BinaryClassification, Multiclass };

struct Task {
  TaskKind kind = TaskKind::Regression;
  int classes = 0;  // K, multiclass only

  static Task regression() { return {TaskKind::Regression, 0}; }
  static Task binary() { return {TaskKind::BinaryClassification, 0}; }
  static Task multiclass(int k) { return {TaskKind::Multiclass, k}; }

  bool operator==(const Task&) const = default;
};

std::string to_string(TaskKind kind);
Task task_from_string(const std::string& name, int classes);

}  // namespace dpu
