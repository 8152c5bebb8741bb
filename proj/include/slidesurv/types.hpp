#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace slidesurv {

// Dense row-major matrices; vectors are n x 1 (or 1 x n) matrices.
template <class Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matd = MatX<double>;
using Matf = MatX<float>;

using IndexList = std::vector<int>;

}  // namespace slidesurv
