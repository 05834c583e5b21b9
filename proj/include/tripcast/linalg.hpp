#pragma once

#include <Eigen/Dense>

namespace tripcast {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Matd = Mat<double>;
using Matf = Mat<float>;

template <class T>
bool all_finite(const Mat<T>& m) {
    return m.allFinite();
}

}  // namespace tripcast
