#pragma once

#include <Eigen/Dense>

namespace cbapm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

} // namespace cbapm
