#pragma once

#include <vector>

namespace gmn {

double eval_r2(const std::vector<double>& pred, const std::vector<double>& target);
double eval_kendall_tau(const std::vector<double>& pred, const std::vector<double>& target);

}  // namespace gmn
