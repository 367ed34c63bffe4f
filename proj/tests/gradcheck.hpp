#pragma once

#include <algorithm>
#include <cmath>

#include "pionono/tensor.hpp"

namespace pionono::testing {

inline double rel_err(double a, double b, double floor = 1e-3) {
    double den = std::max({std::fabs(a), std::fabs(b), floor});
    return std::fabs(a - b) / den;
}

// Central difference of eval() w.r.t. one stored f32 parameter entry. The
// effective step is measured after float rounding so the quotient is exact.
template <typename EvalFn>
double fd_grad(EvalFn&& eval, Tensor& param, size_t idx, double h = 1e-3) {
    float orig = param.data[idx];
    param.data[idx] = static_cast<float>(static_cast<double>(orig) + h);
    double xp = static_cast<double>(param.data[idx]);
    double fp = eval();
    param.data[idx] = static_cast<float>(static_cast<double>(orig) - h);
    double xm = static_cast<double>(param.data[idx]);
    double fm = eval();
    param.data[idx] = orig;
    return (fp - fm) / (xp - xm);
}

}  // namespace pionono::testing
