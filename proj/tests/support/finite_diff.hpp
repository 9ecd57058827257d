#pragma once

// Central finite differences, used as an independent oracle for the
// analytic gradients produced by the autodiff core.

#include <cmath>
#include <functional>
#include <vector>

namespace m3face::oracle {

inline double central_difference(std::vector<double>& values, std::size_t index, const std::function<double()>& f,
                                 double h = 1e-6) {
    const double orig = values[index];
    values[index] = orig + h;
    const double up = f();
    values[index] = orig - h;
    const double down = f();
    values[index] = orig;
    return (up - down) / (2.0 * h);
}

/// |a-b| / max(|a|, |b|, floor); the floor keeps near-zero gradients from
/// producing meaningless ratios.
inline double relative_error(double a, double b, double floor = 1e-6) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor});
}

}  // namespace m3face::oracle
