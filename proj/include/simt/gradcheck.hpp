// Central finite-difference verification of analytic gradients.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "simt/graph.hpp"

namespace simt {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

// loss(with_grad): evaluates the scalar loss; when with_grad is true it must
// also run backward so gradients accumulate into the parameters. Gradients are
// zeroed here before the analytic pass. Relative error uses a floor tied to
// the largest gradient magnitude so noise on dead coordinates cannot dominate.
GradCheckResult grad_check(const std::vector<Parameter*>& params,
                           const std::function<double(bool with_grad)>& loss, double eps);

} // namespace simt
