#include "simt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace simt {

GradCheckResult grad_check(const std::vector<Parameter*>& params,
                           const std::function<double(bool)>& loss, double eps) {
    if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
    for (const Parameter* p : params) {
        if (p->value.precision() != Precision::f64) {
            throw std::invalid_argument("grad_check: requires 64-bit precision");
        }
        p->zero_grad();
    }
    loss(true);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    double grad_scale = 0.0;
    for (const Parameter* p : params) {
        analytic.emplace_back(p->grad.values().begin(), p->grad.values().end());
        for (double gv : analytic.back()) grad_scale = std::max(grad_scale, std::fabs(gv));
    }
    double floor = std::max(1e-4 * grad_scale, 1e-8);

    GradCheckResult res;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        for (int64_t i = 0; i < p->value.size(); ++i) {
            double orig = p->value[i];
            p->value[i] = orig + eps;
            double up = loss(false);
            p->value[i] = orig - eps;
            double down = loss(false);
            p->value[i] = orig;
            double numeric = (up - down) / (2.0 * eps);
            double a = analytic[pi][i];
            double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), floor});
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = p->name;
                res.worst_index = i;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

} // namespace simt
