#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mlens/rng.hpp"
#include "mlens/tensor.hpp"

namespace mlens {

struct GradCheckOptions {
    double step = 1e-5;
    std::size_t samples_per_tensor = 64;  // coordinates checked per tensor (all if smaller)
    std::uint64_t seed = 0x9d5c0ff5u;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
};

// Central-difference verification of reverse-mode gradients.
//
// `f(with_grad)` must deterministically evaluate the scalar objective at the
// current parameter values; when with_grad is true it must also populate
// fresh gradients in each tensor's grad buffer (the checker zeroes them
// first). Relative error uses max(|analytic|, |numeric|, 1e-8) as scale.
inline GradCheckReport finite_diff_check(const std::function<double(bool)>& f,
                                         const std::vector<std::pair<std::string, Tensor*>>& params,
                                         const GradCheckOptions& opt = {}) {
    if (opt.step <= 0.0) throw NumericError("finite_diff_check: step must be positive");
    for (auto& [name, t] : params) t->zero_grad();
    double base = f(true);
    if (!std::isfinite(base)) throw NumericError("finite_diff_check: objective is not finite");

    GradCheckReport report;
    Rng rng(opt.seed);
    for (auto& [name, t] : params) {
        if (!t->grad) throw NumericError("finite_diff_check: no gradient for " + name);
        std::vector<std::size_t> coords;
        if (t->size() <= opt.samples_per_tensor) {
            coords.resize(t->size());
            for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        } else {
            coords = rng.sample_indices(t->size(), opt.samples_per_tensor);
        }
        for (std::size_t c : coords) {
            double saved = (*t)[c];
            (*t)[c] = saved + opt.step;
            double fp = f(false);
            (*t)[c] = saved - opt.step;
            double fm = f(false);
            (*t)[c] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_diff_check: perturbed objective is not finite");
            double numeric = (fp - fm) / (2.0 * opt.step);
            double analytic = (*t->grad)[c];
            double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_tensor = name;
                report.worst_coord = c;
                report.worst_analytic = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace mlens
