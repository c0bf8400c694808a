#include "cstransfer/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "cstransfer/errors.hpp"

namespace cstransfer {

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double step) {
    if (!(step > 0.0)) {
        throw std::invalid_argument("grad_check: step must be positive");
    }
    for (auto& p : params) {
        p.zero_grad();
    }
    f().backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) {
        if (p.has_grad()) {
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        } else {
            analytic.emplace_back(p.numel(), 0.0);
        }
    }

    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto values = params[k].mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + step;
            const double up = f().item();
            values[i] = saved - step;
            const double down = f().item();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            if (!std::isfinite(numeric)) {
                throw NumericError("grad_check: non-finite finite-difference estimate");
            }
            const double a = analytic[k][i];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace cstransfer
