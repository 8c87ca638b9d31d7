#include "dcswin/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "dcswin/ops.hpp"

namespace dcswin {

GradcheckReport gradcheck(const std::function<Tensor64()>& loss, std::vector<Tensor64> inputs,
                          const std::vector<std::string>& names, GradcheckOptions opt)
{
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    loss().backward();
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        }
    }

    GradcheckReport report;
    std::mt19937_64 rng(opt.seed);
    NoGradGuard no_grad;
    std::vector<std::pair<std::size_t, int64_t>> picks;
    if (opt.total_samples > 0) {
        int64_t total = 0;
        for (auto& t : inputs) total += t.numel();
        std::uniform_int_distribution<int64_t> u(0, total - 1);
        for (int64_t s = 0; s < opt.total_samples; ++s) {
            int64_t flat = u(rng);
            std::size_t k = 0;
            while (flat >= inputs[k].numel()) flat -= inputs[k++].numel();
            picks.emplace_back(k, flat);
        }
    } else {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            std::vector<int64_t> idx(static_cast<std::size_t>(inputs[k].numel()));
            std::iota(idx.begin(), idx.end(), 0);
            if (static_cast<int64_t>(idx.size()) > opt.max_elements) {
                std::shuffle(idx.begin(), idx.end(), rng);
                idx.resize(static_cast<std::size_t>(opt.max_elements));
            }
            for (int64_t i : idx) picks.emplace_back(k, i);
        }
    }
    for (const auto& [k, i] : picks) {
        auto data = inputs[k].mutable_data();
        const double saved = data[i];
        data[i] = saved + opt.step;
        const double up = loss().item();
        data[i] = saved - opt.step;
        const double down = loss().item();
        data[i] = saved;
        const double numeric = (up - down) / (2.0 * opt.step);
        const double a = analytic[k][i];
        const double rel = std::abs(a - numeric) / (std::abs(a) + 1e-6);
        ++report.checked;
        if (rel > report.max_rel_error || std::isnan(rel)) {
            report.max_rel_error = std::isnan(rel) ? INFINITY : rel;
            std::ostringstream os;
            os << (k < names.size() ? names[k] : "input" + std::to_string(k)) << '[' << i << "]: analytic=" << a
               << ", numeric=" << numeric;
            report.worst = os.str();
        }
    }
    return report;
}

Tensor64 projection_loss(const Tensor64& y, uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> r(static_cast<std::size_t>(y.numel()));
    for (auto& v : r) v = u(rng);
    return sum(mul(y, Tensor64::from(y.shape(), std::move(r))));
}

}  // namespace dcswin
