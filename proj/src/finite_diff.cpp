#include "bridge/finite_diff.hpp"

#include <cmath>
#include <sstream>

#include "bridge/rng.hpp"

namespace bridge {

std::string FiniteDiffReport::to_string() const {
    std::ostringstream os;
    os << (passed ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_err << " tol=" << tol
       << " coords=" << coords_checked;
    if (!worst.param.empty())
        os << " worst=" << worst.param << "[" << worst.coord << "] analytic=" << worst.analytic
           << " numeric=" << worst.numeric;
    return os.str();
}

FiniteDiffReport finite_diff_check(const std::function<Value()>& f,
                                   const std::vector<std::pair<std::string, Value>>& params, double h, double tol,
                                   size_t max_coords_per_param, uint64_t sample_seed) {
    FiniteDiffReport report;
    report.tol = tol;

    // Analytic gradients at the base point.
    for (const auto& [name, p] : params) {
        (void)name;
        const_cast<Value&>(p).zero_grad();
    }
    Value loss = f();
    backward(loss);

    Rng rng(derive_seed(sample_seed, 0x6fd1));
    for (const auto& [name, pv] : params) {
        Value p = pv;
        Tensor& data = p.mutable_data();
        const size_t n = data.size();

        std::vector<size_t> coords;
        if (max_coords_per_param == 0 || n <= max_coords_per_param) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (size_t k = 0; k < max_coords_per_param; ++k) coords.push_back(rng.uniform_index(n));
        }

        for (size_t c : coords) {
            const double orig = data.at(c);
            double analytic = 0.0;
            if (p.has_grad()) analytic = p.node()->grad.at(c);

            data.at(c) = orig + h;
            double fp;
            {
                NoGradGuard ng;
                fp = f().item();
            }
            data.at(c) = orig - h;
            double fm;
            {
                NoGradGuard ng;
                fm = f().item();
            }
            data.at(c) = orig;

            const double numeric = (fp - fm) / (2.0 * h);
            const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = {name, c, analytic, numeric, rel};
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    return report;
}

}  // namespace bridge
