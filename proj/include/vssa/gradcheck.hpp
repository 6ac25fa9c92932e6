#pragma once

#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "vssa/tensor.hpp"

namespace vssa {

// Central finite differences against reverse-mode gradients. The loss
// callable must be deterministic and must behave identically whether or not
// a tape is supplied (tape == nullptr means plain forward evaluation).
template <class T>
using GradCheckLoss = std::function<Tensor<T>(Tape<T>*, std::vector<Tensor<T>>&)>;

template <class T>
struct GradCheckOptions {
    T eps;
    double tol;
    // Coordinates checked per input; -1 checks every coordinate. Sampling is
    // deterministic in the seed.
    std::int64_t max_coords_per_input = -1;
    std::uint64_t seed = 7;
};

inline GradCheckOptions<double> gradcheck_opts64() { return {1e-5, 1e-4, -1, 7}; }
inline GradCheckOptions<float> gradcheck_opts32() { return {1e-2f, 1e-3, -1, 7}; }

struct GradCheckReport {
    bool ok = true;
    double max_rel_err = 0.0;
    std::int64_t coords_checked = 0;
    std::string detail;  // worst coordinate, or the reason for failure
};

namespace detail {

template <class T>
inline double scalar_loss(const GradCheckLoss<T>& f, std::vector<Tensor<T>>& inputs) {
    Tensor<T> out = f(nullptr, inputs);
    if (out.size() != 1) throw std::invalid_argument("gradcheck: loss callable must return a scalar");
    return static_cast<double>(out.at(0));
}

inline std::vector<std::int64_t> pick_coords(std::int64_t n, std::int64_t max_coords, std::uint64_t seed) {
    std::vector<std::int64_t> coords;
    if (max_coords < 0 || max_coords >= n) {
        coords.resize(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        return coords;
    }
    std::mt19937_64 rng(seed);
    std::set<std::int64_t> seen;
    std::uniform_int_distribution<std::int64_t> dist(0, n - 1);
    while (static_cast<std::int64_t>(seen.size()) < max_coords) seen.insert(dist(rng));
    coords.assign(seen.begin(), seen.end());
    return coords;
}

}  // namespace detail

template <class T>
GradCheckReport check_gradients(const GradCheckLoss<T>& f, std::vector<Tensor<T>> inputs,
                                const GradCheckOptions<T>& opt) {
    GradCheckReport rep;
    std::vector<std::vector<T>> analytic;
    try {
        Tape<T> tape;
        std::vector<Tensor<T>> leaves;
        leaves.reserve(inputs.size());
        for (auto& in : inputs) leaves.push_back(tape.leaf(in));
        Tensor<T> loss = f(&tape, leaves);
        if (loss.size() != 1) throw std::invalid_argument("gradcheck: loss callable must return a scalar");
        if (!std::isfinite(static_cast<double>(loss.at(0)))) {
            rep.ok = false;
            rep.detail = "non-finite loss value";
            return rep;
        }
        tape.backward(loss);
        for (const auto& lf : leaves) analytic.push_back(tape.grad(lf));
    } catch (const std::exception& e) {
        rep.ok = false;
        rep.detail = std::string("forward/backward raised: ") + e.what();
        return rep;
    }

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& ga = analytic[i];
        for (T v : ga) {
            if (!std::isfinite(static_cast<double>(v))) {
                rep.ok = false;
                rep.detail = "non-finite analytic gradient for input " + std::to_string(i);
                return rep;
            }
        }
        const std::int64_t n = inputs[i].size();
        auto coords = detail::pick_coords(n, opt.max_coords_per_input, opt.seed + i);
        std::vector<T>& buf = *inputs[i].data;
        for (std::int64_t c : coords) {
            const T old = buf[static_cast<std::size_t>(c)];
            buf[static_cast<std::size_t>(c)] = old + opt.eps;
            const double fp = detail::scalar_loss(f, inputs);
            buf[static_cast<std::size_t>(c)] = old - opt.eps;
            const double fm = detail::scalar_loss(f, inputs);
            buf[static_cast<std::size_t>(c)] = old;
            const double fd = (fp - fm) / (2.0 * static_cast<double>(opt.eps));
            const double a = static_cast<double>(ga[static_cast<std::size_t>(c)]);
            if (!std::isfinite(fd)) {
                rep.ok = false;
                rep.detail = "non-finite finite-difference value at input " + std::to_string(i) + " coord " +
                             std::to_string(c);
                return rep;
            }
            const double rel = std::abs(a - fd) / std::max(std::abs(a) + std::abs(fd), 1e-3);
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                std::ostringstream os;
                os << "input " << i << " coord " << c << ": analytic=" << a << " fd=" << fd << " rel=" << rel;
                rep.detail = os.str();
            }
        }
    }
    rep.ok = rep.max_rel_err <= opt.tol;
    return rep;
}

// Named checks runnable from both the test suite and the CLI.
struct NamedGradCheck {
    std::string name;
    std::function<GradCheckReport()> run;
};

const std::vector<NamedGradCheck>& standard_grad_checks();

}  // namespace vssa
