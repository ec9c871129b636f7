#pragma once

// Shared test utilities: finite-difference gradient checking in double, and
// small tensor builders.

#include <doctest.h>

#include <functional>
#include <vector>

#include "fsc/tape.hpp"

namespace fsc::testing {

// Checks analytic gradients of a scalar-valued graph against central
// differences for every element of every listed parameter.
inline void gradcheck(const std::vector<Param<double>*>& params,
                      const std::function<Var(Tape<double>&)>& build, double fd_eps = 1e-5,
                      double tol = 1e-6) {
    for (Param<double>* p : params) p->zero_grad();
    {
        Tape<double> tape(true);
        Var root = build(tape);
        REQUIRE(tape.val(root).numel() == 1);
        tape.backward(root);
    }
    auto value = [&]() {
        Tape<double> tape(false);
        Var root = build(tape);
        return tape.val(root)[0];
    };
    for (Param<double>* p : params) {
        REQUIRE(p->has_grad);
        for (int64_t i = 0; i < p->value.numel(); ++i) {
            double keep = p->value[i];
            p->value[i] = keep + fd_eps;
            double up = value();
            p->value[i] = keep - fd_eps;
            double dn = value();
            p->value[i] = keep;
            double num = (up - dn) / (2.0 * fd_eps);
            double ana = p->grad[i];
            double denom = std::max(1.0, std::abs(num) + std::abs(ana));
            INFO("param ", p->name, " elem ", i, " analytic ", ana, " numeric ", num);
            CHECK(std::abs(num - ana) / denom < tol);
        }
    }
}

template <typename S>
Param<S> make_param(const std::string& name, std::vector<int> shape, Rng& rng, S stddev = S(1)) {
    Param<S> p;
    p.name = name;
    p.value = Tensor<S>(std::move(shape));
    p.value.fill_normal(rng, stddev);
    return p;
}

}  // namespace fsc::testing
