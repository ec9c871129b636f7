#pragma once

// AdamW with decoupled weight decay. Moments live in a name-keyed map so
// checkpoints can serialize them; parameters that received no gradient this
// step keep their moments and bias-correction counters untouched.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fsc/tape.hpp"

namespace fsc {

struct AdamState {
    Tensor<float> m, v;
    int64_t steps = 0;
};

class AdamW {
public:
    double lr = 1e-4, weight_decay = 0.01;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::map<std::string, AdamState> state;

    AdamW() = default;
    AdamW(double lr_, double wd) : lr(lr_), weight_decay(wd) {}

    // one update over every trainable param that holds a gradient
    void step(const std::vector<Param<float>*>& params) {
        for (Param<float>* p : params) {
            if (!p->trainable || !p->has_grad) continue;
            AdamState& st = state[p->name];
            if (st.m.empty()) {
                st.m = Tensor<float>::zeros(p->value.shape);
                st.v = Tensor<float>::zeros(p->value.shape);
            }
            FSC_CHECK(st.m.shape == p->value.shape, "optimizer state shape drift: " + p->name);
            ++st.steps;
            double bc1 = 1.0 - std::pow(beta1, double(st.steps));
            double bc2 = 1.0 - std::pow(beta2, double(st.steps));
            float b1 = float(beta1), b2 = float(beta2);
            float decay = float(1.0 - lr * weight_decay);
            for (int64_t i = 0; i < p->value.numel(); ++i) {
                float g = p->grad[i];
                st.m[i] = b1 * st.m[i] + (1.0f - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0f - b2) * g * g;
                float mhat = float(double(st.m[i]) / bc1);
                float vhat = float(double(st.v[i]) / bc2);
                p->value[i] = decay * p->value[i] - float(lr) * mhat / (std::sqrt(vhat) + float(eps));
            }
        }
    }
};

}  // namespace fsc
