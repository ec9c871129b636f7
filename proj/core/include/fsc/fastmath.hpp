#pragma once

// Branch-free scalar math kernels the autovectorizer can chew on. The float
// exp is a cephes-style polynomial (~1 ulp); softmax/SiLU/GELU over thousands
// of lanes are the single-core hotspot, and keeping exp in our own code also
// makes rendered datasets independent of the host libm.

#include <cmath>
#include <cstdint>
#include <cstring>

namespace fsc {

inline float fast_expf(float x) {
    // clamp to the finite range of float exp
    x = x < -87.33655f ? -87.33655f : x;
    x = x > 88.72283f ? 88.72283f : x;
    // n = round(x / ln2), r = x - n*ln2 in two parts
    float n = std::nearbyintf(x * 1.44269504088896341f);
    float r = x - n * 0.693359375f;
    r = r - n * -2.12194440e-4f;
    // degree-5 minimax for exp(r) on [-ln2/2, ln2/2]
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    // scale by 2^n via exponent bits
    int32_t ni = int32_t(n);
    uint32_t bits;
    std::memcpy(&bits, &p, 4);
    bits += uint32_t(ni) << 23;
    std::memcpy(&p, &bits, 4);
    return p;
}

inline double fast_exp(double x) { return std::exp(x); }

template <typename S>
inline S vexp(S x) {
    if constexpr (sizeof(S) == 4)
        return fast_expf(float(x));
    else
        return std::exp(x);
}

template <typename S>
inline S sigmoid(S x) {
    // exp of a non-positive argument keeps the poly in range
    if (x >= S(0)) {
        S e = vexp(-x);
        return S(1) / (S(1) + e);
    }
    S e = vexp(x);
    return e / (S(1) + e);
}

template <typename S>
inline S silu(S x) {
    return x * sigmoid(x);
}

// tanh-form GELU (the smooth approximation in common use)
template <typename S>
inline S gelu(S x) {
    S c = S(0.7978845608028654);  // sqrt(2/pi)
    S u = c * (x + S(0.044715) * x * x * x);
    // tanh(u) = 2*sigmoid(2u) - 1
    S t = S(2) * sigmoid(S(2) * u) - S(1);
    return S(0.5) * x * (S(1) + t);
}

// d/dx gelu(x), matching the tanh form above
template <typename S>
inline S gelu_grad(S x) {
    S c = S(0.7978845608028654);
    S x3 = x * x * x;
    S u = c * (x + S(0.044715) * x3);
    S t = S(2) * sigmoid(S(2) * u) - S(1);
    S du = c * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

template <typename S>
inline S silu_grad(S x) {
    S s = sigmoid(x);
    return s * (S(1) + x * (S(1) - s));
}

}  // namespace fsc
