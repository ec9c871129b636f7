#include "fsc/metrics.hpp"

#include <cmath>
#include <vector>

#include "fsc/tasks.hpp"

namespace fsc {

namespace {

constexpr int kWin = 7;
constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

void check_pair(const Tensor<float>& a, const Tensor<float>& b, const char* what) {
    if (a.shape != b.shape) throw DataError(std::string(what) + ": shape mismatch");
    if (a.ndim() != 3 && a.ndim() != 2) throw DataError(std::string(what) + ": need [C,H,W] or [H,W]");
}

std::vector<double> to_gray(const Tensor<float>& img, int& H, int& W) {
    if (img.ndim() == 2) {
        H = img.dim(0);
        W = img.dim(1);
        std::vector<double> g(size_t(H) * W);
        for (int64_t i = 0; i < img.numel(); ++i) g[size_t(i)] = img[i];
        return g;
    }
    H = img.dim(1);
    W = img.dim(2);
    std::vector<double> g(size_t(H) * W);
    if (img.dim(0) == 1) {
        for (int64_t i = 0; i < int64_t(H) * W; ++i) g[size_t(i)] = img[i];
    } else if (img.dim(0) == 3) {
        for (int64_t i = 0; i < int64_t(H) * W; ++i)
            g[size_t(i)] = 0.299 * img[i] + 0.587 * img[int64_t(H) * W + i] +
                           0.114 * img[int64_t(2) * H * W + i];
    } else {
        throw DataError("ssim: need 1 or 3 channels");
    }
    return g;
}

// palette class per pixel: -1 background, 0..2 one-hot channel; DataError
// for anything off the palette
int pixel_class(const Tensor<float>& m, int64_t hw, int64_t i) {
    int on = -1;
    for (int c = 0; c < 3; ++c) {
        float v = m[int64_t(c) * hw + i];
        if (std::abs(v - 1.0f) < 1e-3f) {
            if (on >= 0) throw DataError("miou: pixel lights several palette channels");
            on = c;
        } else if (std::abs(v) > 1e-3f) {
            throw DataError("miou: off-palette pixel value");
        }
    }
    return on;
}

}  // namespace

double metric_ssim(const Tensor<float>& a, const Tensor<float>& b) {
    check_pair(a, b, "ssim");
    int H = 0, W = 0;
    std::vector<double> ga = to_gray(a, H, W);
    int Hb = 0, Wb = 0;
    std::vector<double> gb = to_gray(b, Hb, Wb);
    if (H < kWin || W < kWin) throw DataError("ssim: image smaller than the 7x7 window");
    const double inv_n = 1.0 / double(kWin * kWin);
    double total = 0.0;
    int windows = 0;
    for (int y = 0; y + kWin <= H; ++y)
        for (int x = 0; x + kWin <= W; ++x) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (int dy = 0; dy < kWin; ++dy)
                for (int dx = 0; dx < kWin; ++dx) {
                    double va = ga[size_t(y + dy) * W + (x + dx)];
                    double vb = gb[size_t(y + dy) * W + (x + dx)];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            double mu_a = sa * inv_n, mu_b = sb * inv_n;
            double var_a = saa * inv_n - mu_a * mu_a;
            double var_b = sbb * inv_n - mu_b * mu_b;
            double cov = sab * inv_n - mu_a * mu_b;
            double num = (2.0 * mu_a * mu_b + kC1) * (2.0 * cov + kC2);
            double den = (mu_a * mu_a + mu_b * mu_b + kC1) * (var_a + var_b + kC2);
            total += num / den;
            ++windows;
        }
    return total / double(windows);
}

double metric_miou(const Tensor<float>& a, const Tensor<float>& b) {
    check_pair(a, b, "miou");
    if (a.ndim() != 3 || a.dim(0) != 3) throw DataError("miou: masks must be [3,H,W]");
    int64_t hw = int64_t(a.dim(1)) * a.dim(2);
    int64_t inter[3] = {0, 0, 0}, uni[3] = {0, 0, 0};
    for (int64_t i = 0; i < hw; ++i) {
        int ca = pixel_class(a, hw, i);
        int cb = pixel_class(b, hw, i);
        if (ca >= 0) ++uni[ca];
        if (cb >= 0 && cb != ca) ++uni[cb];
        if (ca >= 0 && ca == cb) ++inter[ca];
    }
    double sum = 0.0;
    int classes = 0;
    for (int c = 0; c < 3; ++c) {
        if (uni[c] == 0) continue;  // class absent from both masks
        sum += double(inter[c]) / double(uni[c]);
        ++classes;
    }
    return classes == 0 ? 1.0 : sum / double(classes);
}

double metric_mse(const Tensor<float>& a, const Tensor<float>& b) {
    if (a.shape != b.shape) throw DataError("mse: shape mismatch");
    if (a.numel() == 0) throw DataError("mse: empty input");
    double sum = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = double(a[i]) - double(b[i]);
        sum += d * d;
    }
    return sum / double(a.numel());
}

double task_score(const std::string& task, const Tensor<float>& generated,
                  const Tensor<float>& target) {
    const std::string& metric = find_task(task).metric;
    if (metric == "ssim") return metric_ssim(generated, target);
    if (metric == "miou") return metric_miou(generated, target);
    return metric_mse(generated, target);
}

bool metric_higher_better(const std::string& metric) {
    if (metric == "ssim" || metric == "miou") return true;
    if (metric == "mse") return false;
    throw ConfigError("unknown metric: " + metric);
}

}  // namespace fsc
