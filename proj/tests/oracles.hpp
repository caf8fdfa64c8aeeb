#pragma once

// Independent reference implementations used as test oracles. Everything here
// is deliberately written in the most literal way possible and shares no code
// with the library paths it checks.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracles {

// Plain quadruple-loop convolution over an explicitly zero-padded input.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, int n, int c, int h, int w,
                                        const std::vector<double>& k, int oc, int kh, int kw,
                                        int stride, int pad, int& oh_out, int& ow_out) {
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    oh_out = oh;
    ow_out = ow;
    std::vector<double> out(static_cast<std::size_t>(n) * oc * oh * ow, 0.0);
    auto xat = [&](int ni, int ci, int y, int z) -> double {
        if (y < 0 || y >= h || z < 0 || z >= w) return 0.0;
        return x[static_cast<std::size_t>(((ni * c + ci) * h + y) * w + z)];
    };
    for (int ni = 0; ni < n; ++ni)
        for (int oi = 0; oi < oc; ++oi)
            for (int y = 0; y < oh; ++y)
                for (int z = 0; z < ow; ++z) {
                    double acc = 0.0;
                    for (int ci = 0; ci < c; ++ci)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kz = 0; kz < kw; ++kz)
                                acc += k[static_cast<std::size_t>(((oi * c + ci) * kh + ky) * kw + kz)] *
                                       xat(ni, ci, y * stride - pad + ky, z * stride - pad + kz);
                    out[static_cast<std::size_t>(((ni * oc + oi) * oh + y) * ow + z)] = acc;
                }
    return out;
}

// Scalar Adam recurrence, evaluated step by step.
struct ScalarAdam {
    double m = 0.0, v = 0.0;
    std::int64_t t = 0;
    double lr, b1, b2, eps;
    ScalarAdam(double lr_, double b1_ = 0.9, double b2_ = 0.999, double eps_ = 1e-8)
        : lr(lr_), b1(b1_), b2(b2_), eps(eps_) {}
    double step(double p, double g) {
        ++t;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        const double mh = m / (1.0 - std::pow(b1, static_cast<double>(t)));
        const double vh = v / (1.0 - std::pow(b2, static_cast<double>(t)));
        return p - lr * mh / (std::sqrt(vh) + eps);
    }
};

// Reference bilinear resampler, half-pixel-center convention, border clamp.
// Scalar per-pixel formula, one channel at a time.
inline double bilinear_at(const std::vector<double>& img, int h, int w, int c, double y, double x,
                          int ch) {
    auto clampi = [](int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); };
    const int y0 = clampi(static_cast<int>(std::floor(y)), 0, h - 1);
    const int x0 = clampi(static_cast<int>(std::floor(x)), 0, w - 1);
    const int y1 = clampi(y0 + 1, 0, h - 1);
    const int x1 = clampi(x0 + 1, 0, w - 1);
    const double fy = y - std::floor(y);
    const double fx = x - std::floor(x);
    auto at = [&](int yy, int xx) { return img[(static_cast<std::size_t>(yy) * w + xx) * c + ch]; };
    return at(y0, x0) * (1 - fy) * (1 - fx) + at(y0, x1) * (1 - fy) * fx +
           at(y1, x0) * fy * (1 - fx) + at(y1, x1) * fy * fx;
}

inline std::vector<double> bilinear_resize(const std::vector<double>& img, int h, int w, int c,
                                           int nh, int nw) {
    std::vector<double> out(static_cast<std::size_t>(nh) * nw * c);
    for (int y = 0; y < nh; ++y)
        for (int x = 0; x < nw; ++x)
            for (int ch = 0; ch < c; ++ch) {
                const double sy = (y + 0.5) * static_cast<double>(h) / nh - 0.5;
                const double sx = (x + 0.5) * static_cast<double>(w) / nw - 0.5;
                out[(static_cast<std::size_t>(y) * nw + x) * c + ch] = bilinear_at(img, h, w, c, sy, sx, ch);
            }
    return out;
}

// Exhaustive nearest-neighbour search, squared L2, lowest index on ties.
inline int brute_force_nearest(const std::vector<double>& codebook, int k, int d,
                               const double* vec) {
    int best = 0;
    double best_d = 1e300;
    for (int j = 0; j < k; ++j) {
        double acc = 0.0;
        for (int i = 0; i < d; ++i) {
            const double diff = vec[i] - codebook[static_cast<std::size_t>(j) * d + i];
            acc += diff * diff;
        }
        if (acc < best_d) {
            best_d = acc;
            best = j;
        }
    }
    return best;
}

// Two-pass mean and unbiased covariance.
inline void two_pass_stats(const std::vector<std::vector<double>>& rows, std::vector<double>& mu,
                           std::vector<double>& sigma) {
    const std::size_t n = rows.size();
    const std::size_t f = rows[0].size();
    mu.assign(f, 0.0);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < f; ++i) mu[i] += r[i];
    for (std::size_t i = 0; i < f; ++i) mu[i] /= static_cast<double>(n);
    sigma.assign(f * f, 0.0);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < f; ++i)
            for (std::size_t j = 0; j < f; ++j)
                sigma[i * f + j] += (r[i] - mu[i]) * (r[j] - mu[j]);
    for (auto& v : sigma) v /= static_cast<double>(n - 1);
}

}  // namespace oracles
