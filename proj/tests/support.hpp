#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include <sys/wait.h>

#include "facemask/image.hpp"
#include "facemask/layers.hpp"

namespace testsupport {

using facemask::ImageTensor;

inline ImageTensor<double> random_image(std::mt19937_64& rng, int h, int w, int c) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageTensor<double> img(h, w, c);
    for (auto& v : img) v = u(rng);
    return img;
}

/// b = a plus bounded noise, clamped to [0, 1]; gives SSIM well away from 0 and 1.
inline ImageTensor<double> noisy_copy(std::mt19937_64& rng, const ImageTensor<double>& a, double amplitude) {
    std::uniform_real_distribution<double> u(-amplitude, amplitude);
    auto b = a;
    for (auto& v : b) v = std::clamp(v + u(rng), 0.0, 1.0);
    return b;
}

inline ImageTensor<double> random_mask(std::mt19937_64& rng, int h, int w) {
    std::bernoulli_distribution coin(0.5);
    ImageTensor<double> m(h, w, 1);
    for (auto& v : m) v = coin(rng) ? 1.0 : 0.0;
    return m;
}

/// SSIM by visiting every window position and computing centred moments with
/// an explicitly built 2-D Gaussian, averaged over positions and channels.
inline double brute_force_ssim(const ImageTensor<double>& a, const ImageTensor<double>& b, int win = 11,
                               double sigma = 1.5, double k1 = 0.01, double k2 = 0.03) {
    const double c1 = k1 * k1;
    const double c2 = k2 * k2;
    const int half = win / 2;
    std::vector<double> w2(static_cast<std::size_t>(win) * win);
    double norm = 0.0;
    for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
            const double d2 = double((i - half) * (i - half) + (j - half) * (j - half));
            w2[i * win + j] = std::exp(-d2 / (2.0 * sigma * sigma));
            norm += w2[i * win + j];
        }
    for (auto& v : w2) v /= norm;

    double total = 0.0;
    long count = 0;
    for (int ch = 0; ch < a.channels(); ++ch)
        for (int r = 0; r + win <= a.height(); ++r)
            for (int c = 0; c + win <= a.width(); ++c) {
                double ma = 0, mb = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        ma += w2[i * win + j] * a(r + i, c + j, ch);
                        mb += w2[i * win + j] * b(r + i, c + j, ch);
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double da = a(r + i, c + j, ch) - ma;
                        const double db = b(r + i, c + j, ch) - mb;
                        va += w2[i * win + j] * da * da;
                        vb += w2[i * win + j] * db * db;
                        cov += w2[i * win + j] * da * db;
                    }
                total += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / double(count);
}

/// Zero-padded 3x3 convolution by direct summation; weight rows are tap * cin + c.
inline facemask::nn::FeatureMap<double> direct_conv3x3(const facemask::nn::FeatureMap<double>& in,
                                                       const facemask::nn::Matrix<double>& w,
                                                       const facemask::nn::Vector<double>& bias, int stride) {
    const int oh = (in.height - 1) / stride + 1;
    const int ow = (in.width - 1) / stride + 1;
    const int cin = static_cast<int>(in.channels());
    facemask::nn::FeatureMap<double> out(static_cast<int>(w.cols()), in.batch, oh, ow);
    for (int n = 0; n < in.batch; ++n)
        for (int o = 0; o < w.cols(); ++o)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    double s = bias[o];
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = y * stride + ky - 1;
                            const int ix = x * stride + kx - 1;
                            if (iy < 0 || ix < 0 || iy >= in.height || ix >= in.width) continue;
                            for (int c = 0; c < cin; ++c) s += w((ky * 3 + kx) * cin + c, o) * in.plane(n, c)[iy * in.width + ix];
                        }
                    out.plane(n, o)[y * ow + x] = s;
                }
    return out;
}

/// Nearest-neighbour 2x upsampling by index arithmetic.
inline facemask::nn::FeatureMap<double> direct_upsample2(const facemask::nn::FeatureMap<double>& in) {
    facemask::nn::FeatureMap<double> out(static_cast<int>(in.channels()), in.batch, 2 * in.height, 2 * in.width);
    for (int n = 0; n < in.batch; ++n)
        for (int c = 0; c < in.channels(); ++c)
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width; ++x)
                    out.plane(n, c)[y * out.width + x] = in.plane(n, c)[(y / 2) * in.width + x / 2];
    return out;
}

#ifdef TEST_SCRATCH
inline std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::path(TEST_SCRATCH) / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}
#endif

/// Runs a shell command and returns its exit status.
inline int run(const std::string& cmd) {
    const int raw = std::system((cmd + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

inline std::string capture(const std::string& cmd) {
    std::string out;
    FILE* p = popen((cmd + " 2>/dev/null").c_str(), "r");
    if (!p) return out;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, p)) out.append(buf, n);
    pclose(p);
    return out;
}

}  // namespace testsupport
