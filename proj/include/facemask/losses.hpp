#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "facemask/filter.hpp"
#include "facemask/hypothesis.hpp"
#include "facemask/image.hpp"

namespace facemask {

/// A loss value together with its gradient with respect to the prediction.
template <typename T>
struct LossValue {
    T value = T(0);
    ImageTensor<T> gradient;
};

/// Local-statistics parameters for SSIM. Defaults are the usual 11x11 / 1.5
/// window with constants scaled for unit-interval data.
struct SsimConfig {
    int window_size = 11;
    double window_sigma = 1.5;
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 1.0;

    double c1() const noexcept { return (k1 * dynamic_range) * (k1 * dynamic_range); }
    double c2() const noexcept { return (k2 * dynamic_range) * (k2 * dynamic_range); }

    void validate() const {
        if (window_size < 3 || window_size % 2 == 0) throw std::invalid_argument("SsimConfig: window_size must be odd and >= 3");
        if (!(window_sigma > 0.0)) throw std::invalid_argument("SsimConfig: window_sigma must be positive");
        if (!(k1 > 0.0) || !(k2 > 0.0)) throw std::invalid_argument("SsimConfig: k1 and k2 must be positive");
        if (!(dynamic_range > 0.0)) throw std::invalid_argument("SsimConfig: dynamic_range must be positive");
    }
};

/// Diagonal Gaussian q(z|x); the prior is N(0, I).
template <typename T>
struct GaussianPosterior {
    std::vector<T> mu;
    std::vector<T> logvar;
};

/// Gradient of the KL term with respect to both posterior parameters.
template <typename T>
struct KlValue {
    T value = T(0);
    std::vector<T> grad_mu;
    std::vector<T> grad_logvar;
};

// ---------------------------------------------------------------------------
// l_n losses

template <typename T>
LossValue<T> l1_loss(const ImageTensor<T>& pred, const ImageTensor<T>& target) {
    require_same_shape(pred, target, "l1_loss");
    LossValue<T> out{T(0), ImageTensor<T>(pred.height(), pred.width(), pred.channels())};
    const T inv_n = T(1) / static_cast<T>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred[i] - target[i];
        sum += std::abs(static_cast<double>(d));
        out.gradient[i] = d > T(0) ? inv_n : (d < T(0) ? -inv_n : T(0));
    }
    out.value = static_cast<T>(sum / static_cast<double>(pred.size()));
    return out;
}

template <typename T>
LossValue<T> l2_loss(const ImageTensor<T>& pred, const ImageTensor<T>& target) {
    require_same_shape(pred, target, "l2_loss");
    LossValue<T> out{T(0), ImageTensor<T>(pred.height(), pred.width(), pred.channels())};
    const T scale = T(2) / static_cast<T>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pred[i] - target[i];
        sum += static_cast<double>(d) * static_cast<double>(d);
        out.gradient[i] = scale * d;
    }
    out.value = static_cast<T>(sum / static_cast<double>(pred.size()));
    return out;
}

// ---------------------------------------------------------------------------
// SSIM

/// 2-D Gaussian kernel (size x size, row-major), outer product of normalized taps.
template <typename T = double>
Plane<T> gaussian_window(int size, double sigma) {
    const auto taps = gaussian_taps<double>(size, sigma);
    Plane<T> k(size, size);
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) k(i, j) = static_cast<T>(taps[i] * taps[j]);
    return k;
}

namespace detail {

template <typename T>
Plane<T> plane_of(const ImageTensor<T>& img, int ch) {
    Plane<T> p(img.height(), img.width());
    const int c = img.channels();
    for (std::size_t i = 0; i < img.pixels(); ++i) p.values[i] = img[i * c + ch];
    return p;
}

template <typename T>
Plane<T> product(const Plane<T>& a, const Plane<T>& b) {
    Plane<T> out(a.height, a.width);
    for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = a.values[i] * b.values[i];
    return out;
}

/// Gaussian-weighted first and second moments over every valid window.
template <typename T>
struct LocalMoments {
    Plane<T> mu_a, mu_b, e_aa, e_bb, e_ab;

    T var_a(std::size_t i) const { return e_aa.values[i] - mu_a.values[i] * mu_a.values[i]; }
    T var_b(std::size_t i) const { return e_bb.values[i] - mu_b.values[i] * mu_b.values[i]; }
    T cov(std::size_t i) const { return e_ab.values[i] - mu_a.values[i] * mu_b.values[i]; }
    std::size_t size() const { return mu_a.size(); }
};

template <typename T>
LocalMoments<T> local_moments(const Plane<T>& a, const Plane<T>& b, const std::vector<T>& taps) {
    return {valid_filter(a, taps), valid_filter(b, taps), valid_filter(product(a, a), taps),
            valid_filter(product(b, b), taps), valid_filter(product(a, b), taps)};
}

inline void require_ssim_extent(int h, int w, const SsimConfig& cfg, const char* what) {
    cfg.validate();
    if (h < cfg.window_size || w < cfg.window_size) {
        throw ShapeError(std::string(what) + ": image " + std::to_string(h) + "x" + std::to_string(w) +
                         " is smaller than the " + std::to_string(cfg.window_size) + "-pixel window");
    }
}

}  // namespace detail

/// Per-pixel SSIM over the valid extent, one channel per input channel.
template <typename T>
ImageTensor<T> ssim_map(const ImageTensor<T>& a, const ImageTensor<T>& b, const SsimConfig& cfg = {}) {
    require_same_shape(a, b, "ssim_map");
    detail::require_ssim_extent(a.height(), a.width(), cfg, "ssim_map");
    const auto taps = gaussian_taps<T>(cfg.window_size, cfg.window_sigma);
    const T c1 = static_cast<T>(cfg.c1());
    const T c2 = static_cast<T>(cfg.c2());
    const int vh = a.height() - cfg.window_size + 1;
    const int vw = a.width() - cfg.window_size + 1;
    ImageTensor<T> out(vh, vw, a.channels());
    for (int ch = 0; ch < a.channels(); ++ch) {
        const auto m = detail::local_moments(detail::plane_of(a, ch), detail::plane_of(b, ch), taps);
        for (std::size_t i = 0; i < m.size(); ++i) {
            const T ma = m.mu_a.values[i];
            const T mb = m.mu_b.values[i];
            const T num = (T(2) * ma * mb + c1) * (T(2) * m.cov(i) + c2);
            const T den = (ma * ma + mb * mb + c1) * (m.var_a(i) + m.var_b(i) + c2);
            out[i * a.channels() + ch] = num / den;
        }
    }
    return out;
}

template <typename T>
T mean_of(const ImageTensor<T>& img) {
    double s = 0.0;
    for (T v : img) s += static_cast<double>(v);
    return static_cast<T>(s / static_cast<double>(img.size()));
}

/// 1 - mean SSIM, with the analytic gradient with respect to `pred`.
template <typename T>
LossValue<T> ssim_loss(const ImageTensor<T>& pred, const ImageTensor<T>& target, const SsimConfig& cfg = {}) {
    require_same_shape(pred, target, "ssim_loss");
    detail::require_ssim_extent(pred.height(), pred.width(), cfg, "ssim_loss");
    const auto taps = gaussian_taps<T>(cfg.window_size, cfg.window_sigma);
    const T c1 = static_cast<T>(cfg.c1());
    const T c2 = static_cast<T>(cfg.c2());
    const int h = pred.height();
    const int w = pred.width();
    const int nch = pred.channels();
    const int vh = h - cfg.window_size + 1;
    const int vw = w - cfg.window_size + 1;
    const T inv_count = T(1) / static_cast<T>(static_cast<std::size_t>(vh) * vw * nch);

    LossValue<T> out{T(0), ImageTensor<T>(h, w, nch)};
    double ssim_sum = 0.0;
    for (int ch = 0; ch < nch; ++ch) {
        const auto a = detail::plane_of(pred, ch);
        const auto b = detail::plane_of(target, ch);
        const auto m = detail::local_moments(a, b, taps);
        // dS/d(mu_a), dS/d(E[a^2]), dS/d(E[ab]) treating the raw moments as independent
        Plane<T> g_mu(vh, vw), g_aa(vh, vw), g_ab(vh, vw);
        for (std::size_t i = 0; i < m.size(); ++i) {
            const T ma = m.mu_a.values[i];
            const T mb = m.mu_b.values[i];
            const T a1 = T(2) * ma * mb + c1;
            const T a2 = T(2) * m.cov(i) + c2;
            const T b1 = ma * ma + mb * mb + c1;
            const T b2 = m.var_a(i) + m.var_b(i) + c2;
            const T s = (a1 * a2) / (b1 * b2);
            ssim_sum += static_cast<double>(s);
            const T ds_dcov = T(2) * a1 / (b1 * b2);
            const T ds_dvar = -s / b2;
            const T ds_dmu_direct = T(2) * mb * a2 / (b1 * b2) - T(2) * ma * s / b1;
            g_mu.values[i] = ds_dmu_direct - mb * ds_dcov - T(2) * ma * ds_dvar;
            g_aa.values[i] = ds_dvar;
            g_ab.values[i] = ds_dcov;
        }
        const auto back_mu = valid_filter_adjoint(g_mu, taps, h, w);
        const auto back_aa = valid_filter_adjoint(g_aa, taps, h, w);
        const auto back_ab = valid_filter_adjoint(g_ab, taps, h, w);
        for (std::size_t p = 0; p < a.size(); ++p) {
            const T d = back_mu.values[p] + T(2) * a.values[p] * back_aa.values[p] + b.values[p] * back_ab.values[p];
            out.gradient[p * nch + ch] = -d * inv_count;
        }
    }
    out.value = static_cast<T>(1.0 - ssim_sum * static_cast<double>(inv_count));
    return out;
}

// ---------------------------------------------------------------------------
// mask-decoder losses

inline constexpr double kBceEpsilon = 1e-7;
inline constexpr double kDiceSmoothing = 1.0;

template <typename T>
LossValue<T> bce_loss(const ImageTensor<T>& pred_probs, const FaceMask<T>& target_mask) {
    require_same_shape(pred_probs, target_mask, "bce_loss");
    LossValue<T> out{T(0), ImageTensor<T>(pred_probs.height(), pred_probs.width(), pred_probs.channels())};
    const double eps = kBceEpsilon;
    const double inv_n = 1.0 / static_cast<double>(pred_probs.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred_probs.size(); ++i) {
        const double p_raw = static_cast<double>(pred_probs[i]);
        const double p = std::clamp(p_raw, eps, 1.0 - eps);
        const double t = static_cast<double>(target_mask[i]);
        sum -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
        const bool clamped = p_raw < eps || p_raw > 1.0 - eps;
        out.gradient[i] = clamped ? T(0) : static_cast<T>((-t / p + (1.0 - t) / (1.0 - p)) * inv_n);
    }
    out.value = static_cast<T>(sum * inv_n);
    return out;
}

template <typename T>
LossValue<T> dice_loss(const ImageTensor<T>& pred_probs, const FaceMask<T>& target_mask) {
    require_same_shape(pred_probs, target_mask, "dice_loss");
    LossValue<T> out{T(0), ImageTensor<T>(pred_probs.height(), pred_probs.width(), pred_probs.channels())};
    const double s = kDiceSmoothing;
    double inter = 0.0, sum_p = 0.0, sum_t = 0.0;
    for (std::size_t i = 0; i < pred_probs.size(); ++i) {
        const double p = pred_probs[i];
        const double t = target_mask[i];
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    const double num = 2.0 * inter + s;
    const double den = sum_p + sum_t + s;
    out.value = static_cast<T>(1.0 - num / den);
    for (std::size_t i = 0; i < pred_probs.size(); ++i) {
        const double t = target_mask[i];
        out.gradient[i] = static_cast<T>(-(2.0 * t * den - num) / (den * den));
    }
    return out;
}

// ---------------------------------------------------------------------------
// KL(q || N(0, I))

template <typename T>
KlValue<T> kl_diag_gaussian(const GaussianPosterior<T>& post) {
    if (post.mu.size() != post.logvar.size()) throw ShapeError("kl_diag_gaussian: mu and logvar differ in length");
    KlValue<T> out;
    out.grad_mu.resize(post.mu.size());
    out.grad_logvar.resize(post.mu.size());
    double sum = 0.0;
    for (std::size_t d = 0; d < post.mu.size(); ++d) {
        const double mu = post.mu[d];
        const double lv = post.logvar[d];
        const double ev = std::exp(lv);
        sum += ev + mu * mu - 1.0 - lv;
        out.grad_mu[d] = post.mu[d];
        out.grad_logvar[d] = static_cast<T>(0.5 * (ev - 1.0));
    }
    out.value = static_cast<T>(0.5 * sum);
    return out;
}

// ---------------------------------------------------------------------------
// reconstruction objective

/// Per-term breakdown of a composite reconstruction loss.
template <typename T>
struct ReconstructionLoss {
    LossValue<T> total;
    T ssim = T(0);
    T l1 = T(0);
    T l2 = T(0);
};

/// Weighted sum of the enabled losses. With a mask, every loss sees
/// composite(pred, reference, mask) against `reference`, so the gradient
/// with respect to `pred` is the composite-space gradient times the mask.
template <typename T>
ReconstructionLoss<T> composite_loss_terms(const ImageTensor<T>& pred, const ImageTensor<T>& reference,
                                           const FaceMask<T>* mask, const LossSelection& losses,
                                           const SsimConfig& ssim_cfg = {}) {
    if (!losses.any()) throw std::invalid_argument("composite_loss: no loss enabled");
    require_same_shape(pred, reference, "composite_loss");
    const ImageTensor<T> input = mask ? composite(pred, reference, *mask) : pred;

    ReconstructionLoss<T> out;
    out.total.gradient = ImageTensor<T>(pred.height(), pred.width(), pred.channels());
    auto& grad = out.total.gradient;
    double total = 0.0;
    auto accumulate = [&](const LossValue<T>& term, double weight) {
        total += weight * static_cast<double>(term.value);
        const T wt = static_cast<T>(weight);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += wt * term.gradient[i];
    };
    if (losses.ssim) {
        const auto term = ssim_loss(input, reference, ssim_cfg);
        out.ssim = term.value;
        accumulate(term, losses.ssim_weight);
    }
    if (losses.l1) {
        const auto term = l1_loss(input, reference);
        out.l1 = term.value;
        accumulate(term, losses.l1_weight);
    }
    if (losses.l2) {
        const auto term = l2_loss(input, reference);
        out.l2 = term.value;
        accumulate(term, losses.l2_weight);
    }
    if (mask) {
        const int c = grad.channels();
        for (std::size_t p = 0; p < grad.pixels(); ++p) {
            const T m = (*mask)[p];
            for (int k = 0; k < c; ++k) grad[p * c + k] *= m;
        }
    }
    out.total.value = static_cast<T>(total);
    return out;
}

template <typename T>
LossValue<T> composite_loss(const ImageTensor<T>& pred, const ImageTensor<T>& reference,
                            const std::optional<FaceMask<T>>& mask, const LossSelection& losses,
                            const SsimConfig& ssim_cfg = {}) {
    return composite_loss_terms(pred, reference, mask ? &*mask : nullptr, losses, ssim_cfg).total;
}

}  // namespace facemask
