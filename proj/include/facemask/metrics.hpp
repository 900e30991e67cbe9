#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "facemask/filter.hpp"
#include "facemask/image.hpp"
#include "facemask/losses.hpp"

namespace facemask {

// Full-reference image quality metrics. Everything here runs in double.

/// Mean SSIM, averaged over channels, with the default 11x11 window.
inline double ssim_index(const ImageTensor<double>& a, const ImageTensor<double>& b, const SsimConfig& cfg = {}) {
    return mean_of(ssim_map(a, b, cfg));
}

inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

/// Number of scales a min(h, w) extent supports, capped at 5.
inline int ms_ssim_scales(int height, int width, int window = 11) {
    int scales = 0;
    int extent = std::min(height, width);
    while (scales < 5 && extent >= window * (1 << scales)) ++scales;
    return scales;
}

/// The canonical weights truncated to `scales` entries and renormalized.
inline std::vector<double> ms_ssim_weights(int scales) {
    if (scales < 1 || scales > 5) throw std::invalid_argument("ms_ssim_weights: scales must be 1..5");
    std::vector<double> w(kMsSsimWeights.begin(), kMsSsimWeights.begin() + scales);
    double sum = 0.0;
    for (double v : w) sum += v;
    for (double& v : w) v /= sum;
    return w;
}

namespace detail {

/// 2x2 box mean followed by decimation; odd trailing rows/columns are dropped.
inline Plane<double> downsample2(const Plane<double>& in) {
    Plane<double> out(in.height / 2, in.width / 2);
    for (int r = 0; r < out.height; ++r)
        for (int c = 0; c < out.width; ++c)
            out(r, c) = 0.25 * (in(2 * r, 2 * c) + in(2 * r, 2 * c + 1) + in(2 * r + 1, 2 * c) + in(2 * r + 1, 2 * c + 1));
    return out;
}

struct SsimTerms {
    double luminance = 0.0;          // mean of l(x, y)
    double contrast_structure = 0.0; // mean of cs(x, y)
};

inline SsimTerms ssim_terms(const Plane<double>& a, const Plane<double>& b, const SsimConfig& cfg) {
    const auto taps = gaussian_taps<double>(cfg.window_size, cfg.window_sigma);
    const auto m = local_moments(a, b, taps);
    const double c1 = cfg.c1();
    const double c2 = cfg.c2();
    SsimTerms t;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double ma = m.mu_a.values[i];
        const double mb = m.mu_b.values[i];
        t.luminance += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        t.contrast_structure += (2.0 * m.cov(i) + c2) / (m.var_a(i) + m.var_b(i) + c2);
    }
    t.luminance /= static_cast<double>(m.size());
    t.contrast_structure /= static_cast<double>(m.size());
    return t;
}

inline double ms_ssim_plane(Plane<double> a, Plane<double> b, const SsimConfig& cfg, int scales) {
    const auto weights = ms_ssim_weights(scales);
    double result = 1.0;
    for (int s = 0; s < scales; ++s) {
        const auto t = ssim_terms(a, b, cfg);
        // negative cs/l would make fractional powers undefined
        result *= std::pow(std::max(t.contrast_structure, 0.0), weights[s]);
        if (s == scales - 1) {
            result *= std::pow(std::max(t.luminance, 0.0), weights[s]);
        } else {
            a = downsample2(a);
            b = downsample2(b);
        }
    }
    return result;
}

}  // namespace detail

/// Multi-scale SSIM: contrast-structure at every scale, luminance at the coarsest.
/// Uses as many of the five canonical scales as the image supports.
inline double ms_ssim(const ImageTensor<double>& a, const ImageTensor<double>& b, const SsimConfig& cfg = {}) {
    require_same_shape(a, b, "ms_ssim");
    cfg.validate();
    const int scales = ms_ssim_scales(a.height(), a.width(), cfg.window_size);
    if (scales < 1) throw ShapeError("ms_ssim: image " + a.shape_string() + " too small for a single scale");
    double sum = 0.0;
    for (int ch = 0; ch < a.channels(); ++ch) {
        sum += detail::ms_ssim_plane(detail::plane_of(a, ch), detail::plane_of(b, ch), cfg, scales);
    }
    return sum / a.channels();
}

/// BT.601 luma for RGB; single-channel input is returned as a plane.
inline Plane<double> luminance(const ImageTensor<double>& img) {
    if (img.channels() == 1) return detail::plane_of(img, 0);
    if (img.channels() != 3) throw ShapeError("luminance: expected 1 or 3 channels, got " + img.shape_string());
    Plane<double> out(img.height(), img.width());
    for (std::size_t p = 0; p < img.pixels(); ++p) {
        out.values[p] = 0.299 * img[3 * p] + 0.587 * img[3 * p + 1] + 0.114 * img[3 * p + 2];
    }
    return out;
}

inline constexpr int kVifScales = 4;

/// Smallest square extent the four-scale pixel-domain VIF accepts.
inline int vif_min_extent() {
    // scale s filters with N = 2^(5-s)+1 before decimating (s > 1) and again for statistics
    int need = 3;  // one valid 3x3 statistics window at the coarsest scale
    for (int s = kVifScales; s >= 2; --s) {
        const int n = (1 << (5 - s)) + 1;
        need = 2 * need + n - 1;
    }
    return std::max(need, (1 << 4) + 1);
}

/// Pixel-domain multiscale VIF. `reference` is the first argument; the metric
/// is not symmetric. Noise variance is 2 grey levels squared.
inline double vif_p(const ImageTensor<double>& reference, const ImageTensor<double>& distorted) {
    require_same_shape(reference, distorted, "vif_p");
    if (std::min(reference.height(), reference.width()) < vif_min_extent()) {
        throw ShapeError("vif_p: image " + reference.shape_string() + " too small for " +
                         std::to_string(kVifScales) + " scales (need " + std::to_string(vif_min_extent()) + ")");
    }
    constexpr double level = 1.0 / 255.0;
    const double sigma_nsq = 2.0 * level * level;
    const double tiny = 1e-10 * level * level;

    Plane<double> ref = luminance(reference);
    Plane<double> dist = luminance(distorted);
    double num = 0.0;
    double den = 0.0;
    for (int s = 1; s <= kVifScales; ++s) {
        const int n = (1 << (5 - s)) + 1;
        const auto taps = gaussian_taps<double>(n, n / 5.0);
        if (s > 1) {
            ref = valid_filter(ref, taps);
            dist = valid_filter(dist, taps);
            Plane<double> rd((ref.height + 1) / 2, (ref.width + 1) / 2);
            Plane<double> dd(rd.height, rd.width);
            for (int r = 0; r < rd.height; ++r)
                for (int c = 0; c < rd.width; ++c) {
                    rd(r, c) = ref(2 * r, 2 * c);
                    dd(r, c) = dist(2 * r, 2 * c);
                }
            ref = std::move(rd);
            dist = std::move(dd);
        }
        const auto m = detail::local_moments(ref, dist, taps);
        for (std::size_t i = 0; i < m.size(); ++i) {
            double s1 = std::max(m.var_a(i), 0.0);
            double s2 = std::max(m.var_b(i), 0.0);
            const double s12 = m.cov(i);
            double g = s12 / (s1 + tiny);
            double sv = s2 - g * s12;
            if (s1 < tiny) {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if (s2 < tiny) {
                g = 0.0;
                sv = 0.0;
            }
            if (g < 0.0) {
                sv = s2;
                g = 0.0;
            }
            sv = std::max(sv, tiny);
            num += std::log2(1.0 + g * g * s1 / (sv + sigma_nsq));
            den += std::log2(1.0 + s1 / sigma_nsq);
        }
    }
    // a flat reference carries no information; identical flat pairs count as perfect
    if (den <= 0.0) return num <= 0.0 ? 1.0 : 0.0;
    return num / den;
}

/// MAE on the 0-255 scale, multiplied by 10/255.
inline double l1_scaled(const ImageTensor<double>& a, const ImageTensor<double>& b) {
    require_same_shape(a, b, "l1_scaled");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] * 255.0 - b[i] * 255.0);
    return sum / static_cast<double>(a.size()) * 10.0 / 255.0;
}

/// RMSE on the 0-255 scale, multiplied by 10/255.
inline double l2_scaled(const ImageTensor<double>& a, const ImageTensor<double>& b) {
    require_same_shape(a, b, "l2_scaled");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] * 255.0 - b[i] * 255.0;
        sum += d * d;
    }
    return std::sqrt(sum / static_cast<double>(a.size())) * 10.0 / 255.0;
}

/// Turns a similarity whose maximum is 1 into a lower-is-better score.
constexpr double invert(double v) noexcept { return 1.0 - v; }

/// Per-image (or aggregated) scores, every column lower-is-better.
struct MetricReport {
    std::string image_id;
    double one_minus_ssim = 0.0;
    double one_minus_msssim = 0.0;
    double one_minus_vif = 0.0;
    double l1_scaled = 0.0;
    double l2_scaled = 0.0;

    static constexpr int kColumns = 5;
    static constexpr std::array<const char*, kColumns> column_names = {"1-ssim", "1-msssim", "1-vif", "l1", "l2"};

    std::array<double, kColumns> values() const {
        return {one_minus_ssim, one_minus_msssim, one_minus_vif, l1_scaled, l2_scaled};
    }
    static MetricReport from_values(std::string id, const std::array<double, kColumns>& v) {
        return {std::move(id), v[0], v[1], v[2], v[3], v[4]};
    }
};

/// Metrics on the prediction with its background replaced by the reference's.
inline MetricReport evaluate_pair(const ImageTensor<double>& predicted, const ImageTensor<double>& reference,
                                  const FaceMask<double>& mask, std::string image_id = {}) {
    require_same_shape(predicted, reference, "evaluate_pair");
    const auto face_only = composite(predicted, reference, mask);
    MetricReport r;
    r.image_id = std::move(image_id);
    r.one_minus_ssim = invert(ssim_index(face_only, reference));
    r.one_minus_msssim = invert(ms_ssim(face_only, reference));
    r.one_minus_vif = invert(vif_p(reference, face_only));
    r.l1_scaled = l1_scaled(face_only, reference);
    r.l2_scaled = l2_scaled(face_only, reference);
    return r;
}

/// Column-wise arithmetic mean, summed in list order.
inline MetricReport aggregate(const std::vector<MetricReport>& reports, std::string id = "MEAN") {
    if (reports.empty()) throw std::invalid_argument("aggregate: empty report list");
    std::array<double, MetricReport::kColumns> sum{};
    for (const auto& r : reports) {
        const auto v = r.values();
        for (int k = 0; k < MetricReport::kColumns; ++k) sum[k] += v[k];
    }
    for (double& v : sum) v /= static_cast<double>(reports.size());
    return MetricReport::from_values(std::move(id), sum);
}

// ---------------------------------------------------------------------------
// CSV: image_id,1-ssim,1-msssim,1-vif,l1,l2 with six decimals

inline std::string metrics_csv_header() { return "image_id,1-ssim,1-msssim,1-vif,l1,l2"; }

inline std::string metrics_csv_row(const MetricReport& r) {
    std::ostringstream os;
    os << r.image_id << std::fixed << std::setprecision(6);
    for (double v : r.values()) os << ',' << v;
    return os.str();
}

/// Writes one row per report followed by the MEAN row.
inline void write_metrics_csv(std::ostream& os, const std::vector<MetricReport>& reports) {
    os << metrics_csv_header() << '\n';
    for (const auto& r : reports) os << metrics_csv_row(r) << '\n';
    os << metrics_csv_row(aggregate(reports)) << '\n';
}

inline std::vector<MetricReport> read_metrics_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line != metrics_csv_header()) throw DataError("metrics CSV: unexpected header");
    std::vector<MetricReport> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string id, cell;
        std::getline(ls, id, ',');
        std::array<double, MetricReport::kColumns> v{};
        for (int k = 0; k < MetricReport::kColumns; ++k) {
            if (!std::getline(ls, cell, ',')) throw DataError("metrics CSV: short row '" + line + "'");
            v[k] = std::stod(cell);
        }
        rows.push_back(MetricReport::from_values(id, v));
    }
    return rows;
}

}  // namespace facemask
