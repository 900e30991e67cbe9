#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "facemask/hypothesis.hpp"
#include "facemask/layers.hpp"
#include "facemask/losses.hpp"
#include "facemask/vae.hpp"

namespace facemask {

/// Finite-difference verification of every analytic gradient in the library,
/// in double precision.
struct GradcheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Relative errors use max(|analytic|, |numeric|, floor) as denominator,
    /// so entries at round-off level do not dominate.
    double floor = 1e-6;
    std::uint64_t seed = 11;
    /// Component whose analytic gradient is deliberately corrupted (test fixture).
    std::string inject;
};

struct GradcheckEntry {
    std::string name;
    std::string kind;  // "loss", "layer" or "model"
    std::size_t checked = 0;
    double max_rel_error = 0.0;
    bool passed = false;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double tolerance = 0.0;
    bool passed() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
    }
};

inline std::vector<std::string> gradcheck_components() {
    return {"l1",          "l2",          "ssim",  "bce",   "dice",    "kl",  "composite",
            "conv_stride2", "conv_stride1", "upsample_conv", "dense", "elu", "sigmoid", "vae_end_to_end"};
}

namespace detail {

/// Compares `analytic` against central differences of `f` with respect to x[0..n).
inline double fd_max_rel_error(double* x, std::size_t n, const double* analytic, const std::function<double()>& f,
                               const GradcheckOptions& opt) {
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double keep = x[i];
        x[i] = keep + opt.step;
        const double up = f();
        x[i] = keep - opt.step;
        const double down = f();
        x[i] = keep;
        const double numeric = (up - down) / (2.0 * opt.step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), opt.floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

/// Scales the largest-magnitude entry by 1.01.
inline void corrupt(std::vector<double>& g) {
    if (g.empty()) return;
    auto it = std::max_element(g.begin(), g.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    *it = *it == 0.0 ? 1e-3 : *it * 1.01;
}

class GradcheckRun {
public:
    explicit GradcheckRun(const GradcheckOptions& opt) : opt_(opt), rng_(opt.seed) {}

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

    ImageTensor<double> random_image(int h, int w, int c, double lo = 0.05, double hi = 0.95) {
        ImageTensor<double> img(h, w, c);
        for (auto& v : img) v = uniform(lo, hi);
        return img;
    }
    FaceMask<double> random_mask(int h, int w) {
        FaceMask<double> m(h, w, 1);
        for (auto& v : m) v = uniform(0.0, 1.0) < 0.6 ? 1.0 : 0.0;
        return m;
    }
    nn::Matrix<double> random_matrix(Eigen::Index r, Eigen::Index c, double scale = 1.0) {
        nn::Matrix<double> m(r, c);
        for (Eigen::Index j = 0; j < c; ++j)
            for (Eigen::Index i = 0; i < r; ++i) m(i, j) = uniform(-scale, scale);
        return m;
    }

    /// One block of variables checked against `f`; `analytic` is the claimed gradient.
    struct Block {
        double* x;
        std::size_t n;
        std::vector<double> analytic;
    };

    void record(const std::string& name, const std::string& kind, std::vector<Block> blocks,
                const std::function<double()>& f) {
        GradcheckEntry e{name, kind, 0, 0.0, false};
        if (opt_.inject == name && !blocks.empty()) corrupt(blocks.front().analytic);
        for (auto& b : blocks) {
            e.checked += b.n;
            e.max_rel_error = std::max(e.max_rel_error, fd_max_rel_error(b.x, b.n, b.analytic.data(), f, opt_));
        }
        e.passed = e.max_rel_error < opt_.tolerance;
        report_.entries.push_back(e);
    }

    GradcheckReport finish() {
        report_.tolerance = opt_.tolerance;
        return report_;
    }

    const GradcheckOptions& options() const { return opt_; }

private:
    GradcheckOptions opt_;
    std::mt19937_64 rng_;
    GradcheckReport report_;
};

inline std::vector<double> to_vec(const ImageTensor<double>& g) { return g.data(); }
inline std::vector<double> to_vec(const nn::Matrix<double>& m) { return {m.data(), m.data() + m.size()}; }
inline std::vector<double> to_vec(const nn::Vector<double>& v) { return {v.data(), v.data() + v.size()}; }

inline void check_losses(GradcheckRun& run) {
    {
        // keep |pred - target| away from the kink at zero
        auto target = run.random_image(6, 5, 3, 0.2, 0.8);
        auto pred = target;
        for (auto& v : pred) v += (run.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * run.uniform(0.02, 0.15);
        const auto g = l1_loss(pred, target).gradient;
        run.record("l1", "loss", {{pred.data().data(), pred.size(), to_vec(g)}},
                   [&] { return l1_loss(pred, target).value; });
    }
    {
        auto pred = run.random_image(6, 5, 3);
        const auto target = run.random_image(6, 5, 3);
        const auto g = l2_loss(pred, target).gradient;
        run.record("l2", "loss", {{pred.data().data(), pred.size(), to_vec(g)}},
                   [&] { return l2_loss(pred, target).value; });
    }
    {
        auto pred = run.random_image(14, 13, 3);
        const auto target = run.random_image(14, 13, 3);
        const auto g = ssim_loss(pred, target).gradient;
        run.record("ssim", "loss", {{pred.data().data(), pred.size(), to_vec(g)}},
                   [&] { return ssim_loss(pred, target).value; });
    }
    {
        auto probs = run.random_image(7, 6, 1);
        const auto mask = run.random_mask(7, 6);
        const auto g = bce_loss(probs, mask).gradient;
        run.record("bce", "loss", {{probs.data().data(), probs.size(), to_vec(g)}},
                   [&] { return bce_loss(probs, mask).value; });
    }
    {
        auto probs = run.random_image(7, 6, 1);
        const auto mask = run.random_mask(7, 6);
        const auto g = dice_loss(probs, mask).gradient;
        run.record("dice", "loss", {{probs.data().data(), probs.size(), to_vec(g)}},
                   [&] { return dice_loss(probs, mask).value; });
    }
    {
        GaussianPosterior<double> post;
        for (int d = 0; d < 6; ++d) {
            post.mu.push_back(run.uniform(-1.5, 1.5));
            post.logvar.push_back(run.uniform(-2.0, 1.0));
        }
        const auto kl = kl_diag_gaussian(post);
        run.record("kl", "loss",
                   {{post.mu.data(), post.mu.size(), kl.grad_mu}, {post.logvar.data(), post.logvar.size(), kl.grad_logvar}},
                   [&] { return kl_diag_gaussian(post).value; });
    }
    {
        const auto reference = run.random_image(13, 12, 3, 0.2, 0.8);
        auto pred = reference;
        for (auto& v : pred) v += (run.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0) * run.uniform(0.02, 0.15);
        const auto mask = run.random_mask(13, 12);
        LossSelection sel{true, true, true};
        sel.ssim_weight = 0.7;
        sel.l1_weight = 1.3;
        sel.l2_weight = 0.4;
        const auto g = composite_loss_terms(pred, reference, &mask, sel).total.gradient;
        run.record("composite", "loss", {{pred.data().data(), pred.size(), to_vec(g)}},
                   [&] { return composite_loss_terms(pred, reference, &mask, sel).total.value; });
    }
}

/// Random-projection check of a layer: L = <forward(...), R>.
inline void check_layers(GradcheckRun& run) {
    using M = nn::Matrix<double>;
    using V = nn::Vector<double>;
    auto feature_map = [&](int c, int b, int h, int w) {
        nn::FeatureMap<double> fm(c, b, h, w);
        fm.data = run.random_matrix(fm.data.rows(), c);
        return fm;
    };
    auto dot = [](const M& a, const M& b) { return a.cwiseProduct(b).sum(); };

    auto conv_case = [&](const std::string& name, int stride, std::vector<std::pair<int, int>> channel_pairs) {
        std::vector<GradcheckRun::Block> blocks;
        // keep every case alive while the checks run
        struct Case {
            nn::FeatureMap<double> in;
            M w;
            V b;
            M r;
        };
        std::vector<Case> cases;
        cases.reserve(channel_pairs.size());
        for (auto [cin, cout] : channel_pairs) {
            Case c{feature_map(cin, 2, 7, 6), run.random_matrix(9 * cin, cout), run.random_matrix(cout, 1), M()};
            const auto out = nn::conv3x3_forward<double>(c.in, c.w, c.b, stride);
            c.r = run.random_matrix(out.data.rows(), out.data.cols());
            cases.push_back(std::move(c));
        }
        for (auto& c : cases) {
            nn::FeatureMap<double> g;
            g.data = c.r;
            g.batch = c.in.batch;
            g.height = nn::conv_output_extent(c.in.height, stride);
            g.width = nn::conv_output_extent(c.in.width, stride);
            M gw = M::Zero(c.w.rows(), c.w.cols());
            V gb = V::Zero(c.b.size());
            const auto gi = nn::conv3x3_backward<double>(c.in, c.w, stride, g, gw, gb);
            blocks.push_back({c.in.data.data(), std::size_t(c.in.data.size()), to_vec(gi.data)});
            blocks.push_back({c.w.data(), std::size_t(c.w.size()), to_vec(gw)});
            blocks.push_back({c.b.data(), std::size_t(c.b.size()), to_vec(gb)});
        }
        run.record(name, "layer", std::move(blocks), [&] {
            double s = 0.0;
            for (auto& c : cases) s += dot(nn::conv3x3_forward<double>(c.in, c.w, c.b, stride).data, c.r);
            return s;
        });
    };
    // both channel orderings exercise the two stride-1 evaluation strategies
    conv_case("conv_stride2", 2, {{3, 4}, {4, 2}});
    conv_case("conv_stride1", 1, {{3, 4}, {4, 2}});

    {
        struct Case {
            nn::FeatureMap<double> in;
            M w;
            V b;
            M r;
        };
        std::vector<Case> cases;
        for (auto [cin, cout] : std::vector<std::pair<int, int>>{{3, 4}, {4, 2}}) {
            Case c{feature_map(cin, 2, 4, 3), run.random_matrix(9 * cin, cout), run.random_matrix(cout, 1), M()};
            c.r = run.random_matrix(Eigen::Index(2) * 8 * 6, cout);
            cases.push_back(std::move(c));
        }
        std::vector<GradcheckRun::Block> blocks;
        for (auto& c : cases) {
            nn::FeatureMap<double> g;
            g.data = c.r;
            g.batch = 2;
            g.height = 8;
            g.width = 6;
            M gw = M::Zero(c.w.rows(), c.w.cols());
            V gb = V::Zero(c.b.size());
            const auto gi = nn::upconv3x3_backward<double>(c.in, c.w, g, gw, gb);
            blocks.push_back({c.in.data.data(), std::size_t(c.in.data.size()), to_vec(gi.data)});
            blocks.push_back({c.w.data(), std::size_t(c.w.size()), to_vec(gw)});
            blocks.push_back({c.b.data(), std::size_t(c.b.size()), to_vec(gb)});
        }
        run.record("upsample_conv", "layer", std::move(blocks), [&] {
            double s = 0.0;
            for (auto& c : cases) s += dot(nn::upconv3x3_forward<double>(c.in, c.w, c.b).data, c.r);
            return s;
        });
    }
    {
        M x = run.random_matrix(3, 5);
        M w = run.random_matrix(5, 4);
        V b = run.random_matrix(4, 1);
        const M r = run.random_matrix(3, 4);
        M gw = M::Zero(5, 4);
        V gb = V::Zero(4);
        const M gx = nn::dense_backward<double>(x, w, r, gw, gb);
        run.record("dense", "layer",
                   {{x.data(), std::size_t(x.size()), to_vec(gx)},
                    {w.data(), std::size_t(w.size()), to_vec(gw)},
                    {b.data(), std::size_t(b.size()), to_vec(gb)}},
                   [&] { return dot(nn::dense_forward<double>(x, w, b), r); });
    }
    {
        M x = run.random_matrix(6, 5, 2.0);
        for (Eigen::Index i = 0; i < x.size(); ++i)
            if (std::abs(x.data()[i]) < 1e-2) x.data()[i] = 0.5;  // away from the kink
        const M r = run.random_matrix(6, 5);
        const M gx = nn::elu_backward<double>(nn::elu_forward<double>(x), r);
        run.record("elu", "layer", {{x.data(), std::size_t(x.size()), to_vec(gx)}},
                   [&] { return dot(nn::elu_forward<double>(x), r); });
    }
    {
        M x = run.random_matrix(6, 5, 4.0);
        const M r = run.random_matrix(6, 5);
        const M gx = nn::sigmoid_backward<double>(nn::sigmoid_forward<double>(x), r);
        run.record("sigmoid", "layer", {{x.data(), std::size_t(x.size()), to_vec(gx)}},
                   [&] { return dot(nn::sigmoid_forward<double>(x), r); });
    }
}

/// Full objective (both decoders, reparameterization, KL) on a 2-image 16x16 micro-model.
inline void check_model(GradcheckRun& run) {
    Architecture arch;
    arch.resolution = 16;
    arch.latent_dim = 3;
    arch.encoder_channels = {3, 4, 4};
    arch.decoder_channels = {4, 3, 3};
    auto params = init_params<double>(run.options().seed, arch);
    // non-zero biases so every bias gradient is exercised away from trivial points
    for (std::size_t i = 1; i < params.tensors().size(); i += 2)
        for (Eigen::Index k = 0; k < params.tensors()[i].value.size(); ++k) params.tensors()[i].value[k] = run.uniform(-0.2, 0.2);

    Batch<double> batch;
    for (int b = 0; b < 2; ++b) {
        batch.images.push_back(run.random_image(16, 16, 3));
        batch.masks.push_back(run.random_mask(16, 16));
    }
    const nn::Matrix<double> noise = run.random_matrix(2, arch.latent_dim);
    // SSIM + l2 with the mask: smooth everywhere, and both decoders are live
    ObjectiveConfig cfg{hypothesis("H9"), 0.1, SsimConfig{}};

    VaeParams<double> grads(arch);
    compute_gradients(params, batch, noise, cfg, grads);
    VaeParams<double> scratch(arch);
    std::vector<GradcheckRun::Block> blocks;
    for (std::size_t i = 0; i < params.tensors().size(); ++i) {
        auto& t = params.tensors()[i];
        blocks.push_back({t.value.data(), std::size_t(t.value.size()), to_vec(grads.tensors()[i].value)});
    }
    run.record("vae_end_to_end", "model", std::move(blocks),
               [&] { return compute_gradients(params, batch, noise, cfg, scratch).total; });
}

}  // namespace detail

inline GradcheckReport run_gradcheck(const GradcheckOptions& opt = {}) {
    detail::GradcheckRun run(opt);
    detail::check_losses(run);
    detail::check_layers(run);
    detail::check_model(run);
    return run.finish();
}

inline void print_gradcheck(std::ostream& os, const GradcheckReport& report) {
    os << std::left << std::setw(16) << "component" << std::setw(7) << "kind" << std::right << std::setw(8) << "entries"
       << std::setw(14) << "max_rel_err" << "  status\n";
    for (const auto& e : report.entries) {
        os << std::left << std::setw(16) << e.name << std::setw(7) << e.kind << std::right << std::setw(8) << e.checked
           << std::setw(14) << std::scientific << std::setprecision(3) << e.max_rel_error << std::defaultfloat << "  "
           << (e.passed ? "PASS" : "FAIL") << '\n';
    }
    os << (report.passed() ? "grad-check passed" : "grad-check FAILED") << " (tolerance " << report.tolerance << ")\n";
}

}  // namespace facemask
