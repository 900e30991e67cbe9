// Acceptance run: one PASS/FAIL line per criterion.
// usage: acceptance WORKDIR [criterion ...]

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "facemask/ablation.hpp"
#include "facemask/metrics.hpp"
#include "facemask/synthface.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace facemask;
using synth::generate_dataset;

namespace {

const std::string bin = FACEVAE_BIN;

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Outcome gradient_check() {
    const auto t0 = Clock::now();
    const auto out = testsupport::capture(bin + " grad-check");
    const double secs = seconds_since(t0);
    const bool ok = out.find("grad-check passed") != std::string::npos;
    double worst = 0.0;
    std::istringstream is(out);
    for (std::string line; std::getline(is, line);) {
        std::istringstream ls(line);
        std::string name, kind, status;
        std::size_t n = 0;
        double err = 0.0;
        if (ls >> name >> kind >> n >> err >> status) worst = std::max(worst, err);
    }
    return {ok && worst < 1e-4 && secs < 300.0,
            "max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome ssim_oracle() {
    std::mt19937_64 rng(2024);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto a = testsupport::random_image(rng, 32, 32, 3);
        const auto b = testsupport::noisy_copy(rng, a, 0.05 + 0.01 * (i % 30));
        worst = std::max(worst, std::abs(ssim_index(a, b) - testsupport::brute_force_ssim(a, b)));
    }
    return {worst <= 1e-8, "max |diff| " + fmt("%.2e", worst) + " over 100 pairs"};
}

Outcome metric_identities() {
    std::mt19937_64 rng(5);
    double worst = 0.0;
    std::vector<ImageTensor<double>> images;
    for (int i = 0; i < 10; ++i) images.push_back(testsupport::random_image(rng, 48, 48, 3));
    images.emplace_back(48, 48, 3, 0.4);
    for (const auto& a : images) {
        const auto r = evaluate_pair(a, a, FaceMask<double>(48, 48, 1, 1.0), "self");
        for (double v : r.values()) worst = std::max(worst, std::abs(v));
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int order_fail = 0;
    double involution = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const double v = u(rng);
        involution = std::max(involution, std::abs(invert(invert(v)) - v));
        const auto a = testsupport::random_image(rng, 8, 8, 3);
        const auto b = testsupport::random_image(rng, 8, 8, 3);
        if (l1_scaled(a, b) > l2_scaled(a, b)) ++order_fail;
    }
    // 1 - (1 - v) is exact up to one rounding
    return {worst <= 1e-6 && involution <= std::numeric_limits<double>::epsilon() && order_fail == 0,
            "identity max " + fmt("%.2e", worst) + ", involution max |diff| " + fmt("%.1e", involution) +
                ", MAE>RMSE " + std::to_string(order_fail)};
}

Outcome reporting_convention() {
    const std::string shown = fmt("%.3f", invert(0.693));
    std::mt19937_64 rng(9);
    std::uniform_int_distribution<int> level(0, 229);
    ImageTensor<double> a(48, 48, 3), b(48, 48, 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = level(rng) / 255.0;
        b[i] = a[i] + 25.5 / 255.0;
    }
    const double l1 = l1_scaled(b, a), l2 = l2_scaled(b, a);
    return {shown == "0.307" && std::abs(l1 - 1.0) <= 1e-12 && std::abs(l2 - 1.0) <= 1e-12,
            "invert(0.693) -> " + shown + ", l1 " + fmt("%.15f", l1) + ", l2 " + fmt("%.15f", l2)};
}

Outcome mask_insensitivity() {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double ln_worst = 0.0, ssim_worst = 0.0;
    int cases = 0;
    for (const auto& h : hypothesis_table()) {
        if (!h.use_mask) continue;
        for (int trial = 0; trial < 20; ++trial) {
            const auto ref = testsupport::random_image(rng, 48, 48, 3);
            const auto pred = testsupport::noisy_copy(rng, ref, 0.3);
            const auto mask = testsupport::random_mask(rng, 48, 48);
            auto moved = pred;
            for (std::size_t p = 0; p < mask.size(); ++p)
                if (mask[p] == 0.0)
                    for (int c = 0; c < 3; ++c) moved[3 * p + c] = u(rng);
            const auto x = composite_loss_terms(pred, ref, &mask, h.losses);
            const auto y = composite_loss_terms(moved, ref, &mask, h.losses);
            double grad_diff = 0.0;
            for (std::size_t i = 0; i < x.total.gradient.size(); ++i)
                grad_diff = std::max(grad_diff, std::abs(x.total.gradient[i] - y.total.gradient[i]));
            const double value_diff = std::abs(x.total.value - y.total.value);
            if (h.losses.ssim)
                ssim_worst = std::max({ssim_worst, value_diff, grad_diff});
            else
                ln_worst = std::max({ln_worst, value_diff, grad_diff});
            ++cases;
        }
    }
    return {ln_worst == 0.0 && ssim_worst <= 1e-12, std::to_string(cases) + " cases, l_n-only max diff " +
                                                        fmt("%.1e", ln_worst) + ", with SSIM " +
                                                        fmt("%.1e", ssim_worst)};
}

struct TrainingRuns {
    // seed-1 loss curves per hypothesis, filled by criteria 6 and 7
    std::map<int, std::vector<LossBreakdown>> curves;
};

Outcome directional_ablation(const fs::path& work, TrainingRuns& runs) {
    const auto data = work / "c6_data";
    fs::remove_all(data);
    generate_dataset(2200, 7, data, 48, {10.0 / 11.0, 0.0, 1.0 / 11.0});
    AblationPlan plan;
    plan.hypotheses = {3, 4, 7, 8};
    plan.seeds = {1, 2, 3};
    plan.base.epochs = 20;
    plan.base.steps_per_epoch = 200;
    const auto out = work / "c6_ablation";
    fs::remove_all(out);
    const auto t0 = Clock::now();
    const auto result = run_ablation(
        data, plan, out, [](const std::string& msg) { std::fprintf(stderr, "%s\n", msg.c_str()); },
        [&](int id, std::uint64_t seed, const TrainResult& r) {
            if (seed == 1) runs.curves[id] = r.steps;
        });
    const double minutes = seconds_since(t0) / 60.0;
    write_ablation(out, result);
    std::cerr << format_report(result, build_report(result));

    const auto& h3 = result.find(3)->mean;
    const auto& h4 = result.find(4)->mean;
    const auto& h7 = result.find(7)->mean;
    const auto& h8 = result.find(8)->mean;
    const bool ok = h3.one_minus_ssim < h4.one_minus_ssim && h3.l1_scaled < h4.l1_scaled &&
                    h7.one_minus_ssim < h8.one_minus_ssim && h7.l1_scaled < h8.l1_scaled && minutes < 60.0;
    return {ok, "1-SSIM H3 " + fmt("%.4f", h3.one_minus_ssim) + " vs H4 " + fmt("%.4f", h4.one_minus_ssim) +
                    ", H7 " + fmt("%.4f", h7.one_minus_ssim) + " vs H8 " + fmt("%.4f", h8.one_minus_ssim) +
                    "; l1 H3 " + fmt("%.4f", h3.l1_scaled) + " vs H4 " + fmt("%.4f", h4.l1_scaled) + ", H7 " +
                    fmt("%.4f", h7.l1_scaled) + " vs H8 " + fmt("%.4f", h8.l1_scaled) + "; " +
                    fmt("%.1f", minutes) + " min"};
}

Outcome training_sanity(const fs::path& work, TrainingRuns& runs) {
    const auto data = work / "c6_data";
    if (!fs::exists(data / "manifest.json")) generate_dataset(2200, 7, data, 48, {10.0 / 11.0, 0.0, 1.0 / 11.0});
    const auto train_set = load_split<float>(data, "train", 48, true);
    for (const auto& h : hypothesis_table()) {
        if (runs.curves.count(h.id)) continue;
        TrainConfig cfg;
        cfg.epochs = 10;
        cfg.steps_per_epoch = 200;
        cfg.hypothesis = h;
        cfg.seed = 1;
        std::fprintf(stderr, "training %s for 2000 steps\n", h.name().c_str());
        runs.curves[h.id] = train(train_set, cfg).steps;
    }
    std::vector<std::string> failed;
    std::ostringstream ratios;
    for (const auto& [id, steps] : runs.curves) {
        const double early = moving_average_total(steps, 200, 100);
        const double late = moving_average_total(steps, 2000, 100);
        const bool kl_ok = std::all_of(steps.begin(), steps.end(),
                                       [](const LossBreakdown& s) { return std::isfinite(s.kl) && s.kl > 0.0; });
        if (!(late < early) || !kl_ok) failed.push_back("H" + std::to_string(id));
        ratios << " H" << id << ' ' << fmt("%.3f", late / early);
    }
    std::string detail = "MA100(2000)/MA100(200):" + ratios.str();
    if (!failed.empty()) {
        detail += "; failing:";
        for (const auto& f : failed) detail += " " + f;
    }
    return {failed.empty() && runs.curves.size() == 10, detail};
}

Outcome determinism(const fs::path& work) {
    std::string hashes[2];
    std::string checkpoints[2];
    for (int i = 0; i < 2; ++i) {
        const auto data = work / ("c8_data_" + std::to_string(i));
        const auto runs = work / ("c8_runs_" + std::to_string(i));
        fs::remove_all(data);
        fs::remove_all(runs);
        const auto out = testsupport::capture(bin + " gen-data --n 200 --seed 7 --out " + q(data));
        const auto at = out.find("manifest hash ");
        if (at != std::string::npos) hashes[i] = out.substr(at, out.find('\n', at) - at);
        testsupport::run(bin + " train --hyp H9 --seed 7 --epochs 2 --steps 50 --data " + q(data) + " --out " +
                         q(runs));
        checkpoints[i] = slurp(runs / "H9" / "checkpoint.bin");
    }
    const bool ok = !hashes[0].empty() && hashes[0] == hashes[1] && !checkpoints[0].empty() &&
                    checkpoints[0] == checkpoints[1];
    return {ok, hashes[0] + (hashes[0] == hashes[1] ? " (equal)" : " (differs)") + ", checkpoints of " +
                    std::to_string(checkpoints[0].size()) + " bytes " +
                    (checkpoints[0] == checkpoints[1] ? "identical" : "differ")};
}

Outcome reparameterization() {
    const GaussianPosterior<double> post{{0.3}, {-1.0}};
    std::mt19937_64 rng(99);
    std::normal_distribution<double> normal(0.0, 1.0);
    const int n = 100000;
    std::vector<double> z(n);
    double sum = 0.0;
    for (auto& v : z) {
        v = reparameterize(post, {normal(rng)}).z[0];
        sum += v;
    }
    const double mean = sum / n;
    double ss = 0.0;
    for (double v : z) ss += (v - mean) * (v - mean);
    const double var = ss / (n - 1);
    const double sigma2 = std::exp(-1.0);
    const double se_mean = std::sqrt(sigma2 / n);
    const double se_var = sigma2 * std::sqrt(2.0 / (n - 1));
    const double zm = (mean - 0.3) / se_mean, zv = (var - sigma2) / se_var;
    return {std::abs(zm) < 3.0 && std::abs(zv) < 3.0,
            "mean " + fmt("%.5f", mean) + " (" + fmt("%+.2f", zm) + " se), var " + fmt("%.5f", var) + " (" +
                fmt("%+.2f", zv) + " se)"};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: acceptance WORKDIR [criterion ...]\n";
        return 1;
    }
    retain_freed_memory();
    const fs::path work = argv[1];
    fs::create_directories(work);
    std::set<int> selected;
    for (int i = 2; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    auto wanted = [&](int n) { return selected.empty() || selected.count(n); };

    TrainingRuns runs;
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"gradient check", gradient_check},
        {"SSIM oracle", ssim_oracle},
        {"metric identities", metric_identities},
        {"reporting convention", reporting_convention},
        {"mask insensitivity", mask_insensitivity},
        {"directional ablation", [&] { return directional_ablation(work, runs); }},
        {"training sanity", [&] { return training_sanity(work, runs); }},
        {"determinism", [&] { return determinism(work); }},
        {"reparameterization", reparameterization},
    };
    std::ofstream summary(work / "acceptance.txt", std::ios::trunc);
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = int(i) + 1;
        if (!wanted(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::ostringstream line;
        line << (o.pass ? "PASS" : "FAIL") << " [" << n << "] " << criteria[i].first << ": " << o.detail << '\n';
        std::cout << line.str() << std::flush;
        summary << line.str() << std::flush;
    }
    return failures == 0 ? 0 : 1;
}
