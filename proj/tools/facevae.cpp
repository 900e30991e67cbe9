// facevae: dataset generation, training, evaluation and the hypothesis ablation.
//
// Exit codes: 0 ok, 1 usage, 2 data, 3 verification failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "facemask/ablation.hpp"
#include "facemask/checkpoint.hpp"
#include "facemask/dataset.hpp"
#include "facemask/gradcheck.hpp"
#include "facemask/metrics.hpp"
#include "facemask/synthface.hpp"
#include "facemask/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace facemask;
using synth::generate_dataset;
using synth::SplitFractions;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kVerify = 3 };

class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

void write_json(const fs::path& path, const json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

// Training flags shared by train and ablate. Unset flags leave the config
// file (or the built-in default) in place.
struct TrainFlags {
    std::string config;
    std::optional<int> epochs, steps, batch, resolution;
    std::optional<double> lr, clip_norm, kl_weight;
    std::optional<std::uint64_t> seed;

    void attach(CLI::App* app) {
        app->add_option("--config", config, "JSON file with training settings")->check(CLI::ExistingFile);
        app->add_option("--epochs", epochs, "epochs");
        app->add_option("--steps", steps, "steps per epoch");
        app->add_option("--batch", batch, "batch size");
        app->add_option("--lr", lr, "Adam learning rate");
        app->add_option("--clip-norm", clip_norm, "global gradient-norm clip");
        app->add_option("--kl-weight", kl_weight, "weight of the KL term");
        app->add_option("--resolution", resolution, "image side in pixels");
        app->add_option("--seed", seed, "run seed");
    }

    TrainConfig resolve(const std::optional<std::string>& hyp) const {
        TrainConfig c;
        if (!config.empty()) {
            std::ifstream is(config);
            json j;
            try {
                j = json::parse(is);
            } catch (const json::exception& e) {
                throw UsageError("config " + config + ": " + e.what());
            }
            apply_json(c, j);
        }
        if (epochs) c.epochs = *epochs;
        if (steps) c.steps_per_epoch = *steps;
        if (batch) c.batch_size = *batch;
        if (lr) c.learning_rate = *lr;
        if (clip_norm) c.clip_norm = *clip_norm;
        if (kl_weight) c.kl_weight = *kl_weight;
        if (resolution) c.resolution = *resolution;
        if (seed) c.seed = *seed;
        if (hyp) c.hypothesis = hypothesis(*hyp);
        c.validate();
        return c;
    }
};

void print_epoch(const std::string& tag, const TrainConfig& cfg, const EpochLog& e) {
    std::fprintf(stderr, "%s epoch %d/%d step %lld total %.5f recon %.5f kl %.4f (%.1fs)\n", tag.c_str(), e.epoch,
                 cfg.epochs, static_cast<long long>(e.step), e.mean.total, e.mean.recon, e.mean.kl, e.seconds);
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
    int n = 2000;
    std::uint64_t seed = 7;
    std::string out = "data";
    int resolution = 48;
    std::string fractions = "0.8,0.1,0.1";
};

int cmd_gen_data(const GenDataArgs& a) {
    const auto parts = split_list(a.fractions);
    if (parts.size() != 3) throw UsageError("--fractions expects train,val,test");
    SplitFractions f;
    try {
        f = {std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
    } catch (const std::exception&) {
        throw UsageError("--fractions: not a number in '" + a.fractions + "'");
    }
    f.validate();
    const auto m = generate_dataset(a.n, a.seed, a.out, a.resolution, f);
    write_json(fs::path(a.out) / "config.json", {{"command", "gen-data"},
                                                 {"n", a.n},
                                                 {"seed", a.seed},
                                                 {"resolution", a.resolution},
                                                 {"fractions", {f.train, f.val, f.test}}});
    std::cout << "wrote " << m.n << " images to " << a.out << " (train " << m.counts.train << ", val " << m.counts.val
              << ", test " << m.counts.test << ")\nmanifest hash " << m.content_hash << '\n';
    return kOk;
}

struct TrainArgs {
    std::optional<std::string> hyp;
    std::string data = "data";
    std::string out = "runs";
    TrainFlags flags;
};

int cmd_train(const TrainArgs& a) {
    const auto cfg = a.flags.resolve(a.hyp);
    const auto train_set = load_split<float>(a.data, "train", cfg.resolution, cfg.hypothesis.use_mask);
    const auto dir = fs::path(a.out) / cfg.hypothesis.name();
    fs::create_directories(dir);
    auto echoed = to_json(cfg);
    echoed["data"] = a.data;
    write_json(dir / "config.json", echoed);
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochLog& e) { print_epoch(cfg.hypothesis.name(), cfg, e); };
    train(train_set, cfg, dir, hooks);
    std::cout << "checkpoint " << (dir / "checkpoint.bin").string() << '\n';
    return kOk;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data = "data";
    std::string split = "test";
    std::string out = "eval";
};

int cmd_eval(const EvalArgs& a) {
    if (a.split != "train" && a.split != "val" && a.split != "test") throw UsageError("--split must be train, val or test");
    const auto ckpt = load_checkpoint(a.checkpoint);
    const auto& arch = ckpt.params.architecture();
    const auto samples = load_split<float>(a.data, a.split, arch.resolution, true);
    if (samples.empty()) throw DataError("eval: split '" + a.split + "' is empty");
    const auto reports = evaluate_split(model_reconstructor(ckpt.params), samples);
    fs::create_directories(a.out);
    {
        std::ofstream os(fs::path(a.out) / "metrics.csv", std::ios::trunc);
        if (!os) throw DataError("cannot write metrics.csv under " + a.out);
        write_metrics_csv(os, reports);
    }
    write_json(fs::path(a.out) / "config.json", {{"command", "eval"},
                                                 {"checkpoint", a.checkpoint},
                                                 {"data", a.data},
                                                 {"split", a.split},
                                                 {"hyp", "H" + std::to_string(ckpt.hypothesis_id)},
                                                 {"resolution", arch.resolution},
                                                 {"latent_dim", arch.latent_dim}});
    std::cout << metrics_csv_header() << '\n' << metrics_csv_row(aggregate(reports)) << '\n';
    return kOk;
}

struct AblateArgs {
    std::string data = "data";
    std::string out = "ablation";
    std::string hyps = "H1,H2,H3,H4,H5,H6,H7,H8,H9,H10";
    std::string seeds;
    TrainFlags flags;
};

int cmd_ablate(const AblateArgs& a) {
    AblationPlan plan;
    plan.base = a.flags.resolve(std::nullopt);
    for (const auto& h : split_list(a.hyps)) plan.hypotheses.push_back(hypothesis(h).id);
    if (plan.hypotheses.empty()) throw UsageError("--hyps names no hypothesis");
    if (a.seeds.empty()) {
        plan.seeds = {plan.base.seed};
    } else {
        for (const auto& s : split_list(a.seeds)) {
            try {
                plan.seeds.push_back(std::stoull(s));
            } catch (const std::exception&) {
                throw UsageError("--seeds: not an integer: " + s);
            }
        }
    }
    fs::create_directories(a.out);
    auto echoed = to_json(plan.base);
    echoed.erase("hyp");
    echoed["data"] = a.data;
    echoed["hyps"] = split_list(a.hyps);
    echoed["seeds"] = plan.seeds;
    write_json(fs::path(a.out) / "config.json", echoed);

    const auto result = run_ablation(a.data, plan, a.out, [](const std::string& msg) {
        std::fprintf(stderr, "%s\n", msg.c_str());
    });
    write_ablation(a.out, result);
    std::cout << format_report(result, build_report(result));
    return kOk;
}

struct MetricsArgs {
    std::string a, b, mask, out;
};

FaceMask<double> ones_like(const ImageTensor<double>& img) { return FaceMask<double>(img.height(), img.width(), 1, 1.0); }

FaceMask<double> read_mask(const fs::path& p) { return binarize_mask(load_image<double>(p), 0.5); }

int cmd_metrics(const MetricsArgs& a) {
    std::vector<MetricReport> reports;
    int status = kOk;
    if (fs::is_directory(a.a) != fs::is_directory(a.b)) throw UsageError("metrics: give two images or two directories");
    if (!fs::is_directory(a.a)) {
        const auto x = load_image<double>(a.a);
        const auto y = load_image<double>(a.b);
        const auto m = a.mask.empty() ? ones_like(x) : read_mask(a.mask);
        reports.push_back(evaluate_pair(x, y, m, fs::path(a.a).filename().string()));
    } else {
        auto pngs = [](const fs::path& dir) {
            std::set<std::string> names;
            for (const auto& e : fs::directory_iterator(dir))
                if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename().string());
            return names;
        };
        const auto left = pngs(a.a);
        const auto right = pngs(a.b);
        const bool mask_dir = !a.mask.empty() && fs::is_directory(a.mask);
        std::optional<FaceMask<double>> shared_mask;
        if (!a.mask.empty() && !mask_dir) shared_mask = read_mask(a.mask);
        for (const auto& name : left) {
            if (!right.count(name)) {
                std::cerr << "unmatched: " << name << " only in " << a.a << '\n';
                status = kData;
                continue;
            }
            const auto x = load_image<double>(fs::path(a.a) / name);
            const auto y = load_image<double>(fs::path(a.b) / name);
            const auto m = mask_dir ? read_mask(fs::path(a.mask) / name) : shared_mask ? *shared_mask : ones_like(x);
            reports.push_back(evaluate_pair(x, y, m, fs::path(name).stem().string()));
        }
        for (const auto& name : right)
            if (!left.count(name)) {
                std::cerr << "unmatched: " << name << " only in " << a.b << '\n';
                status = kData;
            }
        if (reports.empty()) throw DataError("metrics: no file names in common");
    }
    if (a.out.empty()) {
        write_metrics_csv(std::cout, reports);
    } else {
        std::ofstream os(a.out, std::ios::trunc);
        if (!os) throw DataError("cannot write " + a.out);
        write_metrics_csv(os, reports);
    }
    return status;
}

struct GradcheckArgs {
    std::string inject;
    std::uint64_t seed = 11;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    GradcheckOptions opt;
    opt.seed = a.seed;
    opt.inject = a.inject;
    if (!opt.inject.empty()) {
        const auto names = gradcheck_components();
        if (std::find(names.begin(), names.end(), opt.inject) == names.end())
            throw UsageError("--inject: unknown component '" + opt.inject + "'");
    }
    const auto report = run_gradcheck(opt);
    print_gradcheck(std::cout, report);
    return report.passed() ? kOk : kVerify;
}

}  // namespace

int main(int argc, char** argv) {
    retain_freed_memory();
    CLI::App app{"Masked-reconstruction VAE toolkit"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-data", "render a synthetic face dataset");
    gen_cmd->add_option("--n", gen.n, "number of images");
    gen_cmd->add_option("--seed", gen.seed, "dataset seed");
    gen_cmd->add_option("--out", gen.out, "output directory");
    gen_cmd->add_option("--resolution", gen.resolution, "image side in pixels");
    gen_cmd->add_option("--fractions", gen.fractions, "train,val,test fractions");

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train one hypothesis");
    train_cmd->add_option("--hyp", tr.hyp, "hypothesis H1..H10 (default H9)");
    train_cmd->add_option("--data", tr.data, "dataset directory");
    train_cmd->add_option("--out", tr.out, "runs directory; output goes to <out>/<hyp>/");
    tr.flags.attach(train_cmd);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset split");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint.bin")->required();
    eval_cmd->add_option("--data", ev.data, "dataset directory");
    eval_cmd->add_option("--split", ev.split, "train, val or test");
    eval_cmd->add_option("--out", ev.out, "output directory");

    AblateArgs ab;
    auto* ablate_cmd = app.add_subcommand("ablate", "train and compare several hypotheses");
    ablate_cmd->add_option("--data", ab.data, "dataset directory");
    ablate_cmd->add_option("--out", ab.out, "output directory");
    ablate_cmd->add_option("--hyps", ab.hyps, "comma-separated subset, e.g. H3,H4");
    ablate_cmd->add_option("--seeds", ab.seeds, "comma-separated seeds averaged per hypothesis (default: --seed)");
    ab.flags.attach(ablate_cmd);

    MetricsArgs me;
    auto* metrics_cmd = app.add_subcommand("metrics", "compare two images or two directories of images");
    metrics_cmd->add_option("predicted", me.a, "image or directory")->required();
    metrics_cmd->add_option("reference", me.b, "image or directory")->required();
    metrics_cmd->add_option("--mask", me.mask, "mask image, or directory of masks named like the images");
    metrics_cmd->add_option("--out", me.out, "CSV file (default stdout)");

    GradcheckArgs gc;
    auto* gc_cmd = app.add_subcommand("grad-check", "finite-difference check of every analytic gradient");
    gc_cmd->add_option("--inject", gc.inject, "corrupt one component's gradient");
    gc_cmd->add_option("--seed", gc.seed, "seed for the random test points");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (*gen_cmd) return cmd_gen_data(gen);
        if (*train_cmd) return cmd_train(tr);
        if (*eval_cmd) return cmd_eval(ev);
        if (*ablate_cmd) return cmd_ablate(ab);
        if (*metrics_cmd) return cmd_metrics(me);
        if (*gc_cmd) return cmd_gradcheck(gc);
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
    return kUsage;
}
