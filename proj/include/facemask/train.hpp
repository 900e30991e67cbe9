#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "facemask/checkpoint.hpp"
#include "facemask/dataset.hpp"
#include "facemask/metrics.hpp"
#include "facemask/vae.hpp"

namespace facemask {

/// Keeps freed blocks in the process heap. A training step allocates and frees
/// several multi-megabyte buffers; by default glibc maps those afresh every
/// step and pays the page faults again. Call once at program start.
inline void retain_freed_memory() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
#endif
}

struct TrainConfig {
    int epochs = 20;
    int steps_per_epoch = 200;
    int batch_size = 32;
    double learning_rate = 1e-4;
    double clip_norm = 1e-3;
    double kl_weight = 1e-3;
    HypothesisConfig hypothesis = hypothesis_table()[8];
    std::uint64_t seed = 7;
    int resolution = 48;
    int latent_dim = 32;

    /// Full-scale schedule: 50 epochs of 4000 steps, batch 32.
    static TrainConfig full_scale() {
        TrainConfig c;
        c.epochs = 50;
        c.steps_per_epoch = 4000;
        return c;
    }

    Architecture architecture() const {
        Architecture a;
        a.resolution = resolution;
        a.latent_dim = latent_dim;
        return a;
    }

    void validate() const {
        if (epochs < 1 || steps_per_epoch < 1 || batch_size < 1) throw std::invalid_argument("epochs, steps and batch must be positive");
        if (!(learning_rate >= 0.0)) throw std::invalid_argument("learning rate must be non-negative");
        if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be positive");
        if (!(kl_weight >= 0.0)) throw std::invalid_argument("KL weight must be non-negative");
        if (!hypothesis.losses.any()) throw std::invalid_argument("hypothesis enables no loss");
        architecture().validate();
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},         {"steps", c.steps_per_epoch}, {"batch", c.batch_size},
            {"lr", c.learning_rate},      {"clip_norm", c.clip_norm},   {"kl_weight", c.kl_weight},
            {"hyp", c.hypothesis.name()}, {"seed", c.seed},             {"resolution", c.resolution},
            {"latent_dim", c.latent_dim}};
}

/// Overrides fields of `c` with the keys present in `j` (same names as to_json).
/// Unknown keys and wrongly typed values throw std::invalid_argument.
inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: expected a JSON object");
    for (const auto& [key, v] : j.items()) {
        try {
            if (key == "epochs") c.epochs = v.get<int>();
            else if (key == "steps") c.steps_per_epoch = v.get<int>();
            else if (key == "batch") c.batch_size = v.get<int>();
            else if (key == "lr") c.learning_rate = v.get<double>();
            else if (key == "clip_norm") c.clip_norm = v.get<double>();
            else if (key == "kl_weight") c.kl_weight = v.get<double>();
            else if (key == "hyp") c.hypothesis = hypothesis(v.get<std::string>());
            else if (key == "seed") c.seed = v.get<std::uint64_t>();
            else if (key == "resolution") c.resolution = v.get<int>();
            else if (key == "latent_dim") c.latent_dim = v.get<int>();
            else throw std::invalid_argument("config: unknown key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument("config: bad value for '" + key + "': " + e.what());
        }
    }
}

/// Per-epoch means written to the training log.
struct EpochLog {
    int epoch = 0;
    std::int64_t step = 0;
    LossBreakdown mean;
    double seconds = 0.0;
};

inline std::string train_log_header() { return "epoch,step,total,recon,bce,dice,kl,grad_norm,seconds"; }

inline std::string train_log_row(const EpochLog& e) {
    std::ostringstream os;
    os << e.epoch << ',' << e.step << std::setprecision(9) << ',' << e.mean.total << ',' << e.mean.recon << ','
       << e.mean.bce << ',' << e.mean.dice << ',' << e.mean.kl << ',' << e.mean.grad_norm << ',' << std::setprecision(3)
       << std::fixed << e.seconds;
    return os.str();
}

struct TrainResult {
    VaeParams<float> params;
    std::vector<LossBreakdown> steps;
    std::vector<EpochLog> epochs;
};

/// Hooks for progress reporting; all optional.
struct TrainHooks {
    std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {

inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Cycles through a reshuffled permutation of the training set.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
        for (std::size_t i = 0; i < n; ++i) order_[i] = i;
        reshuffle();
    }
    std::vector<std::size_t> next(int batch) {
        std::vector<std::size_t> out;
        out.reserve(batch);
        while (static_cast<int>(out.size()) < batch) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        for (std::size_t i = order_.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(rng_() % i);
            std::swap(order_[i - 1], order_[j]);
        }
        pos_ = 0;
    }
    std::vector<std::size_t> order_;
    std::mt19937_64 rng_;
    std::size_t pos_ = 0;
};

}  // namespace detail

/// Standard-normal noise stream for the reparameterization.
class NoiseStream {
public:
    explicit NoiseStream(std::uint64_t seed) : rng_(seed) {}
    /// (batch, latent) matrix, filled one image at a time.
    nn::Matrix<float> draw(int latent, int batch) {
        nn::Matrix<float> m(batch, latent);
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = static_cast<float>(dist_(rng_));
        return m;
    }

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> dist_;
};

/// Trains from scratch on `train_set`. When `out_dir` is non-empty, writes
/// checkpoint.bin after every epoch plus train_log.csv (per epoch) and
/// steps.csv (per step).
inline TrainResult train(const std::vector<Sample<float>>& train_set, const TrainConfig& cfg,
                         const std::filesystem::path& out_dir = {}, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (train_set.empty()) throw DataError("train: the training split is empty");
    if (cfg.hypothesis.use_mask) {
        for (const auto& s : train_set)
            if (!s.mask) throw DataError("train: hypothesis " + cfg.hypothesis.name() + " needs masks; " + s.id + " has none");
    }
    const auto arch = cfg.architecture();
    TrainResult result{init_params<float>(cfg.seed, arch), {}, {}};
    AdamState<float> adam_state(arch);
    VaeParams<float> grads(arch);
    const ObjectiveConfig objective{cfg.hypothesis, cfg.kl_weight, SsimConfig{}};
    AdamConfig adam;
    adam.learning_rate = cfg.learning_rate;

    detail::BatchSampler sampler(train_set.size(), detail::stream_seed(cfg.seed, 1));
    NoiseStream noise(detail::stream_seed(cfg.seed, 2));

    std::ofstream log, steps_log;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        log.open(out_dir / "train_log.csv", std::ios::trunc);
        steps_log.open(out_dir / "steps.csv", std::ios::trunc);
        if (!log || !steps_log) throw DataError("train: cannot write logs under " + out_dir.string());
        log << train_log_header() << '\n';
        steps_log << "step,total,recon,bce,dice,kl,grad_norm\n" << std::setprecision(9);
    }

    std::int64_t global_step = 0;
    Batch<float> batch;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        LossBreakdown sum;
        for (int s = 0; s < cfg.steps_per_epoch; ++s) {
            batch.images.clear();
            batch.masks.clear();
            for (auto idx : sampler.next(cfg.batch_size)) {
                batch.images.push_back(train_set[idx].image);
                if (cfg.hypothesis.use_mask) batch.masks.push_back(*train_set[idx].mask);
            }
            const auto eps = noise.draw(arch.latent_dim, cfg.batch_size);
            const auto loss = training_step(result.params, adam_state, batch, eps, objective, adam, cfg.clip_norm, grads);
            ++global_step;
            result.steps.push_back(loss);
            sum.total += loss.total;
            sum.recon += loss.recon;
            sum.bce += loss.bce;
            sum.dice += loss.dice;
            sum.kl += loss.kl;
            sum.kl_term += loss.kl_term;
            sum.grad_norm += loss.grad_norm;
            if (steps_log.is_open()) {
                steps_log << global_step << ',' << loss.total << ',' << loss.recon << ',' << loss.bce << ',' << loss.dice
                          << ',' << loss.kl << ',' << loss.grad_norm << '\n';
            }
        }
        const double k = 1.0 / cfg.steps_per_epoch;
        EpochLog row{epoch, global_step,
                     {sum.total * k, sum.recon * k, sum.bce * k, sum.dice * k, sum.kl * k, sum.kl_term * k, sum.grad_norm * k},
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
        result.epochs.push_back(row);
        if (!out_dir.empty()) {
            save_checkpoint(out_dir / "checkpoint.bin", result.params, cfg.hypothesis.id);
            log << train_log_row(row) << '\n' << std::flush;
            steps_log << std::flush;
        }
        if (hooks.on_epoch) hooks.on_epoch(row);
    }
    return result;
}

/// Trailing moving average of the per-step totals ending at `step` (1-based).
inline double moving_average_total(const std::vector<LossBreakdown>& steps, std::size_t step, std::size_t window) {
    if (step == 0 || step > steps.size() || window == 0) throw std::out_of_range("moving_average_total: bad step/window");
    const std::size_t first = step >= window ? step - window : 0;
    double sum = 0.0;
    for (std::size_t i = first; i < step; ++i) sum += steps[i].total;
    return sum / static_cast<double>(step - first);
}

// ---------------------------------------------------------------------------
// evaluation

/// Maps an input image to the model's raw prediction.
using Reconstructor = std::function<ImageTensor<double>(const ImageTensor<double>&)>;

inline Reconstructor model_reconstructor(const VaeParams<float>& params) {
    return [&params](const ImageTensor<double>& x) {
        return reconstruct(params, x.cast<float>(), false).raw.cast<double>();
    };
}

/// Scores every sample with its background restored from the ground-truth mask.
inline std::vector<MetricReport> evaluate_split(const Reconstructor& model, const std::vector<Sample<float>>& samples) {
    if (samples.empty()) throw DataError("evaluate: the evaluation split is empty");
    std::vector<MetricReport> reports;
    reports.reserve(samples.size());
    for (const auto& s : samples) {
        if (!s.mask) throw DataError("evaluate: sample " + s.id + " has no mask");
        const auto reference = s.image.cast<double>();
        const auto predicted = model(reference);
        reports.push_back(evaluate_pair(predicted, reference, s.mask->cast<double>(), s.id));
    }
    return reports;
}

}  // namespace facemask
