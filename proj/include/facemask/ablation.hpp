#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facemask/dataset.hpp"
#include "facemask/hypothesis.hpp"
#include "facemask/metrics.hpp"
#include "facemask/train.hpp"

namespace facemask {

/// Test-split aggregate of one hypothesis, averaged over the seeds it was trained with.
struct AblationRow {
    int hypothesis_id = 0;
    std::vector<std::uint64_t> seeds;
    MetricReport mean;  // image_id is "H<id>"
    std::vector<MetricReport> per_seed;
};

struct AblationResult {
    std::vector<AblationRow> rows;  // ascending hypothesis id
    nlohmann::json metadata;

    const AblationRow* find(int id) const {
        for (const auto& r : rows)
            if (r.hypothesis_id == id) return &r;
        return nullptr;
    }
};

/// Mean of per-seed aggregates, column by column.
inline AblationRow average_seeds(int hypothesis_id, const std::vector<std::uint64_t>& seeds,
                                 const std::vector<MetricReport>& per_seed) {
    if (per_seed.empty() || per_seed.size() != seeds.size()) throw std::invalid_argument("average_seeds: one report per seed");
    AblationRow row{hypothesis_id, seeds, aggregate(per_seed, "H" + std::to_string(hypothesis_id)), per_seed};
    return row;
}

// ---------------------------------------------------------------------------
// comparison report

struct PairDelta {
    int masked = 0;
    int unmasked = 0;
    std::array<double, MetricReport::kColumns> delta{};  // masked - unmasked; negative favours the mask
};

struct RankedHypothesis {
    int id = 0;
    double mean_rank = 0.0;
};

struct LossComparison {
    int ssim_l1 = 0;
    int ssim_l2 = 0;
    std::array<double, MetricReport::kColumns> delta{};  // (SSIM+l1) - (SSIM+l2)
};

struct AblationReport {
    std::vector<PairDelta> mask_deltas;
    std::vector<RankedHypothesis> standalone_ranking;  // best first
    std::vector<LossComparison> ssim_pairings;
    std::array<int, MetricReport::kColumns> best{};    // argmin hypothesis per column
};

inline std::array<double, MetricReport::kColumns> column_delta(const MetricReport& a, const MetricReport& b) {
    std::array<double, MetricReport::kColumns> d{};
    const auto va = a.values();
    const auto vb = b.values();
    for (int k = 0; k < MetricReport::kColumns; ++k) d[k] = va[k] - vb[k];
    return d;
}

/// Builds the four-question report from whatever hypotheses are present;
/// comparisons that need an absent hypothesis are left out.
inline AblationReport build_report(const AblationResult& result) {
    if (result.rows.empty()) throw std::invalid_argument("ablation report: no hypotheses");
    AblationReport rep;
    for (auto [m, u] : mask_pairs()) {
        const auto* a = result.find(m);
        const auto* b = result.find(u);
        if (a && b) rep.mask_deltas.push_back({m, u, column_delta(a->mean, b->mean)});
    }

    // single-loss hypotheses: H3/H4 (l1), H5/H6 (SSIM), H7/H8 (l2)
    std::vector<const AblationRow*> single;
    for (const auto& r : result.rows) {
        const auto& l = hypothesis_table()[r.hypothesis_id - 1].losses;
        if (int(l.ssim) + int(l.l1) + int(l.l2) == 1) single.push_back(&r);
    }
    if (!single.empty()) {
        std::map<int, double> rank_sum;
        for (int k = 0; k < MetricReport::kColumns; ++k) {
            auto order = single;
            std::stable_sort(order.begin(), order.end(),
                             [k](const auto* x, const auto* y) { return x->mean.values()[k] < y->mean.values()[k]; });
            for (std::size_t i = 0; i < order.size(); ++i) rank_sum[order[i]->hypothesis_id] += double(i + 1);
        }
        for (const auto& [id, sum] : rank_sum) rep.standalone_ranking.push_back({id, sum / MetricReport::kColumns});
        std::stable_sort(rep.standalone_ranking.begin(), rep.standalone_ranking.end(),
                         [](const auto& x, const auto& y) { return x.mean_rank < y.mean_rank; });
    }

    for (auto [l1, l2] : std::vector<std::pair<int, int>>{{1, 9}, {2, 10}}) {
        const auto* a = result.find(l1);
        const auto* b = result.find(l2);
        if (a && b) rep.ssim_pairings.push_back({l1, l2, column_delta(a->mean, b->mean)});
    }

    for (int k = 0; k < MetricReport::kColumns; ++k) {
        const auto* best = &result.rows.front();
        for (const auto& r : result.rows)
            if (r.mean.values()[k] < best->mean.values()[k]) best = &r;
        rep.best[k] = best->hypothesis_id;
    }
    return rep;
}

inline nlohmann::json to_json(const AblationReport& rep) {
    using nlohmann::json;
    auto cols = [](const std::array<double, MetricReport::kColumns>& v) {
        json j = json::object();
        for (int k = 0; k < MetricReport::kColumns; ++k) j[MetricReport::column_names[k]] = v[k];
        return j;
    };
    json j;
    j["mask_deltas"] = json::array();
    for (const auto& d : rep.mask_deltas)
        j["mask_deltas"].push_back({{"masked", "H" + std::to_string(d.masked)},
                                    {"unmasked", "H" + std::to_string(d.unmasked)},
                                    {"delta", cols(d.delta)}});
    j["standalone_ranking"] = json::array();
    for (const auto& r : rep.standalone_ranking)
        j["standalone_ranking"].push_back({{"hypothesis", "H" + std::to_string(r.id)}, {"mean_rank", r.mean_rank}});
    j["ssim_l1_vs_ssim_l2"] = json::array();
    for (const auto& c : rep.ssim_pairings)
        j["ssim_l1_vs_ssim_l2"].push_back({{"ssim_l1", "H" + std::to_string(c.ssim_l1)},
                                           {"ssim_l2", "H" + std::to_string(c.ssim_l2)},
                                           {"delta", cols(c.delta)}});
    j["best"] = json::object();
    for (int k = 0; k < MetricReport::kColumns; ++k) j["best"][MetricReport::column_names[k]] = "H" + std::to_string(rep.best[k]);
    return j;
}

inline std::string format_report(const AblationResult& result, const AblationReport& rep) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    auto header = [&](const char* first) {
        os << std::left << std::setw(14) << first << std::right;
        for (auto name : MetricReport::column_names) os << std::setw(10) << name;
        os << '\n';
    };
    auto values = [&](const std::string& label, const std::array<double, MetricReport::kColumns>& v) {
        os << std::left << std::setw(14) << label << std::right;
        for (double x : v) os << std::setw(10) << x;
        os << '\n';
    };
    os << "Results (test split, lower is better)\n";
    header("hypothesis");
    for (const auto& r : result.rows) values(r.mean.image_id, r.mean.values());

    os << "\nDo face masks help? (masked - unmasked; negative favours the mask)\n";
    if (rep.mask_deltas.empty()) os << "  no complete mask/no-mask pair\n";
    else {
        header("pair");
        for (const auto& d : rep.mask_deltas)
            values("H" + std::to_string(d.masked) + "-H" + std::to_string(d.unmasked), d.delta);
    }

    os << "\nStandalone losses (mean rank over metrics, best first)\n";
    if (rep.standalone_ranking.empty()) os << "  no single-loss hypothesis\n";
    for (std::size_t i = 0; i < rep.standalone_ranking.size(); ++i) {
        const auto& r = rep.standalone_ranking[i];
        os << "  " << i + 1 << ". H" << r.id << "  mean rank " << std::setprecision(2) << r.mean_rank << std::setprecision(4)
           << '\n';
    }

    os << "\nSSIM+l1 vs SSIM+l2 (difference; negative favours l1)\n";
    if (rep.ssim_pairings.empty()) os << "  no complete pairing\n";
    else {
        header("pair");
        for (const auto& c : rep.ssim_pairings)
            values("H" + std::to_string(c.ssim_l1) + "-H" + std::to_string(c.ssim_l2), c.delta);
    }

    os << "\nBest hypothesis per metric\n";
    for (int k = 0; k < MetricReport::kColumns; ++k)
        os << "  " << std::left << std::setw(10) << MetricReport::column_names[k] << "H" << rep.best[k] << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// running

struct AblationPlan {
    std::vector<int> hypotheses;  // ids, any order; run ascending
    std::vector<std::uint64_t> seeds;
    TrainConfig base;  // hypothesis and seed are overridden per run
};

/// Trains and evaluates every (hypothesis, seed) pair on the dataset in
/// `data_dir`. Per-run artifacts go to out_dir/runs/H<id>/seed<seed>/.
inline AblationResult run_ablation(const std::filesystem::path& data_dir, const AblationPlan& plan,
                                   const std::filesystem::path& out_dir,
                                   const std::function<void(const std::string&)>& progress = {},
                                   const std::function<void(int, std::uint64_t, const TrainResult&)>& on_run = {}) {
    if (plan.hypotheses.empty()) throw std::invalid_argument("ablate: no hypotheses requested");
    if (plan.seeds.empty()) throw std::invalid_argument("ablate: no seeds");
    auto ids = plan.hypotheses;
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    for (int id : ids)
        if (id < 1 || id > 10) throw std::invalid_argument("ablate: hypothesis id out of range: " + std::to_string(id));

    const int res = plan.base.resolution;
    const auto train_set = load_split<float>(data_dir, "train", res, false);
    const auto test_set = load_split<float>(data_dir, "test", res, true);
    const bool have_masks = std::all_of(train_set.begin(), train_set.end(), [](const auto& s) { return s.mask.has_value(); });

    AblationResult result;
    for (int id : ids) {
        std::vector<MetricReport> per_seed;
        for (auto seed : plan.seeds) {
            TrainConfig cfg = plan.base;
            cfg.hypothesis = hypothesis_table()[id - 1];
            cfg.seed = seed;
            if (cfg.hypothesis.use_mask && !have_masks) throw DataError("ablate: " + cfg.hypothesis.name() + " needs masks");
            const auto run_dir = out_dir / "runs" / cfg.hypothesis.name() / ("seed" + std::to_string(seed));
            std::filesystem::create_directories(run_dir);
            {
                std::ofstream os(run_dir / "config.json");
                os << to_json(cfg).dump(2) << '\n';
            }
            if (progress) progress("training " + cfg.hypothesis.name() + " seed " + std::to_string(seed));
            const auto trained = train(train_set, cfg, run_dir);
            if (on_run) on_run(id, seed, trained);
            const auto reports = evaluate_split(model_reconstructor(trained.params), test_set);
            {
                std::ofstream os(run_dir / "metrics.csv");
                write_metrics_csv(os, reports);
            }
            per_seed.push_back(aggregate(reports, cfg.hypothesis.name()));
        }
        result.rows.push_back(average_seeds(id, plan.seeds, per_seed));
    }
    nlohmann::json meta;
    meta["seeds"] = plan.seeds;
    meta["hypotheses"] = nlohmann::json::array();
    for (int id : ids) meta["hypotheses"].push_back("H" + std::to_string(id));
    meta["config"] = to_json(plan.base);
    meta["config"].erase("hyp");
    meta["config"].erase("seed");
    const auto manifest = data_dir / "manifest.json";
    if (std::filesystem::exists(manifest)) {
        std::ifstream is(manifest);
        meta["dataset_hash"] = nlohmann::json::parse(is).value("content_hash", "");
    }
    result.metadata = meta;
    return result;
}

/// Writes ablation.csv (one MEAN-style row per hypothesis), report.json and report.txt.
inline void write_ablation(const std::filesystem::path& out_dir, const AblationResult& result) {
    std::filesystem::create_directories(out_dir);
    const auto rep = build_report(result);
    {
        std::ofstream os(out_dir / "ablation.csv");
        os << "hypothesis" << metrics_csv_header().substr(std::string("image_id").size()) << '\n';
        for (const auto& r : result.rows) os << metrics_csv_row(r.mean) << '\n';
    }
    {
        nlohmann::json j;
        j["metadata"] = result.metadata;
        j["report"] = to_json(rep);
        std::ofstream os(out_dir / "report.json");
        os << j.dump(2) << '\n';
    }
    std::ofstream os(out_dir / "report.txt");
    os << format_report(result, rep);
}

}  // namespace facemask
