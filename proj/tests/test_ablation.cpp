#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "facemask/ablation.hpp"
#include "facemask/synthface.hpp"
#include "support.hpp"

using namespace facemask;

namespace {

AblationResult synthetic_result(const std::vector<int>& ids) {
    AblationResult r;
    for (int id : ids) {
        // H9 best on every column, masked rows better than their partners
        const double base = id == 9 ? 0.05 : 0.1 + 0.01 * id + (id % 2 ? 0.0 : 0.05);
        const auto rep = MetricReport::from_values("H" + std::to_string(id), {base, base + 0.1, base + 0.2, 10 * base, 12 * base});
        r.rows.push_back(average_seeds(id, {1}, {rep}));
    }
    return r;
}

}  // namespace

TEST(AblationReport, FullGrid) {
    const auto result = synthetic_result({1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
    const auto rep = build_report(result);
    ASSERT_EQ(rep.mask_deltas.size(), 5u);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_EQ(rep.mask_deltas[i].masked, int(2 * i + 1));
        EXPECT_EQ(rep.mask_deltas[i].unmasked, int(2 * i + 2));
        for (double d : rep.mask_deltas[i].delta) EXPECT_LT(d, 0.0);
    }
    ASSERT_EQ(rep.standalone_ranking.size(), 6u);
    std::set<int> single;
    for (const auto& r : rep.standalone_ranking) single.insert(r.id);
    EXPECT_EQ(single, (std::set<int>{3, 4, 5, 6, 7, 8}));
    EXPECT_EQ(rep.standalone_ranking.front().id, 3);
    EXPECT_EQ(rep.standalone_ranking.front().mean_rank, 1.0);
    ASSERT_EQ(rep.ssim_pairings.size(), 2u);
    EXPECT_EQ(rep.ssim_pairings[0].ssim_l1, 1);
    EXPECT_EQ(rep.ssim_pairings[0].ssim_l2, 9);
    EXPECT_EQ(rep.ssim_pairings[1].ssim_l1, 2);
    EXPECT_EQ(rep.ssim_pairings[1].ssim_l2, 10);
    for (int best : rep.best) EXPECT_EQ(best, 9);

    const auto j = to_json(rep);
    EXPECT_EQ(j["best"].size(), std::size_t(MetricReport::kColumns));
    EXPECT_EQ(j["mask_deltas"].size(), 5u);
    const auto text = format_report(result, rep);
    EXPECT_NE(text.find("H1-H2"), std::string::npos);
    EXPECT_NE(text.find("H9-H10"), std::string::npos);
}

TEST(AblationReport, SubsetOmitsIncompletePairings) {
    const auto rep = build_report(synthetic_result({3, 4, 7, 9}));
    ASSERT_EQ(rep.mask_deltas.size(), 1u);
    EXPECT_EQ(rep.mask_deltas[0].masked, 3);
    EXPECT_EQ(rep.standalone_ranking.size(), 3u);
    EXPECT_TRUE(rep.ssim_pairings.empty());
    for (int best : rep.best) EXPECT_EQ(best, 9);
    const auto text = format_report(synthetic_result({3, 4, 7, 9}), rep);
    EXPECT_EQ(text.find("H7-H8"), std::string::npos);
    EXPECT_NE(text.find("no complete pairing"), std::string::npos);
    EXPECT_THROW(build_report(AblationResult{}), std::invalid_argument);
}

TEST(AblationReport, SeedAveraging) {
    const auto a = MetricReport::from_values("x", {0.1, 0.2, 0.3, 0.4, 0.5});
    const auto b = MetricReport::from_values("y", {0.3, 0.4, 0.5, 0.6, 0.7});
    const auto row = average_seeds(4, {1, 2}, {a, b});
    EXPECT_EQ(row.mean.image_id, "H4");
    EXPECT_NEAR(row.mean.one_minus_ssim, 0.2, 1e-15);
    EXPECT_NEAR(row.mean.l2_scaled, 0.6, 1e-15);
    EXPECT_THROW(average_seeds(4, {1}, {a, b}), std::invalid_argument);
}

TEST(RunAblation, TinySubsetEndToEnd) {
    const auto data = testsupport::scratch("ablate_data");
    synth::generate_dataset(20, 5, data, 48, {0.5, 0.0, 0.5});
    AblationPlan plan;
    plan.hypotheses = {4, 3, 3};
    plan.seeds = {1, 2};
    plan.base.latent_dim = 4;
    plan.base.epochs = 1;
    plan.base.steps_per_epoch = 3;
    plan.base.batch_size = 4;
    const auto out = testsupport::scratch("ablate_out");
    int runs = 0;
    const auto result = run_ablation(data, plan, out, {}, [&](int, std::uint64_t, const TrainResult& r) {
        ++runs;
        EXPECT_EQ(r.steps.size(), 3u);
    });
    EXPECT_EQ(runs, 4);
    ASSERT_EQ(result.rows.size(), 2u);
    EXPECT_EQ(result.rows[0].hypothesis_id, 3);
    EXPECT_EQ(result.rows[1].hypothesis_id, 4);
    EXPECT_EQ(result.rows[0].per_seed.size(), 2u);
    EXPECT_EQ(result.metadata["hypotheses"], nlohmann::json({"H3", "H4"}));
    EXPECT_FALSE(result.metadata["dataset_hash"].get<std::string>().empty());
    write_ablation(out, result);
    for (const char* f : {"ablation.csv", "report.json", "report.txt"}) EXPECT_TRUE(std::filesystem::exists(out / f)) << f;
    EXPECT_TRUE(std::filesystem::exists(out / "runs" / "H3" / "seed2" / "checkpoint.bin"));
    EXPECT_TRUE(std::filesystem::exists(out / "runs" / "H4" / "seed1" / "metrics.csv"));

    std::ifstream csv(out / "ablation.csv");
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "hypothesis,1-ssim,1-msssim,1-vif,l1,l2");

    plan.hypotheses = {11};
    EXPECT_THROW(run_ablation(data, plan, out), std::invalid_argument);
}
