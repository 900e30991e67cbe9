#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "facemask/metrics.hpp"
#include "support.hpp"

using namespace facemask;

TEST(Invert, ReportingConvention) {
    EXPECT_EQ(invert(1.0), 0.0);
    EXPECT_NEAR(invert(0.693), 0.307, 1e-12);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        const double v = u(rng);
        EXPECT_NEAR(invert(invert(v)), v, 1e-15);
    }
}

TEST(ScaledLn, ConstantOffsetAndIdentity) {
    // 25.5 grey levels: the offset is built on the 0-255 grid so it is exact
    ImageTensor<double> a(12, 12, 3), b(12, 12, 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = double(i % 200) / 255.0;
        b[i] = (double(i % 200) + 25.5) / 255.0;
    }
    EXPECT_NEAR(l1_scaled(a, b), 1.0, 1e-12);
    EXPECT_NEAR(l2_scaled(a, b), 1.0, 1e-12);
    EXPECT_EQ(l1_scaled(a, a), 0.0);
    EXPECT_EQ(l2_scaled(a, a), 0.0);
}

TEST(ScaledLn, MaeNeverExceedsRmse) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 1000; ++t) {
        const auto a = testsupport::random_image(rng, 8, 8, 3);
        const auto b = t % 2 ? testsupport::random_image(rng, 8, 8, 3) : testsupport::noisy_copy(rng, a, 0.1);
        EXPECT_LE(l1_scaled(a, b), l2_scaled(a, b) + 1e-15);
    }
}

TEST(MetricSuite, IdenticalImagesScoreZero) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 5; ++t) {
        const auto a = testsupport::random_image(rng, 48, 48, 3);
        const auto r = evaluate_pair(a, a, ImageTensor<double>(48, 48, 1, 1.0));
        for (double v : r.values()) EXPECT_LE(std::abs(v), 1e-6);
    }
    // flat images too: VIF has no information to lose
    const ImageTensor<double> flat(48, 48, 3, 0.4);
    for (double v : evaluate_pair(flat, flat, ImageTensor<double>(48, 48, 1, 1.0)).values()) EXPECT_LE(std::abs(v), 1e-6);
}

TEST(MetricSuite, MaskSemantics) {
    std::mt19937_64 rng(4);
    const auto ref = testsupport::random_image(rng, 48, 48, 3);
    const auto pred = testsupport::noisy_copy(rng, ref, 0.2);
    const auto none = evaluate_pair(pred, ref, ImageTensor<double>(48, 48, 1, 0.0));
    for (double v : none.values()) EXPECT_LE(std::abs(v), 1e-6);
    const auto all = evaluate_pair(pred, ref, ImageTensor<double>(48, 48, 1, 1.0));
    EXPECT_NEAR(all.one_minus_ssim, 1.0 - ssim_index(pred, ref), 1e-15);
    EXPECT_NEAR(all.one_minus_msssim, 1.0 - ms_ssim(pred, ref), 1e-15);
    EXPECT_NEAR(all.one_minus_vif, 1.0 - vif_p(ref, pred), 1e-15);
    EXPECT_NEAR(all.l1_scaled, l1_scaled(pred, ref), 1e-15);
    EXPECT_NEAR(all.l2_scaled, l2_scaled(pred, ref), 1e-15);
    for (double v : all.values()) EXPECT_GT(v, 0.0);
}

TEST(MetricSuite, SsimAgreesWithLossModuleAndOracle) {
    std::mt19937_64 rng(5);
    const auto a = testsupport::random_image(rng, 32, 32, 3);
    const auto b = testsupport::noisy_copy(rng, a, 0.3);
    EXPECT_NEAR(ssim_index(a, b), 1.0 - ssim_loss(a, b).value, 1e-12);
    EXPECT_NEAR(ssim_index(a, b), testsupport::brute_force_ssim(a, b), 1e-8);
    EXPECT_NEAR(ssim_index(a, a), 1.0, 1e-12);
}

TEST(Aggregate, SingleMidpointAndPermutation) {
    const auto a = MetricReport::from_values("a", {0.1, 0.2, 0.3, 0.4, 0.5});
    const auto b = MetricReport::from_values("b", {0.3, 0.0, 0.5, 1.4, 0.7});
    EXPECT_EQ(aggregate({a}).values(), a.values());
    const auto mid = aggregate({a, b});
    for (int k = 0; k < MetricReport::kColumns; ++k) EXPECT_NEAR(mid.values()[k], 0.5 * (a.values()[k] + b.values()[k]), 1e-15);
    EXPECT_EQ(mid.image_id, "MEAN");

    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    std::vector<MetricReport> list;
    for (int i = 0; i < 50; ++i) list.push_back(MetricReport::from_values(std::to_string(i), {u(rng), u(rng), u(rng), u(rng), u(rng)}));
    const auto base = aggregate(list);
    for (int t = 0; t < 10; ++t) {
        std::shuffle(list.begin(), list.end(), rng);
        const auto again = aggregate(list);
        for (int k = 0; k < MetricReport::kColumns; ++k) EXPECT_NEAR(again.values()[k], base.values()[k], 1e-14);
    }
    EXPECT_THROW(aggregate({}), std::invalid_argument);
}

TEST(MetricsCsv, ContractAndReload) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    std::vector<MetricReport> rows;
    for (int i = 0; i < 7; ++i) rows.push_back(MetricReport::from_values("img" + std::to_string(i), {u(rng), u(rng), u(rng), u(rng), u(rng)}));
    std::stringstream ss;
    write_metrics_csv(ss, rows);
    std::string header;
    std::getline(std::istringstream(ss.str()), header);
    EXPECT_EQ(header, "image_id,1-ssim,1-msssim,1-vif,l1,l2");
    const auto back = read_metrics_csv(ss);
    ASSERT_EQ(back.size(), rows.size() + 1);
    EXPECT_EQ(back.back().image_id, "MEAN");
    const auto agg = aggregate(rows);
    for (int k = 0; k < MetricReport::kColumns; ++k) {
        EXPECT_NEAR(back.back().values()[k], agg.values()[k], 1e-6);
        EXPECT_NEAR(aggregate({back.begin(), back.end() - 1}).values()[k], agg.values()[k], 1e-6);
    }
    std::istringstream bad("id,a,b\n");
    EXPECT_THROW(read_metrics_csv(bad), DataError);
}
