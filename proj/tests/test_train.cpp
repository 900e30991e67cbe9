#include <gtest/gtest.h>

#include <fstream>

#include "facemask/synthface.hpp"
#include "facemask/train.hpp"
#include "support.hpp"

using namespace facemask;

namespace {

const std::filesystem::path& shared_dataset() {
    static const auto dir = [] {
        auto d = testsupport::scratch("train_data");
        synth::generate_dataset(240, 11, d, 48, {0.8, 0.1, 0.1});
        return d;
    }();
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(TrainConfig, JsonRoundTripAndErrors) {
    TrainConfig c;
    c.epochs = 3;
    c.learning_rate = 5e-4;
    c.hypothesis = hypothesis("H4");
    c.seed = 99;
    TrainConfig d;
    apply_json(d, to_json(c));
    EXPECT_EQ(to_json(d), to_json(c));
    EXPECT_THROW(apply_json(d, {{"epoch", 3}}), std::invalid_argument);
    EXPECT_THROW(apply_json(d, {{"epochs", "three"}}), std::invalid_argument);
    EXPECT_THROW(apply_json(d, {{"hyp", "H13"}}), std::invalid_argument);
    EXPECT_THROW(apply_json(d, nlohmann::json::array()), std::invalid_argument);

    const TrainConfig defaults;
    EXPECT_EQ(defaults.epochs, 20);
    EXPECT_EQ(defaults.steps_per_epoch, 200);
    EXPECT_EQ(defaults.batch_size, 32);
    EXPECT_EQ(defaults.learning_rate, 1e-4);
    EXPECT_EQ(defaults.clip_norm, 1e-3);
    EXPECT_EQ(defaults.kl_weight, 1e-3);
    EXPECT_EQ(TrainConfig::full_scale().epochs, 50);
    EXPECT_EQ(TrainConfig::full_scale().steps_per_epoch, 4000);
}

TEST(Train, TwoStepsAreReproducible) {
    const auto train_set = load_split<float>(shared_dataset(), "train", 48, true);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.steps_per_epoch = 2;
    cfg.batch_size = 8;
    cfg.hypothesis = hypothesis("H9");
    const auto a = testsupport::scratch("train_det_a");
    const auto b = testsupport::scratch("train_det_b");
    const auto ra = train(train_set, cfg, a);
    const auto rb = train(train_set, cfg, b);
    EXPECT_TRUE(ra.params == rb.params);
    EXPECT_EQ(slurp(a / "checkpoint.bin"), slurp(b / "checkpoint.bin"));
    EXPECT_EQ(slurp(a / "steps.csv"), slurp(b / "steps.csv"));
    cfg.seed = 8;
    EXPECT_FALSE(train(train_set, cfg).params == ra.params);

    std::ifstream log(a / "train_log.csv");
    std::string header;
    std::getline(log, header);
    EXPECT_EQ(header, "epoch,step,total,recon,bce,dice,kl,grad_norm,seconds");
    const auto ck = load_checkpoint(a / "checkpoint.bin");
    EXPECT_EQ(ck.hypothesis_id, 9);
    EXPECT_TRUE(ck.params == ra.params);
}

TEST(Train, MaskHypothesisNeedsMasks) {
    auto train_set = load_split<float>(shared_dataset(), "train", 48, true);
    train_set[3].mask.reset();
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.steps_per_epoch = 1;
    cfg.hypothesis = hypothesis("H1");
    EXPECT_THROW(train(train_set, cfg), DataError);
    EXPECT_THROW(train({}, cfg), DataError);
    cfg.batch_size = 0;
    EXPECT_THROW(train(train_set, cfg), std::invalid_argument);
}

// The smoothed loss over the first 500 steps goes down, and KL stays finite
// and positive once training is under way.
TEST(Train, LossCurveDecreases) {
    const auto train_set = load_split<float>(shared_dataset(), "train", 48, true);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.steps_per_epoch = 100;
    cfg.hypothesis = hypothesis("H3");
    const auto r = train(train_set, cfg);
    ASSERT_EQ(r.steps.size(), 500u);
    double previous = moving_average_total(r.steps, 100, 100);
    for (std::size_t step : {200, 300, 400, 500}) {
        const double now = moving_average_total(r.steps, step, 100);
        EXPECT_LT(now, previous) << "step " << step;
        previous = now;
    }
    for (std::size_t i = 50; i < r.steps.size(); ++i) {
        EXPECT_TRUE(std::isfinite(r.steps[i].kl));
        EXPECT_GT(r.steps[i].kl, 0.0);
    }
    EXPECT_EQ(r.epochs.size(), 5u);
}

TEST(MovingAverage, Window) {
    std::vector<LossBreakdown> steps(5);
    for (int i = 0; i < 5; ++i) steps[i].total = i + 1;
    EXPECT_EQ(moving_average_total(steps, 5, 2), 4.5);
    EXPECT_EQ(moving_average_total(steps, 2, 10), 1.5);
    EXPECT_THROW(moving_average_total(steps, 6, 2), std::out_of_range);
    EXPECT_THROW(moving_average_total(steps, 0, 2), std::out_of_range);
}

TEST(Evaluate, IdentityModelScoresZero) {
    const auto test_set = load_split<float>(shared_dataset(), "test", 48, true);
    const auto reports = evaluate_split([](const ImageTensor<double>& x) { return x; }, test_set);
    ASSERT_EQ(reports.size(), test_set.size());
    for (double v : aggregate(reports).values()) EXPECT_LE(std::abs(v), 1e-6);

    auto unmasked = test_set;
    unmasked[0].mask.reset();
    EXPECT_THROW(evaluate_split([](const ImageTensor<double>& x) { return x; }, unmasked), DataError);
}

TEST(Evaluate, UsesGroundTruthMask) {
    const auto test_set = load_split<float>(shared_dataset(), "test", 48, true);
    // a model that is perfect on the face and wrong everywhere else
    const auto by_id = [&](const ImageTensor<double>& x) {
        for (const auto& s : test_set) {
            if (s.image.cast<double>() != x) continue;
            auto out = x;
            for (std::size_t p = 0; p < out.pixels(); ++p)
                if ((*s.mask)[p] == 0.0f)
                    for (int c = 0; c < 3; ++c) out[p * 3 + c] = 1.0 - out[p * 3 + c];
            return out;
        }
        return x;
    };
    for (double v : aggregate(evaluate_split(by_id, test_set)).values()) EXPECT_LE(std::abs(v), 1e-6);
}
