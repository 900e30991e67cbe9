#include <gtest/gtest.h>

#include "facemask/layers.hpp"
#include "support.hpp"

using namespace facemask::nn;

namespace {

FeatureMap<double> random_map(int c, int b, int h, int w, unsigned seed) {
    std::srand(seed);
    FeatureMap<double> fm(c, b, h, w);
    fm.data.setRandom();
    return fm;
}

double dot(const Matrix<double>& a, const Matrix<double>& b) { return a.cwiseProduct(b).sum(); }

}  // namespace

TEST(Conv3x3, OutputExtent) {
    EXPECT_EQ(conv_output_extent(48, 2), 24);
    EXPECT_EQ(conv_output_extent(7, 2), 4);
    EXPECT_EQ(conv_output_extent(7, 1), 7);
}

// both stride-1 strategies (Cout >= Cin and Cout < Cin) and stride 2
TEST(Conv3x3, MatchesDirectConvolution) {
    for (int stride : {1, 2})
        for (auto [cin, cout] : {std::pair{2, 5}, {5, 2}, {3, 3}}) {
            const auto in = random_map(cin, 3, 7, 6, 10 * cin + stride);
            const Matrix<double> w = Matrix<double>::Random(9 * cin, cout);
            const Vector<double> b = Vector<double>::Random(cout);
            const auto got = conv3x3_forward<double>(in, w, b, stride);
            const auto ref = testsupport::direct_conv3x3(in, w, b, stride);
            ASSERT_EQ(got.height, ref.height);
            ASSERT_EQ(got.width, ref.width);
            EXPECT_LT((got.data - ref.data).cwiseAbs().maxCoeff(), 1e-12) << "stride " << stride << " cin " << cin;
        }
}

TEST(Conv3x3, BackwardIsTheAdjoint) {
    for (int stride : {1, 2})
        for (auto [cin, cout] : {std::pair{2, 5}, {5, 2}}) {
            const auto in = random_map(cin, 2, 6, 5, 3 + cin);
            const Matrix<double> w = Matrix<double>::Random(9 * cin, cout);
            const auto out = conv3x3_forward<double>(in, w, Vector<double>::Zero(cout), stride);
            const auto g = random_map(cout, 2, out.height, out.width, 7);
            Matrix<double> gw = Matrix<double>::Zero(w.rows(), w.cols());
            Vector<double> gb = Vector<double>::Zero(cout);
            const auto gi = conv3x3_backward<double>(in, w, stride, g, gw, gb);
            const double lhs = dot(out.data, g.data);
            EXPECT_NEAR(lhs, dot(in.data, gi.data), 1e-10);
            EXPECT_NEAR(lhs, dot(w, gw), 1e-10);
            EXPECT_LT((gb - g.data.colwise().sum().transpose()).cwiseAbs().maxCoeff(), 1e-12);
        }
}

TEST(Conv3x3, RejectsBadArguments) {
    const auto in = random_map(3, 1, 4, 4, 1);
    EXPECT_THROW(conv3x3_forward<double>(in, Matrix<double>::Zero(18, 2), Vector<double>::Zero(2), 1), std::invalid_argument);
    EXPECT_THROW(conv3x3_forward<double>(in, Matrix<double>::Zero(27, 2), Vector<double>::Zero(2), 3), std::invalid_argument);
}

TEST(Upsample, MatchesIndexArithmetic) {
    const auto in = random_map(3, 2, 3, 4, 2);
    const auto up = upsample2_forward(in);
    EXPECT_EQ(up.data, testsupport::direct_upsample2(in).data);
    const auto g = random_map(3, 2, 6, 8, 5);
    EXPECT_NEAR(dot(up.data, g.data), dot(in.data, upsample2_backward(g).data), 1e-12);
}

TEST(UpConv, EqualsUpsampleThenConvolution) {
    for (auto [cin, cout] : {std::pair{5, 4}, {2, 4}}) {
        const auto in = random_map(cin, 2, 4, 3, 20 + cin);
        const Matrix<double> w = Matrix<double>::Random(9 * cin, cout);
        const Vector<double> b = Vector<double>::Random(cout);
        const auto ref = testsupport::direct_conv3x3(testsupport::direct_upsample2(in), w, b, 1);
        const auto got = upconv3x3_forward<double>(in, w, b);
        ASSERT_EQ(got.height, 8);
        ASSERT_EQ(got.width, 6);
        EXPECT_LT((got.data - ref.data).cwiseAbs().maxCoeff(), 1e-12);

        const auto g = random_map(cout, 2, 8, 6, 9);
        Matrix<double> gw1 = Matrix<double>::Zero(w.rows(), w.cols()), gw2 = gw1;
        Vector<double> gb1 = Vector<double>::Zero(cout), gb2 = gb1;
        const auto gi1 = upsample2_backward(conv3x3_backward<double>(upsample2_forward(in), w, 1, g, gw1, gb1));
        const auto gi2 = upconv3x3_backward<double>(in, w, g, gw2, gb2);
        EXPECT_LT((gi1.data - gi2.data).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((gw1 - gw2).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((gb1 - gb2).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Dense, ForwardAndAdjoint) {
    const Matrix<double> x = Matrix<double>::Random(3, 5);
    const Matrix<double> w = Matrix<double>::Random(5, 4);
    const Vector<double> b = Vector<double>::Random(4);
    const auto y = dense_forward<double>(x, w, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) {
            double s = b[j];
            for (int k = 0; k < 5; ++k) s += x(i, k) * w(k, j);
            EXPECT_NEAR(y(i, j), s, 1e-14);
        }
    const Matrix<double> g = Matrix<double>::Random(3, 4);
    Matrix<double> gw = Matrix<double>::Zero(5, 4);
    Vector<double> gb = Vector<double>::Zero(4);
    const auto gx = dense_backward<double>(x, w, g, gw, gb);
    const Matrix<double> y0 = x * w;
    EXPECT_NEAR(dot(y0, g), dot(x, gx), 1e-12);
    EXPECT_NEAR(dot(y0, g), dot(w, gw), 1e-12);
}

TEST(Activations, ValuesAndDerivatives) {
    Matrix<double> x(1, 5);
    x << -2.0, -0.5, 0.0, 0.5, 3.0;
    const auto e = elu_forward(x);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(e(0, i), x(0, i) > 0 ? x(0, i) : std::expm1(x(0, i)), 1e-15);
    const auto s = sigmoid_forward(x);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(s(0, i), 1.0 / (1.0 + std::exp(-x(0, i))), 1e-15);
    const Matrix<double> ones = Matrix<double>::Ones(1, 5);
    const double h = 1e-6;
    const Matrix<double> de = elu_backward(e, ones);
    const Matrix<double> ds = sigmoid_backward(s, ones);
    for (int i = 0; i < 5; ++i) {
        if (x(0, i) == 0.0) continue;  // kink
        Matrix<double> up = x, down = x;
        up(0, i) += h;
        down(0, i) -= h;
        EXPECT_NEAR(de(0, i), (elu_forward(up)(0, i) - elu_forward(down)(0, i)) / (2 * h), 1e-8);
        EXPECT_NEAR(ds(0, i), (sigmoid_forward(up)(0, i) - sigmoid_forward(down)(0, i)) / (2 * h), 1e-8);
    }
}

TEST(Flatten, ChannelMajorFeatureIndexAndInverse) {
    const auto fm = random_map(3, 2, 2, 4, 4);
    const auto flat = flatten(fm);
    ASSERT_EQ(flat.rows(), 2);
    ASSERT_EQ(flat.cols(), 24);
    EXPECT_EQ(flat(1, 2 * 8 + 5), fm.plane(1, 2)[5]);
    EXPECT_EQ(unflatten<double>(flat, 3, 2, 4).data, fm.data);
    EXPECT_THROW(unflatten<double>(flat, 3, 3, 4), std::invalid_argument);
}
