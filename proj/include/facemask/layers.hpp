#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace facemask::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Batch of feature maps stored as a (batch*height*width, channels) column-major
/// matrix: each column is one channel, and within it image b occupies rows
/// [b*H*W, (b+1)*H*W) in row-major pixel order.
template <typename T>
struct FeatureMap {
    Matrix<T> data;
    int batch = 0;
    int height = 0;
    int width = 0;

    FeatureMap() = default;
    FeatureMap(int channels, int b, int h, int w)
        : data(Matrix<T>::Zero(Eigen::Index(b) * h * w, channels)), batch(b), height(h), width(w) {}

    /// Same shape, contents left uninitialized; every entry must be written.
    static FeatureMap uninitialized(int channels, int b, int h, int w) {
        FeatureMap fm;
        fm.data.resize(Eigen::Index(b) * h * w, channels);
        fm.batch = b;
        fm.height = h;
        fm.width = w;
        return fm;
    }

    int channels() const noexcept { return static_cast<int>(data.cols()); }
    Eigen::Index pixels_per_image() const noexcept { return Eigen::Index(height) * width; }

    /// Pointer to the (b, c) plane.
    T* plane(int b, int c) noexcept { return data.data() + Eigen::Index(c) * data.rows() + Eigen::Index(b) * pixels_per_image(); }
    const T* plane(int b, int c) const noexcept {
        return data.data() + Eigen::Index(c) * data.rows() + Eigen::Index(b) * pixels_per_image();
    }
    auto image_block(int b) { return data.middleRows(Eigen::Index(b) * pixels_per_image(), pixels_per_image()); }
    auto image_block(int b) const { return data.middleRows(Eigen::Index(b) * pixels_per_image(), pixels_per_image()); }
};

inline int conv_output_extent(int in, int stride) { return (in + 2 - 3) / stride + 1; }

namespace detail {

/// Zeroes the entries of a batch-major plane column whose source pixel
/// (y + dy, x + dx) falls outside the h x w image.
template <typename T>
void zero_border(T* col, int batch, int h, int w, int dy, int dx) {
    const Eigen::Index n = Eigen::Index(h) * w;
    for (int b = 0; b < batch; ++b) {
        T* img = col + b * n;
        for (int y = 0; y < h; ++y) {
            T* row = img + Eigen::Index(y) * w;
            if (y + dy < 0 || y + dy >= h) {
                std::fill(row, row + w, T(0));
                continue;
            }
            for (int x = 0; x < -dx; ++x) row[x] = T(0);
            for (int x = w - dx; x < w; ++x) row[x] = T(0);
        }
    }
}

/// Stride-1 gather: column k*Cin + c holds channel c shifted by shifts[k] = (dy, dx),
/// zero outside the image. Rows are batch-major pixels, like FeatureMap::data.
template <typename T, std::size_t K>
void im2col_shifted(const FeatureMap<T>& in, const std::array<std::pair<int, int>, K>& shifts, Matrix<T>& cols) {
    const int cin = in.channels();
    const Eigen::Index n = in.data.rows();
    cols.resize(n, Eigen::Index(K) * cin);
    for (std::size_t k = 0; k < K; ++k) {
        const auto [dy, dx] = shifts[k];
        const Eigen::Index s = Eigen::Index(dy) * in.width + dx;
        const Eigen::Index lo = std::max<Eigen::Index>(0, -s);
        const Eigen::Index hi = std::min(n, n - s);
        for (int c = 0; c < cin; ++c) {
            const T* src = in.data.col(c).data();
            T* dst = cols.col(Eigen::Index(k) * cin + c).data();
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo + s, src + hi + s, dst + lo);
            std::fill(dst + hi, dst + n, T(0));
            zero_border(dst, in.batch, in.height, in.width, dy, dx);
        }
    }
}

/// Adjoint of im2col_shifted; clobbers `cols`.
template <typename T, std::size_t K>
void col2im_shifted(Matrix<T>& cols, const std::array<std::pair<int, int>, K>& shifts, FeatureMap<T>& grad_in) {
    const int cin = grad_in.channels();
    const Eigen::Index n = grad_in.data.rows();
    for (std::size_t k = 0; k < K; ++k) {
        const auto [dy, dx] = shifts[k];
        const Eigen::Index s = Eigen::Index(dy) * grad_in.width + dx;
        const Eigen::Index lo = std::max<Eigen::Index>(0, -s);
        const Eigen::Index hi = std::min(n, n - s);
        for (int c = 0; c < cin; ++c) {
            T* src = cols.col(Eigen::Index(k) * cin + c).data();
            zero_border(src, grad_in.batch, grad_in.height, grad_in.width, dy, dx);
            T* dst = grad_in.data.col(c).data();
            for (Eigen::Index p = lo; p < hi; ++p) dst[p + s] += src[p];
        }
    }
}

/// col[p] = col[p + s] (zero outside the image), the in-place form of one
/// im2col_shifted column.
template <typename T>
void shift_in_place(T* col, int batch, int h, int w, int dy, int dx) {
    const Eigen::Index n = Eigen::Index(batch) * h * w;
    const Eigen::Index s = Eigen::Index(dy) * w + dx;
    if (s > 0) {
        std::copy(col + s, col + n, col);
        std::fill(col + n - s, col + n, T(0));
    } else if (s < 0) {
        std::copy_backward(col, col + n + s, col + n);
        std::fill(col, col - s, T(0));
    }
    zero_border(col, batch, h, w, dy, dx);
}

/// Stride-1 convolution over an arbitrary tap set: out(p) = sum_k in(p + shifts[k]) W_k,
/// where W_k is rows [k*Cin, (k+1)*Cin) of `weight`. Narrowing layers multiply first
/// and shift the (smaller) per-tap outputs; others gather im2col columns.
template <typename T, std::size_t K>
Matrix<T> shifted_conv(const FeatureMap<T>& in, const Eigen::Ref<const Matrix<T>>& weight,
                       const std::array<std::pair<int, int>, K>& shifts) {
    const Eigen::Index cin = in.channels();
    const Eigen::Index cout = weight.cols();
    if (cout >= cin) {
        Matrix<T> cols;
        im2col_shifted(in, shifts, cols);
        return cols * weight;
    }
    Matrix<T> wide(cin, static_cast<Eigen::Index>(K) * cout);
    for (std::size_t k = 0; k < K; ++k) wide.middleCols(Eigen::Index(k) * cout, cout) = weight.middleRows(Eigen::Index(k) * cin, cin);
    Matrix<T> z = in.data * wide;
    for (std::size_t k = 0; k < K; ++k)
        for (Eigen::Index o = 0; o < cout; ++o)
            shift_in_place(z.col(Eigen::Index(k) * cout + o).data(), in.batch, in.height, in.width, shifts[k].first,
                           shifts[k].second);
    Matrix<T> out = z.leftCols(cout);
    for (std::size_t k = 1; k < K; ++k) out += z.middleCols(Eigen::Index(k) * cout, cout);
    return out;
}

/// Backward of shifted_conv; `grad_out` has the input's extent. Accumulates into
/// grad_weight and (when non-null) grad_in.
template <typename T, std::size_t K>
void shifted_conv_backward(const FeatureMap<T>& in, const Eigen::Ref<const Matrix<T>>& weight,
                           const std::array<std::pair<int, int>, K>& shifts, const FeatureMap<T>& grad_out,
                           Eigen::Ref<Matrix<T>> grad_weight, FeatureMap<T>* grad_in) {
    const Eigen::Index cin = in.channels();
    const Eigen::Index cout = weight.cols();
    if (cout >= cin) {
        Matrix<T> cols;
        im2col_shifted(in, shifts, cols);
        grad_weight.noalias() += cols.transpose() * grad_out.data;
        if (grad_in) {
            cols.noalias() = grad_out.data * weight.transpose();
            col2im_shifted(cols, shifts, *grad_in);
        }
        return;
    }
    // d/d in(q) picks up g(q - s_k) W_k^T, and dW_k = in^T g(. - s_k)
    std::array<std::pair<int, int>, K> back;
    for (std::size_t k = 0; k < K; ++k) back[k] = {-shifts[k].first, -shifts[k].second};
    Matrix<T> g_cols;
    im2col_shifted(grad_out, back, g_cols);
    const Matrix<T> g_wide = in.data.transpose() * g_cols;
    for (std::size_t k = 0; k < K; ++k)
        grad_weight.middleRows(Eigen::Index(k) * cin, cin) += g_wide.middleCols(Eigen::Index(k) * cout, cout);
    if (grad_in) {
        Matrix<T> wide_t(static_cast<Eigen::Index>(K) * cout, cin);
        for (std::size_t k = 0; k < K; ++k)
            wide_t.middleRows(Eigen::Index(k) * cout, cout) = weight.middleRows(Eigen::Index(k) * cin, cin).transpose();
        grad_in->data.noalias() += g_cols * wide_t;
    }
}

inline constexpr std::array<std::pair<int, int>, 9> kTaps3x3 = {
    {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 0}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};

/// Stride-2 gather of 3x3 neighbourhoods (zero padding 1) into a
/// (batch*out_h*out_w, 9*Cin) matrix; column index is tap*Cin + c, tap = ky*3 + kx.
template <typename T>
void im2col_stride2(const FeatureMap<T>& in, int out_h, int out_w, Matrix<T>& cols) {
    const int cin = in.channels();
    const int h = in.height;
    const int w = in.width;
    const Eigen::Index per_image = Eigen::Index(out_h) * out_w;
    cols.resize(per_image * in.batch, 9 * cin);
    for (int tap = 0; tap < 9; ++tap) {
        const int ky = tap / 3;
        const int kx = tap % 3;
        for (int c = 0; c < cin; ++c) {
            T* dst = cols.col(tap * cin + c).data();
            for (int b = 0; b < in.batch; ++b) {
                const T* src = in.plane(b, c);
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = 2 * oy + ky - 1;
                    T* row = dst + b * per_image + Eigen::Index(oy) * out_w;
                    if (iy < 0 || iy >= h) {
                        std::fill(row, row + out_w, T(0));
                        continue;
                    }
                    const T* srow = src + Eigen::Index(iy) * w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = 2 * ox + kx - 1;
                        row[ox] = (ix < 0 || ix >= w) ? T(0) : srow[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_stride2(const Matrix<T>& cols, int out_h, int out_w, FeatureMap<T>& grad_in) {
    const int cin = grad_in.channels();
    const int h = grad_in.height;
    const int w = grad_in.width;
    const Eigen::Index per_image = Eigen::Index(out_h) * out_w;
    for (int tap = 0; tap < 9; ++tap) {
        const int ky = tap / 3;
        const int kx = tap % 3;
        for (int c = 0; c < cin; ++c) {
            const T* src = cols.col(tap * cin + c).data();
            for (int b = 0; b < grad_in.batch; ++b) {
                T* dst = grad_in.plane(b, c);
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = 2 * oy + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const T* row = src + b * per_image + Eigen::Index(oy) * out_w;
                    T* drow = dst + Eigen::Index(iy) * w;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = 2 * ox + kx - 1;
                        if (ix >= 0 && ix < w) drow[ix] += row[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 3x3 convolution, zero padding 1, stride 1 or 2. `weight` is (9*Cin, Cout)
/// with row index tap*Cin + c, tap = ky*3 + kx.
template <typename T>
FeatureMap<T> conv3x3_forward(const FeatureMap<T>& in, const Eigen::Ref<const Matrix<T>>& weight,
                              const Eigen::Ref<const Vector<T>>& bias, int stride) {
    if (weight.rows() != 9 * in.channels()) {
        throw std::invalid_argument("conv3x3: weight expects " + std::to_string(weight.rows() / 9) +
                                    " input channels, got " + std::to_string(in.channels()));
    }
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv3x3: stride must be 1 or 2");
    const int oh = conv_output_extent(in.height, stride);
    const int ow = conv_output_extent(in.width, stride);
    auto out = FeatureMap<T>::uninitialized(static_cast<int>(weight.cols()), in.batch, oh, ow);
    if (stride == 1) {
        out.data = detail::shifted_conv<T>(in, weight, detail::kTaps3x3);
    } else {
        Matrix<T> cols;
        detail::im2col_stride2(in, oh, ow, cols);
        out.data.noalias() = cols * weight;
    }
    out.data.rowwise() += bias.transpose();
    return out;
}

/// Backward pass of conv3x3_forward. Accumulates into grad_weight / grad_bias
/// and returns the gradient with respect to the input (empty when not requested).
template <typename T>
FeatureMap<T> conv3x3_backward(const FeatureMap<T>& in, const Eigen::Ref<const Matrix<T>>& weight, int stride,
                               const FeatureMap<T>& grad_out, Eigen::Ref<Matrix<T>> grad_weight,
                               Eigen::Ref<Vector<T>> grad_bias, bool need_input_grad = true) {
    const int oh = grad_out.height;
    const int ow = grad_out.width;
    FeatureMap<T> grad_in = need_input_grad ? FeatureMap<T>(in.channels(), in.batch, in.height, in.width) : FeatureMap<T>();
    grad_bias += grad_out.data.colwise().sum().transpose();
    if (stride == 1) {
        detail::shifted_conv_backward<T>(in, weight, detail::kTaps3x3, grad_out, grad_weight,
                                         need_input_grad ? &grad_in : nullptr);
        return grad_in;
    }
    Matrix<T> cols;
    detail::im2col_stride2(in, oh, ow, cols);
    grad_weight.noalias() += cols.transpose() * grad_out.data;
    if (need_input_grad) {
        cols.noalias() = grad_out.data * weight.transpose();
        detail::col2im_stride2(cols, oh, ow, grad_in);
    }
    return grad_in;
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
FeatureMap<T> upsample2_forward(const FeatureMap<T>& in) {
    auto out = FeatureMap<T>::uninitialized(in.channels(), in.batch, in.height * 2, in.width * 2);
    for (int c = 0; c < in.channels(); ++c)
        for (int b = 0; b < in.batch; ++b) {
            const T* src = in.plane(b, c);
            T* dst = out.plane(b, c);
            for (int y = 0; y < out.height; ++y)
                for (int x = 0; x < out.width; ++x) dst[y * out.width + x] = src[(y / 2) * in.width + x / 2];
        }
    return out;
}

template <typename T>
FeatureMap<T> upsample2_backward(const FeatureMap<T>& grad_out) {
    FeatureMap<T> grad_in(grad_out.channels(), grad_out.batch, grad_out.height / 2, grad_out.width / 2);
    for (int c = 0; c < grad_out.channels(); ++c)
        for (int b = 0; b < grad_out.batch; ++b) {
            const T* src = grad_out.plane(b, c);
            T* dst = grad_in.plane(b, c);
            for (int y = 0; y < grad_out.height; ++y)
                for (int x = 0; x < grad_out.width; ++x) dst[(y / 2) * grad_in.width + x / 2] += src[y * grad_out.width + x];
        }
    return grad_in;
}

namespace detail {

/// Kernel rows (or columns) folded into low-resolution tap `a` of output phase `p`:
/// phase 0 takes {0} at offset -1 and {1, 2} at 0; phase 1 takes {0, 1} at 0 and {2} at +1.
inline std::pair<int, int> phase_taps(int p, int a) {
    if (p == 0) return a == 0 ? std::pair{0, 1} : std::pair{1, 3};
    return a == 0 ? std::pair{0, 2} : std::pair{2, 3};
}

inline std::array<std::pair<int, int>, 4> phase_shifts(int py, int px) {
    return {{{py - 1, px - 1}, {py - 1, px}, {py, px - 1}, {py, px}}};
}

/// Effective (4*Cin, Cout) weight of output phase (py, px).
template <typename T>
Matrix<T> phase_weight(const Eigen::Ref<const Matrix<T>>& weight, int cin, int py, int px) {
    Matrix<T> out = Matrix<T>::Zero(4 * cin, weight.cols());
    for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b) {
            const auto [ky0, ky1] = phase_taps(py, a);
            const auto [kx0, kx1] = phase_taps(px, b);
            for (int ky = ky0; ky < ky1; ++ky)
                for (int kx = kx0; kx < kx1; ++kx)
                    out.middleRows((a * 2 + b) * cin, cin) += weight.middleRows((ky * 3 + kx) * cin, cin);
        }
    return out;
}

}  // namespace detail

/// Nearest-neighbour 2x upsampling followed by conv3x3_forward (stride 1),
/// evaluated as four 2x2 convolutions at the input resolution.
template <typename T>
FeatureMap<T> upconv3x3_forward(const FeatureMap<T>& in, const Eigen::Ref<const Matrix<T>>& weight,
                                const Eigen::Ref<const Vector<T>>& bias) {
    const int cin = in.channels();
    if (weight.rows() != 9 * cin) throw std::invalid_argument("upconv3x3: weight does not match input channels");
    const int h = in.height;
    const int w = in.width;
    const int cout = static_cast<int>(weight.cols());
    auto out = FeatureMap<T>::uninitialized(cout, in.batch, 2 * h, 2 * w);
    const Eigen::Index per_image = in.pixels_per_image();
    for (int py = 0; py < 2; ++py)
        for (int px = 0; px < 2; ++px) {
            const Matrix<T> y =
                detail::shifted_conv<T>(in, detail::phase_weight<T>(weight, cin, py, px), detail::phase_shifts(py, px));
            for (int c = 0; c < cout; ++c) {
                const T bc = bias[c];
                for (int b = 0; b < in.batch; ++b) {
                    T* dst = out.plane(b, c);
                    const T* src = y.col(c).data() + b * per_image;
                    for (int i = 0; i < h; ++i) {
                        T* drow = dst + Eigen::Index(2 * i + py) * (2 * w) + px;
                        const T* srow = src + Eigen::Index(i) * w;
                        for (int j = 0; j < w; ++j) drow[2 * j] = srow[j] + bc;
                    }
                }
            }
        }
    return out;
}

template <typename T>
FeatureMap<T> upconv3x3_backward(const FeatureMap<T>& in, const Eigen::Ref<const Matrix<T>>& weight,
                                 const FeatureMap<T>& grad_out, Eigen::Ref<Matrix<T>> grad_weight,
                                 Eigen::Ref<Vector<T>> grad_bias) {
    const int cin = in.channels();
    const int h = in.height;
    const int w = in.width;
    const int cout = static_cast<int>(weight.cols());
    FeatureMap<T> grad_in(cin, in.batch, h, w);
    grad_bias += grad_out.data.colwise().sum().transpose();
    auto g = FeatureMap<T>::uninitialized(cout, in.batch, h, w);
    Matrix<T> gwp(4 * cin, cout);
    for (int py = 0; py < 2; ++py)
        for (int px = 0; px < 2; ++px) {
            for (int c = 0; c < cout; ++c)
                for (int b = 0; b < in.batch; ++b) {
                    const T* src = grad_out.plane(b, c);
                    T* dst = g.plane(b, c);
                    for (int i = 0; i < h; ++i) {
                        const T* srow = src + Eigen::Index(2 * i + py) * (2 * w) + px;
                        T* drow = dst + Eigen::Index(i) * w;
                        for (int j = 0; j < w; ++j) drow[j] = srow[2 * j];
                    }
                }
            gwp.setZero();
            detail::shifted_conv_backward<T>(in, detail::phase_weight<T>(weight, cin, py, px),
                                             detail::phase_shifts(py, px), g, gwp, &grad_in);
            for (int a = 0; a < 2; ++a)
                for (int bb = 0; bb < 2; ++bb) {
                    const auto [ky0, ky1] = detail::phase_taps(py, a);
                    const auto [kx0, kx1] = detail::phase_taps(px, bb);
                    for (int ky = ky0; ky < ky1; ++ky)
                        for (int kx = kx0; kx < kx1; ++kx)
                            grad_weight.middleRows((ky * 3 + kx) * cin, cin) += gwp.middleRows((a * 2 + bb) * cin, cin);
                }
        }
    return grad_in;
}

/// ELU with alpha = 1.
template <typename T>
Matrix<T> elu_forward(const Matrix<T>& x) {
    // exp(min(x, 0)) - 1 is exactly 0 for x > 0; min/max vectorize where select does not
    return ((x.array().min(T(0)).exp() - T(1)) + x.array().max(T(0))).matrix();
}

/// Uses the saved output: d/dx = 1 for x > 0, else elu(x) + 1.
template <typename T>
Matrix<T> elu_backward(const Matrix<T>& out, const Matrix<T>& grad_out) {
    return (grad_out.array() * (out.array().min(T(0)) + T(1))).matrix();
}

template <typename T>
Matrix<T> sigmoid_forward(const Matrix<T>& x) {
    return (T(1) / (T(1) + (-x.array()).exp())).matrix();
}

template <typename T>
Matrix<T> sigmoid_backward(const Matrix<T>& out, const Matrix<T>& grad_out) {
    return (grad_out.array() * out.array() * (T(1) - out.array())).matrix();
}

/// y = x W + b on a (batch, in) matrix; W is (in, out).
template <typename T>
Matrix<T> dense_forward(const Eigen::Ref<const Matrix<T>>& x, const Eigen::Ref<const Matrix<T>>& weight,
                        const Eigen::Ref<const Vector<T>>& bias) {
    Matrix<T> y = x * weight;
    y.rowwise() += bias.transpose();
    return y;
}

template <typename T>
Matrix<T> dense_backward(const Eigen::Ref<const Matrix<T>>& x, const Eigen::Ref<const Matrix<T>>& weight,
                         const Eigen::Ref<const Matrix<T>>& grad_out, Eigen::Ref<Matrix<T>> grad_weight,
                         Eigen::Ref<Vector<T>> grad_bias) {
    grad_weight.noalias() += x.transpose() * grad_out;
    grad_bias += grad_out.colwise().sum().transpose();
    return grad_out * weight.transpose();
}

/// Flattens each image of a feature map into one row of a (batch, C*H*W)
/// matrix; feature index is c*H*W + pixel.
template <typename T>
Matrix<T> flatten(const FeatureMap<T>& fm) {
    const Eigen::Index n = fm.pixels_per_image();
    Matrix<T> out(fm.batch, n * fm.channels());
    for (int b = 0; b < fm.batch; ++b)
        for (int c = 0; c < fm.channels(); ++c)
            for (Eigen::Index p = 0; p < n; ++p) out(b, Eigen::Index(c) * n + p) = fm.plane(b, c)[p];
    return out;
}

/// Inverse of flatten.
template <typename T>
FeatureMap<T> unflatten(const Eigen::Ref<const Matrix<T>>& flat, int channels, int height, int width) {
    auto fm = FeatureMap<T>::uninitialized(channels, static_cast<int>(flat.rows()), height, width);
    const Eigen::Index n = fm.pixels_per_image();
    if (flat.cols() != n * channels) throw std::invalid_argument("unflatten: feature count mismatch");
    for (int b = 0; b < fm.batch; ++b)
        for (int c = 0; c < channels; ++c)
            for (Eigen::Index p = 0; p < n; ++p) fm.plane(b, c)[p] = flat(b, Eigen::Index(c) * n + p);
    return fm;
}

}  // namespace facemask::nn
