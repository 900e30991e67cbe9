#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace facemask {

/// Dense single-channel plane, row-major.
template <typename T>
struct Plane {
    int height = 0;
    int width = 0;
    std::vector<T> values;

    Plane() = default;
    Plane(int h, int w, T fill = T(0)) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

    T& operator()(int r, int c) noexcept { return values[static_cast<std::size_t>(r) * width + c]; }
    T operator()(int r, int c) const noexcept { return values[static_cast<std::size_t>(r) * width + c]; }
    std::size_t size() const noexcept { return values.size(); }
};

/// Normalized 1-D Gaussian taps, centred, odd length.
template <typename T = double>
std::vector<T> gaussian_taps(int size, double sigma) {
    if (size < 1 || size % 2 == 0) throw std::invalid_argument("gaussian window size must be odd and positive");
    if (!(sigma > 0.0)) throw std::invalid_argument("gaussian window sigma must be positive");
    std::vector<double> taps(size);
    const int half = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) {
        const double x = i - half;
        taps[i] = std::exp(-(x * x) / (2.0 * sigma * sigma));
        sum += taps[i];
    }
    std::vector<T> out(size);
    for (int i = 0; i < size; ++i) out[i] = static_cast<T>(taps[i] / sum);
    return out;
}

/// Correlation with a separable kernel over the valid extent (no padding).
template <typename T>
Plane<T> valid_filter(const Plane<T>& in, const std::vector<T>& taps) {
    const int k = static_cast<int>(taps.size());
    const int oh = in.height - k + 1;
    const int ow = in.width - k + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("valid_filter: plane smaller than window");
    Plane<T> rows(in.height, ow);
    for (int r = 0; r < in.height; ++r) {
        const T* src = &in.values[static_cast<std::size_t>(r) * in.width];
        T* dst = &rows.values[static_cast<std::size_t>(r) * ow];
        for (int c = 0; c < ow; ++c) {
            T acc = T(0);
            for (int t = 0; t < k; ++t) acc += taps[t] * src[c + t];
            dst[c] = acc;
        }
    }
    Plane<T> out(oh, ow);
    for (int r = 0; r < oh; ++r) {
        T* dst = &out.values[static_cast<std::size_t>(r) * ow];
        for (int t = 0; t < k; ++t) {
            const T w = taps[t];
            const T* src = &rows.values[static_cast<std::size_t>(r + t) * ow];
            for (int c = 0; c < ow; ++c) dst[c] += w * src[c];
        }
    }
    return out;
}

/// Adjoint of valid_filter: scatters a valid-extent map back onto the full plane.
template <typename T>
Plane<T> valid_filter_adjoint(const Plane<T>& map, const std::vector<T>& taps, int height, int width) {
    const int k = static_cast<int>(taps.size());
    if (map.height != height - k + 1 || map.width != width - k + 1) {
        throw std::invalid_argument("valid_filter_adjoint: extent mismatch");
    }
    const int mh = map.height;
    const int mw = map.width;
    Plane<T> cols(height, mw);
    for (int r = 0; r < mh; ++r) {
        const T* src = &map.values[static_cast<std::size_t>(r) * mw];
        for (int t = 0; t < k; ++t) {
            const T w = taps[t];
            T* dst = &cols.values[static_cast<std::size_t>(r + t) * mw];
            for (int c = 0; c < mw; ++c) dst[c] += w * src[c];
        }
    }
    Plane<T> out(height, width);
    for (int r = 0; r < height; ++r) {
        const T* src = &cols.values[static_cast<std::size_t>(r) * mw];
        T* dst = &out.values[static_cast<std::size_t>(r) * width];
        for (int c = 0; c < mw; ++c) {
            for (int t = 0; t < k; ++t) dst[c + t] += taps[t] * src[c];
        }
    }
    return out;
}

}  // namespace facemask
