#pragma once

#include <algorithm>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace facemask {

/// Raised when two operands disagree on height, width or channel count.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised for anything wrong with files on disk: missing, undecodable, unwritable.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// H x W x C array of unit-interval intensities, row-major by (row, column, channel).
///
/// T is float on training paths and double on verification paths; convert
/// explicitly with `cast<U>()`.
template <typename T>
class ImageTensor {
public:
    using value_type = T;

    ImageTensor() = default;
    ImageTensor(int height, int width, int channels, T fill = T(0))
        : height_(height), width_(width), channels_(channels) {
        if (height < 0 || width < 0 || channels <= 0) {
            throw ShapeError("ImageTensor: invalid shape " + shape_string(height, width, channels));
        }
        data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
    }
    ImageTensor(int height, int width, int channels, std::vector<T> data)
        : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
        if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
            throw ShapeError("ImageTensor: data length does not match " +
                             shape_string(height, width, channels));
        }
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t pixels() const noexcept { return static_cast<std::size_t>(height_) * width_; }

    T& operator()(int row, int col, int ch = 0) noexcept {
        return data_[(static_cast<std::size_t>(row) * width_ + col) * channels_ + ch];
    }
    T operator()(int row, int col, int ch = 0) const noexcept {
        return data_[(static_cast<std::size_t>(row) * width_ + col) * channels_ + ch];
    }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    T operator[](std::size_t i) const noexcept { return data_[i]; }

    std::vector<T>& data() noexcept { return data_; }
    const std::vector<T>& data() const noexcept { return data_; }
    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    bool same_shape(const ImageTensor& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }
    bool same_extent(const ImageTensor& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_;
    }

    std::string shape_string() const { return shape_string(height_, width_, channels_); }

    template <typename U>
    ImageTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return ImageTensor<U>(height_, width_, channels_, std::move(out));
    }

    /// Single channel `ch` as a 1-channel image.
    ImageTensor channel(int ch) const {
        ImageTensor out(height_, width_, 1);
        for (std::size_t p = 0; p < pixels(); ++p) out[p] = data_[p * channels_ + ch];
        return out;
    }

    bool operator==(const ImageTensor& other) const = default;

    static std::string shape_string(int h, int w, int c) {
        std::ostringstream os;
        os << h << "x" << w << "x" << c;
        return os.str();
    }

private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 1;
    std::vector<T> data_;
};

/// Binary single-channel map selecting face pixels (1 = face, 0 = background).
template <typename T>
using FaceMask = ImageTensor<T>;

inline void require_same_shape(const auto& a, const auto& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}

template <typename T>
void require_mask_for(const FaceMask<T>& mask, const ImageTensor<T>& img, const char* what) {
    if (mask.channels() != 1 || !mask.same_extent(img)) {
        throw ShapeError(std::string(what) + ": mask " + mask.shape_string() +
                         " does not match image " + img.shape_string());
    }
}

/// out = mask * predicted + (1 - mask) * reference, mask broadcast over channels.
///
/// The derivative of the output with respect to `predicted` is the mask itself.
template <typename T>
ImageTensor<T> composite(const ImageTensor<T>& predicted, const ImageTensor<T>& reference,
                         const FaceMask<T>& mask) {
    require_same_shape(predicted, reference, "composite");
    require_mask_for(mask, predicted, "composite");
    ImageTensor<T> out(predicted.height(), predicted.width(), predicted.channels());
    const int c = predicted.channels();
    for (std::size_t p = 0; p < predicted.pixels(); ++p) {
        const T m = mask[p];
        for (int k = 0; k < c; ++k) {
            const std::size_t i = p * c + k;
            // exact selection for binary masks keeps composite(a, a, m) == a bitwise
            if (m == T(1)) {
                out[i] = predicted[i];
            } else if (m == T(0)) {
                out[i] = reference[i];
            } else {
                out[i] = m * predicted[i] + (T(1) - m) * reference[i];
            }
        }
    }
    return out;
}

/// 1 where soft >= threshold, else 0. Ties go to the face.
template <typename T>
FaceMask<T> binarize_mask(const ImageTensor<T>& soft, T threshold = T(0.5)) {
    if (soft.channels() != 1) {
        throw ShapeError("binarize_mask: expected a single-channel map, got " + soft.shape_string());
    }
    if (!(threshold > T(0) && threshold < T(1))) {
        throw std::invalid_argument("binarize_mask: threshold must lie in (0, 1)");
    }
    FaceMask<T> out(soft.height(), soft.width(), 1);
    for (std::size_t i = 0; i < soft.size(); ++i) out[i] = soft[i] >= threshold ? T(1) : T(0);
    return out;
}

template <typename T>
bool is_binary(const ImageTensor<T>& img) {
    return std::all_of(img.begin(), img.end(), [](T v) { return v == T(0) || v == T(1); });
}

template <typename T>
void clamp_unit(ImageTensor<T>& img) {
    for (auto& v : img) v = std::clamp(v, T(0), T(1));
}

}  // namespace facemask
