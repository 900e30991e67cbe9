#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "facemask/image.hpp"
#include "facemask/png_io.hpp"

namespace facemask::synth {

// Procedural face-like images with exact masks. All geometry is in pixel
// units of the resolution the spec was sampled for; colors are unit RGB.

using Color = std::array<double, 3>;

enum class Background { Solid, Gradient, Textured };

inline const char* to_string(Background b) {
    switch (b) {
        case Background::Solid: return "solid";
        case Background::Gradient: return "gradient";
        case Background::Textured: return "textured";
    }
    return "?";
}

struct Blob {
    bool rectangle = false;
    double cx = 0, cy = 0, rx = 0, ry = 0;
    Color color{};
    bool operator==(const Blob&) const = default;
};

struct FaceSpec {
    std::uint64_t identity_seed = 0;
    int resolution = 48;

    Color skin{};
    double center_x = 0, center_y = 0;    // pixels
    double axis_x = 0, axis_y = 0;        // semi-axes, pixels
    double rotation = 0;                  // radians

    // features in face-local unit coordinates (u along axis_x, v along axis_y, v down)
    double eye_u = 0, eye_v = 0, eye_radius = 0;  // eye_radius in units of axis_x
    Color eye_color{};
    double mouth_v = 0, mouth_half_width = 0, mouth_curvature = 0, mouth_thickness = 0;
    Color mouth_color{};

    bool has_hair = false;
    double hair_scale = 1.0, hair_lift = 0.0;
    Color hair_color{};

    Background background = Background::Solid;
    Color background_a{}, background_b{};
    double gradient_angle = 0;
    double texture_cell = 8;
    std::uint64_t texture_seed = 0;
    std::vector<Blob> clutter;

    bool operator==(const FaceSpec&) const = default;
};

inline double color_distance(const Color& a, const Color& b) {
    return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

inline constexpr double kMarginPixels = 2.0;
inline constexpr double kMinSkinContrast = 0.3;

/// Half-widths of the axis-aligned bounding box of the rotated face ellipse.
inline std::pair<double, double> ellipse_extent(const FaceSpec& s) {
    const double c = std::cos(s.rotation);
    const double n = std::sin(s.rotation);
    return {std::sqrt(s.axis_x * s.axis_x * c * c + s.axis_y * s.axis_y * n * n),
            std::sqrt(s.axis_x * s.axis_x * n * n + s.axis_y * s.axis_y * c * c)};
}

/// Pixel-space point -> face-local unit coordinates.
inline std::pair<double, double> to_face(const FaceSpec& s, double x, double y) {
    const double dx = x - s.center_x;
    const double dy = y - s.center_y;
    const double c = std::cos(s.rotation);
    const double n = std::sin(s.rotation);
    return {(c * dx + n * dy) / s.axis_x, (-n * dx + c * dy) / s.axis_y};
}

inline bool inside_face(const FaceSpec& s, double x, double y) {
    const auto [u, v] = to_face(s, x, y);
    return u * u + v * v <= 1.0;
}

/// Checks the geometric invariants: margin around the ellipse and features inside it.
inline bool satisfies_invariants(const FaceSpec& s) {
    const auto [ex, ey] = ellipse_extent(s);
    const double r = s.resolution;
    if (s.center_x - ex < kMarginPixels || s.center_x + ex > r - kMarginPixels) return false;
    if (s.center_y - ey < kMarginPixels || s.center_y + ey > r - kMarginPixels) return false;
    // eye discs have radius eye_radius in u units and no more than that in v units
    if (std::hypot(std::abs(s.eye_u) + s.eye_radius, std::abs(s.eye_v) + s.eye_radius) > 1.0) return false;
    // mouth band, bounded by its box
    const double reach = std::max(std::abs(s.mouth_v), std::abs(s.mouth_v + s.mouth_curvature)) + s.mouth_thickness;
    if (std::hypot(s.mouth_half_width, reach) > 1.0) return false;
    if (s.has_hair && color_distance(s.hair_color, s.skin) < kMinSkinContrast) return false;
    return true;
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : rng_(splitmix64(seed)) {}
    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
    double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
    std::uint64_t bits() { return rng_(); }
    Color color() { return {unit(), unit(), unit()}; }
    Color color_away_from(const Color& avoid, double min_distance) {
        for (;;) {
            Color c = color();
            if (color_distance(c, avoid) >= min_distance) return c;
        }
    }

private:
    std::mt19937_64 rng_;
};

}  // namespace detail

/// Deterministic face description for `seed`, laid out for `resolution` pixels.
inline FaceSpec sample_spec(std::uint64_t seed, int resolution = 48) {
    if (resolution < 16) throw std::invalid_argument("sample_spec: resolution must be at least 16");
    detail::Sampler rng(seed);
    FaceSpec s;
    s.identity_seed = seed;
    s.resolution = resolution;
    const double r = resolution;

    const double red = rng.uniform(0.45, 0.95);
    const double green = red * rng.uniform(0.6, 0.85);
    s.skin = {red, green, green * rng.uniform(0.6, 0.9)};

    // shrink at low resolution so the 2-pixel margin always fits
    const double fit = std::min(1.0, (0.5 - (kMarginPixels + 0.25) / r) / 0.42);
    s.axis_x = rng.uniform(0.24, 0.34) * fit * r;
    s.axis_y = rng.uniform(0.30, 0.42) * fit * r;
    if (s.axis_x > s.axis_y) std::swap(s.axis_x, s.axis_y);
    s.rotation = rng.uniform(-25.0, 25.0) * std::numbers::pi / 180.0;
    const auto [ex, ey] = ellipse_extent(s);
    s.center_x = rng.uniform(ex + kMarginPixels, r - ex - kMarginPixels);
    s.center_y = rng.uniform(ey + kMarginPixels, r - ey - kMarginPixels);

    s.eye_u = rng.uniform(0.30, 0.45);
    s.eye_v = -rng.uniform(0.15, 0.35);
    s.eye_radius = rng.uniform(0.08, 0.14);
    s.eye_color = {rng.uniform(0.0, 0.35), rng.uniform(0.0, 0.35), rng.uniform(0.0, 0.35)};
    s.mouth_v = rng.uniform(0.35, 0.50);
    s.mouth_half_width = rng.uniform(0.25, 0.45);
    s.mouth_curvature = rng.uniform(-0.15, 0.2);
    s.mouth_thickness = rng.uniform(0.05, 0.09);
    s.mouth_color = {rng.uniform(0.4, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.1, 0.35)};

    s.has_hair = rng.unit() < 0.7;
    s.hair_scale = rng.uniform(1.08, 1.2);
    s.hair_lift = rng.uniform(0.1, 0.25);
    s.hair_color = rng.color_away_from(s.skin, kMinSkinContrast);
    for (double& c : s.hair_color) c *= 0.6;
    if (color_distance(s.hair_color, s.skin) < kMinSkinContrast) {
        const Color dark{0.1, 0.07, 0.05}, light{0.92, 0.86, 0.62};
        s.hair_color = color_distance(dark, s.skin) >= color_distance(light, s.skin) ? dark : light;
    }

    const double style = rng.unit();
    s.background = style < 0.2 ? Background::Solid : (style < 0.5 ? Background::Gradient : Background::Textured);
    s.background_a = rng.color_away_from(s.skin, kMinSkinContrast);
    s.background_b = rng.color_away_from(s.skin, kMinSkinContrast);
    s.gradient_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    s.texture_cell = rng.uniform(3.0, 9.0) * r / 48.0;
    s.texture_seed = rng.bits();
    if (s.background != Background::Solid) {
        const int blobs = static_cast<int>(rng.uniform(2.0, 7.0));
        for (int i = 0; i < blobs; ++i) {
            Blob b;
            b.rectangle = rng.unit() < 0.5;
            b.cx = rng.uniform(0.0, r);
            b.cy = rng.uniform(0.0, r);
            b.rx = rng.uniform(0.05, 0.2) * r;
            b.ry = rng.uniform(0.05, 0.2) * r;
            b.color = rng.color();
            s.clutter.push_back(b);
        }
    }
    return s;
}

namespace detail {

inline double lattice(std::uint64_t seed, int i, int j) {
    const std::uint64_t h = splitmix64(seed ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(i)) << 32) ^
                                       static_cast<std::uint32_t>(j));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Bilinear value noise in [0, 1].
inline double value_noise(std::uint64_t seed, double x, double y) {
    const int i = static_cast<int>(std::floor(x));
    const int j = static_cast<int>(std::floor(y));
    const double fx = x - i;
    const double fy = y - j;
    const double sx = fx * fx * (3 - 2 * fx);
    const double sy = fy * fy * (3 - 2 * fy);
    const double top = lattice(seed, i, j) * (1 - sx) + lattice(seed, i + 1, j) * sx;
    const double bottom = lattice(seed, i, j + 1) * (1 - sx) + lattice(seed, i + 1, j + 1) * sx;
    return top * (1 - sy) + bottom * sy;
}

inline Color mix(const Color& a, const Color& b, double t) {
    return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

inline Color background_at(const FaceSpec& s, double x, double y) {
    const double r = s.resolution;
    Color c = s.background_a;
    switch (s.background) {
        case Background::Solid:
            return c;
        case Background::Gradient: {
            const double t = ((x / r - 0.5) * std::cos(s.gradient_angle) + (y / r - 0.5) * std::sin(s.gradient_angle)) /
                                 std::numbers::sqrt2 + 0.5;
            c = mix(s.background_a, s.background_b, std::clamp(t, 0.0, 1.0));
            break;
        }
        case Background::Textured: {
            const double n1 = value_noise(s.texture_seed, x / s.texture_cell, y / s.texture_cell);
            const double n2 = value_noise(s.texture_seed + 1, 2 * x / s.texture_cell, 2 * y / s.texture_cell);
            c = mix(s.background_a, s.background_b, std::clamp(0.7 * n1 + 0.3 * n2, 0.0, 1.0));
            break;
        }
    }
    for (const auto& b : s.clutter) {
        const double dx = (x - b.cx) / b.rx;
        const double dy = (y - b.cy) / b.ry;
        const bool hit = b.rectangle ? (std::abs(dx) <= 1 && std::abs(dy) <= 1) : (dx * dx + dy * dy <= 1);
        if (hit) c = b.color;
    }
    return c;
}

inline Color face_at(const FaceSpec& s, double u, double v) {
    // soft top-left lighting
    const double shade = 0.85 + 0.15 * std::clamp(1.0 - 0.5 * std::hypot(u + 0.3, v + 0.3), 0.0, 1.0);
    Color c{s.skin[0] * shade, s.skin[1] * shade, s.skin[2] * shade};
    const double er = s.eye_radius;
    const double ev_scale = s.axis_y / s.axis_x;  // eye discs are round in pixel space
    for (double side : {-1.0, 1.0}) {
        const double du = u - side * s.eye_u;
        const double dv = (v - s.eye_v) * ev_scale;
        if (du * du + dv * dv <= er * er) return s.eye_color;
    }
    if (std::abs(u) <= s.mouth_half_width) {
        const double t = u / s.mouth_half_width;
        const double curve = s.mouth_v + s.mouth_curvature * (1 - t * t);
        if (std::abs(v - curve) <= s.mouth_thickness) return s.mouth_color;
    }
    return c;
}

inline Color color_at(const FaceSpec& s, double x, double y) {
    const auto [u, v] = to_face(s, x, y);
    if (u * u + v * v <= 1.0) return face_at(s, u, v);
    if (s.has_hair) {
        const double hu = u / s.hair_scale;
        const double hv = (v + s.hair_lift) / s.hair_scale;
        if (hu * hu + hv * hv <= 1.0 && v < 0.35) return s.hair_color;
    }
    return background_at(s, x, y);
}

}  // namespace detail

inline constexpr int kSupersample = 4;

/// Rasterizes the face: the image is 4x4 supersampled, the mask is 1 exactly
/// where the face ellipse covers the pixel centre.
inline std::pair<ImageTensor<double>, FaceMask<double>> render(const FaceSpec& spec, int resolution) {
    if (resolution < 16) throw std::invalid_argument("render: resolution must be at least 16");
    FaceSpec s = spec;
    if (resolution != spec.resolution) {
        // rescale geometry to the requested canvas
        const double k = static_cast<double>(resolution) / spec.resolution;
        s.resolution = resolution;
        s.center_x *= k;
        s.center_y *= k;
        s.axis_x *= k;
        s.axis_y *= k;
        s.texture_cell *= k;
        for (auto& b : s.clutter) {
            b.cx *= k;
            b.cy *= k;
            b.rx *= k;
            b.ry *= k;
        }
    }
    ImageTensor<double> img(resolution, resolution, 3);
    FaceMask<double> mask(resolution, resolution, 1);
    const double step = 1.0 / kSupersample;
    for (int row = 0; row < resolution; ++row) {
        for (int col = 0; col < resolution; ++col) {
            Color acc{};
            for (int sy = 0; sy < kSupersample; ++sy)
                for (int sx = 0; sx < kSupersample; ++sx) {
                    const auto c = detail::color_at(s, col + (sx + 0.5) * step, row + (sy + 0.5) * step);
                    for (int k = 0; k < 3; ++k) acc[k] += c[k];
                }
            for (int k = 0; k < 3; ++k) img(row, col, k) = std::clamp(acc[k] / (kSupersample * kSupersample), 0.0, 1.0);
            mask(row, col) = inside_face(s, col + 0.5, row + 0.5) ? 1.0 : 0.0;
        }
    }
    return {std::move(img), std::move(mask)};
}

// ---------------------------------------------------------------------------
// dataset generation

inline constexpr const char* kGeneratorVersion = "synthface-1";

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;

    void validate() const {
        if (train < 0 || val < 0 || test < 0 || std::abs(train + val + test - 1.0) > 1e-9) {
            throw std::invalid_argument("split fractions must be non-negative and sum to 1");
        }
    }
};

struct SplitCounts {
    int train = 0, val = 0, test = 0;
};

inline SplitCounts split_counts(int n, const SplitFractions& f) {
    f.validate();
    SplitCounts c;
    c.train = static_cast<int>(std::lround(n * f.train));
    c.val = std::min(n - c.train, static_cast<int>(std::lround(n * f.val)));
    c.test = n - c.train - c.val;
    return c;
}

struct Manifest {
    int n = 0;
    std::uint64_t seed = 0;
    int resolution = 48;
    SplitFractions fractions;
    SplitCounts counts;
    std::string generator_version = kGeneratorVersion;
    std::string content_hash;  // FNV-1a 64 over every written image/mask/split file, hex

    nlohmann::json to_json() const {
        return {{"n", n},
                {"seed", seed},
                {"resolution", resolution},
                {"fractions", {{"train", fractions.train}, {"val", fractions.val}, {"test", fractions.test}}},
                {"counts", {{"train", counts.train}, {"val", counts.val}, {"test", counts.test}}},
                {"generator_version", generator_version},
                {"content_hash", content_hash}};
    }
};

inline std::string image_name(int index) {
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << index;
    return os.str();
}

class Fnv1a64 {
public:
    void update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001B3ULL;
        }
    }
    void update_file(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw DataError("cannot read " + path.string());
        std::vector<char> buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        update(buf.data(), buf.size());
    }
    std::uint64_t digest() const { return h_; }
    std::string hex() const {
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h_;
        return os.str();
    }

private:
    std::uint64_t h_ = 0xCBF29CE484222325ULL;
};

/// Per-image seed derived from the dataset seed.
inline std::uint64_t image_seed(std::uint64_t dataset_seed, int index) {
    return detail::splitmix64(detail::splitmix64(dataset_seed) + static_cast<std::uint64_t>(index));
}

/// Writes images/, masks/, split.csv and manifest.json under `out_dir`.
inline Manifest generate_dataset(int n, std::uint64_t seed, const std::filesystem::path& out_dir, int resolution = 48,
                                 const SplitFractions& fractions = {}) {
    if (n < 1) throw std::invalid_argument("generate_dataset: n must be positive");
    if (resolution < 16) throw std::invalid_argument("generate_dataset: resolution must be at least 16");
    Manifest m;
    m.n = n;
    m.seed = seed;
    m.resolution = resolution;
    m.fractions = fractions;
    m.counts = split_counts(n, fractions);

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "images", ec);
    std::filesystem::create_directories(out_dir / "masks", ec);
    if (ec || !std::filesystem::is_directory(out_dir / "images")) {
        throw DataError("cannot create dataset directory under " + out_dir.string());
    }

    // split assignment: a seeded permutation of indices
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::mt19937_64 shuffle_rng(detail::splitmix64(seed ^ 0x5EEDULL));
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(shuffle_rng() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[i], order[j]);
    }
    std::vector<const char*> split(n);
    for (int k = 0; k < n; ++k) {
        split[order[k]] = k < m.counts.train ? "train" : (k < m.counts.train + m.counts.val ? "val" : "test");
    }

    Fnv1a64 hash;
    for (int i = 0; i < n; ++i) {
        const auto spec = sample_spec(image_seed(seed, i), resolution);
        const auto [img, mask] = render(spec, resolution);
        const auto name = image_name(i) + ".png";
        save_image(img, out_dir / "images" / name);
        save_image(mask, out_dir / "masks" / name);
        hash.update_file(out_dir / "images" / name);
        hash.update_file(out_dir / "masks" / name);
    }
    {
        std::ofstream os(out_dir / "split.csv", std::ios::trunc);
        if (!os) throw DataError("cannot write " + (out_dir / "split.csv").string());
        for (int i = 0; i < n; ++i) os << image_name(i) << ',' << split[i] << '\n';
    }
    hash.update_file(out_dir / "split.csv");
    m.content_hash = hash.hex();
    std::ofstream os(out_dir / "manifest.json", std::ios::trunc);
    if (!os) throw DataError("cannot write " + (out_dir / "manifest.json").string());
    os << m.to_json().dump(2) << '\n';
    return m;
}

}  // namespace facemask::synth
