#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "facemask/hypothesis.hpp"
#include "facemask/image.hpp"
#include "facemask/layers.hpp"
#include "facemask/losses.hpp"

namespace facemask {

/// Shape-determining configuration of the network.
struct Architecture {
    int resolution = 48;
    int latent_dim = 32;
    int in_channels = 3;
    std::array<int, 3> encoder_channels{16, 32, 64};
    std::array<int, 3> decoder_channels{32, 16, 8};

    int bottleneck() const noexcept { return resolution / 8; }
    int flat_size() const noexcept { return bottleneck() * bottleneck() * encoder_channels[2]; }

    void validate() const {
        if (resolution < 8 || resolution % 8 != 0) {
            throw std::invalid_argument("resolution must be a positive multiple of 8, got " + std::to_string(resolution));
        }
        if (latent_dim < 1) throw std::invalid_argument("latent_dim must be positive");
        if (in_channels != 3) throw std::invalid_argument("the encoder expects 3-channel input");
        for (int c : encoder_channels) if (c < 1) throw std::invalid_argument("encoder channel counts must be positive");
        for (int c : decoder_channels) if (c < 1) throw std::invalid_argument("decoder channel counts must be positive");
    }
    bool operator==(const Architecture&) const = default;
};

/// Layer slots; slot s owns tensors 2s (weight) and 2s+1 (bias).
enum class Slot : int {
    EncConv1, EncConv2, EncConv3, EncMu, EncLogvar,
    ImgDense, ImgConv1, ImgConv2, ImgConv3, ImgOut,
    MaskDense, MaskConv1, MaskConv2, MaskConv3, MaskOut,
};
inline constexpr int kSlotCount = 15;

inline const char* slot_name(Slot s) {
    static constexpr std::array<const char*, kSlotCount> names = {
        "encoder.conv1", "encoder.conv2", "encoder.conv3", "encoder.mu", "encoder.logvar",
        "image_decoder.dense", "image_decoder.conv1", "image_decoder.conv2", "image_decoder.conv3", "image_decoder.out",
        "mask_decoder.dense", "mask_decoder.conv1", "mask_decoder.conv2", "mask_decoder.conv3", "mask_decoder.out",
    };
    return names[static_cast<int>(s)];
}

template <typename T>
struct NamedTensor {
    std::string name;
    std::vector<int> shape;  // {rows, cols} for weights, {n} for biases
    nn::Vector<T> value;

    Eigen::Index rows() const { return shape[0]; }
    Eigen::Index cols() const { return shape.size() > 1 ? shape[1] : 1; }
};

/// Every weight and bias of the encoder, image decoder and mask decoder.
template <typename T>
class VaeParams {
public:
    using MatMap = Eigen::Map<nn::Matrix<T>>;
    using ConstMatMap = Eigen::Map<const nn::Matrix<T>>;

    VaeParams() = default;

    /// All-zero parameters with the architecture's shapes.
    explicit VaeParams(const Architecture& arch) : arch_(arch) {
        arch.validate();
        const auto& e = arch.encoder_channels;
        const auto& d = arch.decoder_channels;
        const int flat = arch.flat_size();
        const int latent = arch.latent_dim;
        // weights are (fan_in, fan_out)
        auto add = [&](Slot s, int rows, int cols) {
            const std::string base = slot_name(s);
            tensors_.push_back({base + ".weight", {rows, cols}, nn::Vector<T>::Zero(Eigen::Index(rows) * cols)});
            tensors_.push_back({base + ".bias", {cols}, nn::Vector<T>::Zero(cols)});
        };
        add(Slot::EncConv1, 9 * arch.in_channels, e[0]);
        add(Slot::EncConv2, 9 * e[0], e[1]);
        add(Slot::EncConv3, 9 * e[1], e[2]);
        add(Slot::EncMu, flat, latent);
        add(Slot::EncLogvar, flat, latent);
        for (int head = 0; head < 2; ++head) {
            const int base = head == 0 ? static_cast<int>(Slot::ImgDense) : static_cast<int>(Slot::MaskDense);
            add(Slot(base), latent, flat);
            add(Slot(base + 1), 9 * e[2], d[0]);
            add(Slot(base + 2), 9 * d[0], d[1]);
            add(Slot(base + 3), 9 * d[1], d[2]);
            add(Slot(base + 4), 9 * d[2], head == 0 ? arch.in_channels : 1);
        }
    }

    const Architecture& architecture() const noexcept { return arch_; }
    std::vector<NamedTensor<T>>& tensors() noexcept { return tensors_; }
    const std::vector<NamedTensor<T>>& tensors() const noexcept { return tensors_; }

    MatMap weight(Slot s) {
        auto& t = tensors_[2 * static_cast<int>(s)];
        return MatMap(t.value.data(), t.rows(), t.cols());
    }
    ConstMatMap weight(Slot s) const {
        const auto& t = tensors_[2 * static_cast<int>(s)];
        return ConstMatMap(t.value.data(), t.rows(), t.cols());
    }
    nn::Vector<T>& bias(Slot s) { return tensors_[2 * static_cast<int>(s) + 1].value; }
    const nn::Vector<T>& bias(Slot s) const { return tensors_[2 * static_cast<int>(s) + 1].value; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += static_cast<std::size_t>(t.value.size());
        return n;
    }

    void set_zero() {
        for (auto& t : tensors_) t.value.setZero();
    }

    template <typename U>
    VaeParams<U> cast() const {
        VaeParams<U> out(arch_);
        for (std::size_t i = 0; i < tensors_.size(); ++i) out.tensors()[i].value = tensors_[i].value.template cast<U>();
        return out;
    }

    bool all_finite() const {
        for (const auto& t : tensors_)
            if (!t.value.allFinite()) return false;
        return true;
    }

    bool operator==(const VaeParams& other) const {
        if (!(arch_ == other.arch_) || tensors_.size() != other.tensors_.size()) return false;
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (tensors_[i].name != other.tensors_[i].name || tensors_[i].shape != other.tensors_[i].shape ||
                tensors_[i].value != other.tensors_[i].value) {
                return false;
            }
        }
        return true;
    }

private:
    Architecture arch_;
    std::vector<NamedTensor<T>> tensors_;
};

/// Deterministic fan-in-scaled uniform weights (limit sqrt(6 / fan_in)), zero biases.
template <typename T = float>
VaeParams<T> init_params(std::uint64_t seed, const Architecture& arch) {
    VaeParams<T> params(arch);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < params.tensors().size(); i += 2) {
        auto& w = params.tensors()[i];
        const double limit = std::sqrt(6.0 / static_cast<double>(w.rows()));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (Eigen::Index k = 0; k < w.value.size(); ++k) w.value[k] = static_cast<T>(dist(rng));
    }
    return params;
}

template <typename T = float>
VaeParams<T> init_params(std::uint64_t seed, int resolution, int latent_dim) {
    Architecture arch;
    arch.resolution = resolution;
    arch.latent_dim = latent_dim;
    return init_params<T>(seed, arch);
}

// ---------------------------------------------------------------------------
// forward passes

/// Packs same-shaped HWC images into a feature map.
template <typename T>
nn::FeatureMap<T> to_feature_map(const std::vector<ImageTensor<T>>& images) {
    if (images.empty()) throw ShapeError("empty image batch");
    const auto& first = images.front();
    auto fm = nn::FeatureMap<T>::uninitialized(first.channels(), static_cast<int>(images.size()), first.height(),
                                                first.width());
    const Eigen::Index n = fm.pixels_per_image();
    for (std::size_t b = 0; b < images.size(); ++b) {
        require_same_shape(images[b], first, "batch");
        fm.image_block(static_cast<int>(b)) =
            Eigen::Map<const nn::Matrix<T>>(images[b].data().data(), first.channels(), n).transpose();
    }
    return fm;
}

template <typename T>
ImageTensor<T> image_of(const nn::FeatureMap<T>& fm, int b) {
    ImageTensor<T> img(fm.height, fm.width, fm.channels());
    const Eigen::Index n = fm.pixels_per_image();
    Eigen::Map<nn::Matrix<T>>(img.data().data(), fm.channels(), n) = fm.image_block(b).transpose();
    return img;
}

template <typename T>
struct EncoderCache {
    nn::FeatureMap<T> input;
    std::array<nn::FeatureMap<T>, 3> activations;  // post-ELU
    nn::Matrix<T> flat;    // (batch, features)
    nn::Matrix<T> mu;      // (batch, latent)
    nn::Matrix<T> logvar;  // (batch, latent)
};

template <typename T>
struct DecoderCache {
    nn::Matrix<T> z;
    nn::FeatureMap<T> seed;                      // dense + ELU, reshaped
    std::array<nn::FeatureMap<T>, 3> activations;
    nn::FeatureMap<T> output;                    // sigmoid output
};

template <typename T>
EncoderCache<T> encode_cached(const VaeParams<T>& params, const nn::FeatureMap<T>& x) {
    const auto& arch = params.architecture();
    if (x.height != arch.resolution || x.width != arch.resolution || x.channels() != arch.in_channels) {
        throw ShapeError("encode: expected " + std::to_string(arch.resolution) + "x" + std::to_string(arch.resolution) +
                         "x" + std::to_string(arch.in_channels) + " input, got " + std::to_string(x.height) + "x" +
                         std::to_string(x.width) + "x" + std::to_string(x.channels()));
    }
    EncoderCache<T> c;
    c.input = x;
    const nn::FeatureMap<T>* prev = &c.input;
    for (int i = 0; i < 3; ++i) {
        const Slot s = Slot(static_cast<int>(Slot::EncConv1) + i);
        auto pre = nn::conv3x3_forward<T>(*prev, params.weight(s), params.bias(s), 2);
        pre.data = nn::elu_forward(pre.data);
        c.activations[i] = std::move(pre);
        prev = &c.activations[i];
    }
    c.flat = nn::flatten(c.activations[2]);
    c.mu = nn::dense_forward<T>(c.flat, params.weight(Slot::EncMu), params.bias(Slot::EncMu));
    c.logvar = nn::dense_forward<T>(c.flat, params.weight(Slot::EncLogvar), params.bias(Slot::EncLogvar));
    return c;
}

/// Posterior parameters for every image in the batch.
template <typename T>
std::vector<GaussianPosterior<T>> encode(const VaeParams<T>& params, const std::vector<ImageTensor<T>>& batch) {
    const auto c = encode_cached(params, to_feature_map(batch));
    std::vector<GaussianPosterior<T>> out(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        for (Eigen::Index d = 0; d < c.mu.cols(); ++d) {
            out[b].mu.push_back(c.mu(Eigen::Index(b), d));
            out[b].logvar.push_back(c.logvar(Eigen::Index(b), d));
        }
    }
    return out;
}

enum class Head { Image, Mask };

template <typename T>
DecoderCache<T> decode_cached(const VaeParams<T>& params, const nn::Matrix<T>& z, Head head) {
    const auto& arch = params.architecture();
    if (z.cols() != arch.latent_dim) {
        throw ShapeError("decode: latent has " + std::to_string(z.cols()) + " dimensions, expected " +
                         std::to_string(arch.latent_dim));
    }
    const int base = head == Head::Image ? static_cast<int>(Slot::ImgDense) : static_cast<int>(Slot::MaskDense);
    const int bottom = arch.bottleneck();
    DecoderCache<T> c;
    c.z = z;
    const nn::Matrix<T> dense = nn::elu_forward<T>(nn::dense_forward<T>(z, params.weight(Slot(base)), params.bias(Slot(base))));
    c.seed = nn::unflatten<T>(dense, arch.encoder_channels[2], bottom, bottom);
    const nn::FeatureMap<T>* prev = &c.seed;
    for (int i = 0; i < 3; ++i) {
        const Slot s = Slot(base + 1 + i);
        auto pre = nn::upconv3x3_forward<T>(*prev, params.weight(s), params.bias(s));
        pre.data = nn::elu_forward(pre.data);
        c.activations[i] = std::move(pre);
        prev = &c.activations[i];
    }
    const Slot out_slot = Slot(base + 4);
    c.output = nn::conv3x3_forward<T>(*prev, params.weight(out_slot), params.bias(out_slot), 1);
    c.output.data = nn::sigmoid_forward(c.output.data);
    return c;
}

template <typename T>
nn::Matrix<T> latent_matrix(const std::vector<std::vector<T>>& zs) {
    if (zs.empty()) throw ShapeError("empty latent batch");
    nn::Matrix<T> z(Eigen::Index(zs.size()), Eigen::Index(zs.front().size()));
    for (std::size_t b = 0; b < zs.size(); ++b) {
        if (zs[b].size() != zs.front().size()) throw ShapeError("latent vectors differ in length");
        z.row(Eigen::Index(b)) = Eigen::Map<const nn::Vector<T>>(zs[b].data(), Eigen::Index(zs[b].size())).transpose();
    }
    return z;
}

template <typename T>
std::vector<ImageTensor<T>> decode_image(const VaeParams<T>& params, const std::vector<std::vector<T>>& zs) {
    const auto c = decode_cached(params, latent_matrix(zs), Head::Image);
    std::vector<ImageTensor<T>> out;
    for (int b = 0; b < c.output.batch; ++b) out.push_back(image_of(c.output, b));
    return out;
}

template <typename T>
std::vector<ImageTensor<T>> decode_mask(const VaeParams<T>& params, const std::vector<std::vector<T>>& zs) {
    const auto c = decode_cached(params, latent_matrix(zs), Head::Mask);
    std::vector<ImageTensor<T>> out;
    for (int b = 0; b < c.output.batch; ++b) out.push_back(image_of(c.output, b));
    return out;
}

// ---------------------------------------------------------------------------
// reparameterization

/// z = mu + exp(logvar / 2) * noise, together with its inputs.
template <typename T>
struct LatentSample {
    GaussianPosterior<T> posterior;
    std::vector<T> noise;
    std::vector<T> z;
};

template <typename T>
LatentSample<T> reparameterize(const GaussianPosterior<T>& post, const std::vector<T>& noise) {
    if (post.mu.size() != post.logvar.size() || post.mu.size() != noise.size()) {
        throw ShapeError("reparameterize: mu, logvar and noise must share a dimension");
    }
    LatentSample<T> s{post, noise, std::vector<T>(noise.size())};
    for (std::size_t d = 0; d < noise.size(); ++d) s.z[d] = post.mu[d] + std::exp(T(0.5) * post.logvar[d]) * noise[d];
    return s;
}

// ---------------------------------------------------------------------------
// backward passes

template <typename T>
nn::Matrix<T> decode_backward(const VaeParams<T>& params, const DecoderCache<T>& c, Head head,
                              const nn::Matrix<T>& grad_output, VaeParams<T>& grads) {
    const int base = head == Head::Image ? static_cast<int>(Slot::ImgDense) : static_cast<int>(Slot::MaskDense);
    nn::FeatureMap<T> g(c.output.channels(), c.output.batch, c.output.height, c.output.width);
    g.data = nn::sigmoid_backward(c.output.data, grad_output);
    const Slot out_slot = Slot(base + 4);
    g = nn::conv3x3_backward<T>(c.activations[2], params.weight(out_slot), 1, g, grads.weight(out_slot),
                                grads.bias(out_slot));
    for (int i = 2; i >= 0; --i) {
        const Slot s = Slot(base + 1 + i);
        g.data = nn::elu_backward(c.activations[i].data, g.data);
        const auto& input = i == 0 ? c.seed : c.activations[i - 1];
        g = nn::upconv3x3_backward<T>(input, params.weight(s), g, grads.weight(s), grads.bias(s));
    }
    const nn::Matrix<T> g_dense = nn::elu_backward<T>(nn::flatten(c.seed), nn::flatten(g));
    return nn::dense_backward<T>(c.z, params.weight(Slot(base)), g_dense, grads.weight(Slot(base)),
                                 grads.bias(Slot(base)));
}

template <typename T>
void encode_backward(const VaeParams<T>& params, const EncoderCache<T>& c, const nn::Matrix<T>& grad_mu,
                     const nn::Matrix<T>& grad_logvar, VaeParams<T>& grads) {
    nn::Matrix<T> g_flat = nn::dense_backward<T>(c.flat, params.weight(Slot::EncMu), grad_mu,
                                                 grads.weight(Slot::EncMu), grads.bias(Slot::EncMu));
    g_flat += nn::dense_backward<T>(c.flat, params.weight(Slot::EncLogvar), grad_logvar,
                                    grads.weight(Slot::EncLogvar), grads.bias(Slot::EncLogvar));
    const auto& a3 = c.activations[2];
    auto g = nn::unflatten<T>(g_flat, a3.channels(), a3.height, a3.width);
    for (int i = 2; i >= 0; --i) {
        const Slot s = Slot(static_cast<int>(Slot::EncConv1) + i);
        g.data = nn::elu_backward(c.activations[i].data, g.data);
        const auto& input = i == 0 ? c.input : c.activations[i - 1];
        g = nn::conv3x3_backward<T>(input, params.weight(s), 2, g, grads.weight(s), grads.bias(s), i > 0);
    }
}

// ---------------------------------------------------------------------------
// objective

/// Batch-mean loss terms. `total = recon + bce + dice + kl_weight * kl`.
struct LossBreakdown {
    double total = 0.0;
    double recon = 0.0;
    double bce = 0.0;
    double dice = 0.0;
    double kl = 0.0;       // unweighted
    double kl_term = 0.0;  // kl_weight * kl
    double grad_norm = 0.0;
};

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Everything the objective needs besides the parameters.
struct ObjectiveConfig {
    HypothesisConfig hypothesis;
    double kl_weight = 1e-3;
    SsimConfig ssim;
};

/// A batch of images with their ground-truth masks (masks may be empty for
/// no-mask hypotheses).
template <typename T>
struct Batch {
    std::vector<ImageTensor<T>> images;
    std::vector<FaceMask<T>> masks;
};

/// Loss and full parameter gradient for one batch, with fixed reparameterization noise
/// (batch, latent).
template <typename T>
LossBreakdown compute_gradients(const VaeParams<T>& params, const Batch<T>& batch, const nn::Matrix<T>& noise,
                                const ObjectiveConfig& cfg, VaeParams<T>& grads) {
    const auto& hyp = cfg.hypothesis;
    const int n = static_cast<int>(batch.images.size());
    if (n == 0) throw ShapeError("compute_gradients: empty batch");
    if (hyp.use_mask && batch.masks.size() != batch.images.size()) {
        throw DataError("hypothesis " + hyp.name() + " needs a mask for every image");
    }
    const auto& arch = params.architecture();
    if (noise.cols() != arch.latent_dim || noise.rows() != n) throw ShapeError("compute_gradients: noise shape mismatch");
    if (grads.tensors().size() != params.tensors().size()) grads = VaeParams<T>(arch);
    grads.set_zero();

    const auto enc = encode_cached(params, to_feature_map(batch.images));
    const nn::Matrix<T> sigma = (enc.logvar.array() * T(0.5)).exp().matrix();
    const nn::Matrix<T> z = enc.mu + sigma.cwiseProduct(noise);

    const auto img_dec = decode_cached(params, z, Head::Image);
    std::optional<DecoderCache<T>> mask_dec;
    if (hyp.use_mask) mask_dec = decode_cached(params, z, Head::Mask);

    LossBreakdown out;
    const T inv_n = T(1) / T(n);
    nn::Matrix<T> g_img(img_dec.output.data.rows(), img_dec.output.data.cols());
    nn::Matrix<T> g_mask;
    if (mask_dec) g_mask.resize(mask_dec->output.data.rows(), mask_dec->output.data.cols());

    const Eigen::Index img_px = img_dec.output.pixels_per_image();
    for (int b = 0; b < n; ++b) {
        const auto pred = image_of(img_dec.output, b);
        const FaceMask<T>* m = hyp.use_mask ? &batch.masks[b] : nullptr;
        const auto rec = composite_loss_terms(pred, batch.images[b], m, hyp.losses, cfg.ssim);
        out.recon += static_cast<double>(rec.total.value);
        g_img.middleRows(Eigen::Index(b) * img_px, img_px) =
            Eigen::Map<const nn::Matrix<T>>(rec.total.gradient.data().data(), pred.channels(), img_px).transpose() * inv_n;
        if (mask_dec) {
            const auto soft = image_of(mask_dec->output, b);
            const auto bce = bce_loss(soft, batch.masks[b]);
            const auto dice = dice_loss(soft, batch.masks[b]);
            out.bce += static_cast<double>(bce.value);
            out.dice += static_cast<double>(dice.value);
            g_mask.middleRows(Eigen::Index(b) * img_px, img_px) =
                (Eigen::Map<const nn::Vector<T>>(bce.gradient.data().data(), img_px) +
                 Eigen::Map<const nn::Vector<T>>(dice.gradient.data().data(), img_px)) * inv_n;
        }
    }
    out.recon /= n;
    out.bce /= n;
    out.dice /= n;

    // KL per image, averaged over the batch
    const Eigen::Index latent = enc.mu.cols();
    nn::Matrix<T> g_mu(n, latent);
    nn::Matrix<T> g_logvar(n, latent);
    const T kl_scale = static_cast<T>(cfg.kl_weight) * inv_n;
    for (int b = 0; b < n; ++b) {
        GaussianPosterior<T> post;
        for (Eigen::Index d = 0; d < latent; ++d) {
            post.mu.push_back(enc.mu(b, d));
            post.logvar.push_back(enc.logvar(b, d));
        }
        const auto kl = kl_diag_gaussian(post);
        out.kl += static_cast<double>(kl.value);
        for (Eigen::Index d = 0; d < latent; ++d) {
            g_mu(b, d) = kl_scale * kl.grad_mu[d];
            g_logvar(b, d) = kl_scale * kl.grad_logvar[d];
        }
    }
    out.kl /= n;
    out.kl_term = cfg.kl_weight * out.kl;
    out.total = out.recon + out.bce + out.dice + out.kl_term;

    auto check = [](double v, const char* term) {
        if (!std::isfinite(v)) throw NonFiniteLoss(std::string("non-finite ") + term + " loss");
    };
    check(out.recon, "reconstruction");
    check(out.bce, "binary cross-entropy");
    check(out.dice, "dice");
    check(out.kl, "KL");

    nn::Matrix<T> g_z = decode_backward(params, img_dec, Head::Image, g_img, grads);
    if (mask_dec) g_z += decode_backward(params, *mask_dec, Head::Mask, g_mask, grads);

    // z = mu + sigma * noise
    g_mu += g_z;
    g_logvar += (g_z.cwiseProduct(sigma).cwiseProduct(noise) * T(0.5));
    encode_backward(params, enc, g_mu, g_logvar, grads);
    return out;
}

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
double global_norm(const VaeParams<T>& grads) {
    double sum = 0.0;
    for (const auto& t : grads.tensors()) sum += t.value.template cast<double>().squaredNorm();
    return std::sqrt(sum);
}

/// Scales the gradient so its global L2 norm is at most `clip_norm`. Returns the pre-clip norm.
template <typename T>
double clip_global_norm(VaeParams<T>& grads, double clip_norm) {
    const double norm = global_norm(grads);
    if (std::isfinite(clip_norm) && norm > clip_norm) {
        const T scale = static_cast<T>(clip_norm / norm);
        for (auto& t : grads.tensors()) t.value *= scale;
    }
    return norm;
}

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct AdamState {
    VaeParams<T> m;
    VaeParams<T> v;
    std::int64_t step = 0;

    AdamState() = default;
    explicit AdamState(const Architecture& arch) : m(arch), v(arch) {}
};

template <typename T>
void adam_update(VaeParams<T>& params, AdamState<T>& state, const VaeParams<T>& grads, const AdamConfig& cfg) {
    if (state.m.tensors().size() != params.tensors().size()) state = AdamState<T>(params.architecture());
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    const T step_size = static_cast<T>(cfg.learning_rate / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg.epsilon);
    for (std::size_t i = 0; i < params.tensors().size(); ++i) {
        auto& p = params.tensors()[i].value;
        auto& m = state.m.tensors()[i].value;
        auto& v = state.v.tensors()[i].value;
        const auto& g = grads.tensors()[i].value;
        m = b1 * m + (T(1) - b1) * g;
        v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
        p.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_bc2 + eps);
    }
}

/// One optimizer step: gradients, global-norm clipping, Adam.
template <typename T>
LossBreakdown training_step(VaeParams<T>& params, AdamState<T>& state, const Batch<T>& batch,
                            const nn::Matrix<T>& noise, const ObjectiveConfig& objective, const AdamConfig& adam,
                            double clip_norm, VaeParams<T>& grad_buffer) {
    LossBreakdown loss = compute_gradients(params, batch, noise, objective, grad_buffer);
    loss.grad_norm = clip_global_norm(grad_buffer, clip_norm);
    adam_update(params, state, grad_buffer, adam);
    if (!params.all_finite()) throw NonFiniteLoss("optimizer step produced non-finite parameters");
    return loss;
}

// ---------------------------------------------------------------------------
// prediction

template <typename T>
struct Reconstruction {
    ImageTensor<T> raw;
    std::optional<ImageTensor<T>> soft_mask;
    ImageTensor<T> composited;
};

/// Decodes z = mu. With a mask decoder, the predicted mask (binarized at 0.5)
/// puts the input's background back; otherwise the raw output is returned.
template <typename T>
Reconstruction<T> reconstruct(const VaeParams<T>& params, const ImageTensor<T>& x, bool use_mask) {
    const auto& arch = params.architecture();
    if (x.height() != arch.resolution || x.width() != arch.resolution || x.channels() != arch.in_channels) {
        throw ShapeError("reconstruct: input " + x.shape_string() + " does not match the model resolution " +
                         std::to_string(arch.resolution));
    }
    const auto enc = encode_cached(params, to_feature_map(std::vector<ImageTensor<T>>{x}));
    Reconstruction<T> r;
    r.raw = image_of(decode_cached(params, enc.mu, Head::Image).output, 0);
    if (use_mask) {
        r.soft_mask = image_of(decode_cached(params, enc.mu, Head::Mask).output, 0);
        r.composited = composite(r.raw, x, binarize_mask(*r.soft_mask, T(0.5)));
    } else {
        r.composited = r.raw;
    }
    return r;
}

}  // namespace facemask
