#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace facemask {

/// Which reconstruction losses are switched on, with their weights.
struct LossSelection {
    bool ssim = false;
    bool l1 = false;
    bool l2 = false;
    double ssim_weight = 1.0;
    double l1_weight = 1.0;
    double l2_weight = 1.0;

    bool any() const noexcept { return ssim || l1 || l2; }
};

/// One row of the ablation grid: mask compositing on/off plus the active losses.
struct HypothesisConfig {
    int id = 0;  // 1..10
    bool use_mask = false;
    LossSelection losses;

    std::string name() const { return "H" + std::to_string(id); }
    bool operator==(const HypothesisConfig& o) const noexcept {
        return id == o.id && use_mask == o.use_mask && losses.ssim == o.losses.ssim &&
               losses.l1 == o.losses.l1 && losses.l2 == o.losses.l2;
    }
};

/// The ten hypotheses, in grid order H1..H10.
inline const std::array<HypothesisConfig, 10>& hypothesis_table() {
    static const std::array<HypothesisConfig, 10> table = [] {
        auto row = [](int id, bool mask, bool ssim, bool l1, bool l2) {
            HypothesisConfig h;
            h.id = id;
            h.use_mask = mask;
            h.losses.ssim = ssim;
            h.losses.l1 = l1;
            h.losses.l2 = l2;
            return h;
        };
        return std::array<HypothesisConfig, 10>{
            row(1, true, true, true, false),   row(2, false, true, true, false),
            row(3, true, false, true, false),  row(4, false, false, true, false),
            row(5, true, true, false, false),  row(6, false, true, false, false),
            row(7, true, false, false, true),  row(8, false, false, false, true),
            row(9, true, true, false, true),   row(10, false, true, false, true),
        };
    }();
    return table;
}

/// Parses "H1".."H10" (case-insensitive 'h'); nullopt for anything else.
inline std::optional<HypothesisConfig> find_hypothesis(std::string_view name) {
    if (name.size() < 2 || (name[0] != 'H' && name[0] != 'h')) return std::nullopt;
    int id = 0;
    for (char c : name.substr(1)) {
        if (c < '0' || c > '9') return std::nullopt;
        id = id * 10 + (c - '0');
        if (id > 10) return std::nullopt;
    }
    if (id < 1 || (name.size() > 2 && name[1] == '0')) return std::nullopt;
    return hypothesis_table()[id - 1];
}

inline HypothesisConfig hypothesis(std::string_view name) {
    auto h = find_hypothesis(name);
    if (!h) throw std::invalid_argument("unknown hypothesis id '" + std::string(name) + "' (expected H1..H10)");
    return *h;
}

/// Mask / no-mask pairs sharing a loss set: (H1,H2), (H3,H4), ..., (H9,H10).
inline std::vector<std::pair<int, int>> mask_pairs() {
    return {{1, 2}, {3, 4}, {5, 6}, {7, 8}, {9, 10}};
}

}  // namespace facemask
