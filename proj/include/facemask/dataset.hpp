#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "facemask/image.hpp"
#include "facemask/png_io.hpp"

namespace facemask {

/// One image (and its mask, when present) of a dataset split.
template <typename T>
struct Sample {
    std::string id;
    ImageTensor<T> image;
    std::optional<FaceMask<T>> mask;
};

/// Reads `split.csv` as id -> split name.
inline std::vector<std::pair<std::string, std::string>> read_split(const std::filesystem::path& dir) {
    const auto path = dir / "split.csv";
    std::ifstream is(path);
    if (!is) throw DataError("dataset: missing " + path.string());
    std::vector<std::pair<std::string, std::string>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected id,split");
        auto split = line.substr(comma + 1);
        if (split != "train" && split != "val" && split != "test") {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": unknown split '" + split + "'");
        }
        rows.emplace_back(line.substr(0, comma), std::move(split));
    }
    return rows;
}

/// Loads every sample of `split` from the images/ masks/ split.csv layout.
/// Images must already be `resolution` x `resolution` RGB; masks are binarized at 0.5.
template <typename T = float>
std::vector<Sample<T>> load_split(const std::filesystem::path& dir, const std::string& split, int resolution,
                                  bool require_masks) {
    std::vector<Sample<T>> out;
    for (const auto& [id, which] : read_split(dir)) {
        if (which != split) continue;
        Sample<T> s;
        s.id = id;
        s.image = load_image<T>(dir / "images" / (id + ".png"));
        if (s.image.height() != resolution || s.image.width() != resolution || s.image.channels() != 3) {
            throw DataError("dataset: image " + id + " is " + s.image.shape_string() + ", expected " +
                            std::to_string(resolution) + "x" + std::to_string(resolution) + "x3");
        }
        const auto mask_path = dir / "masks" / (id + ".png");
        if (std::filesystem::exists(mask_path)) {
            auto m = load_image<T>(mask_path);
            if (m.channels() != 1 || !m.same_extent(s.image)) throw DataError("dataset: mask " + id + " has the wrong shape");
            s.mask = binarize_mask(m, T(0.5));
        } else if (require_masks) {
            throw DataError("dataset: missing mask for " + id + " (" + mask_path.string() + ")");
        }
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace facemask
