#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pir/rng.hpp"

namespace pir {

// Grayscale raster, row-major, intensities in [0, 1] (0 = ink, 1 = paper).
class RasterImage {
public:
    RasterImage() = default;
    RasterImage(std::size_t width, std::size_t height, float fill = 1.0f);
    RasterImage(std::size_t width, std::size_t height, std::vector<float> pixels);

    std::size_t width() const { return width_; }
    std::size_t height() const { return height_; }

    float at(std::size_t x, std::size_t y) const { return pixels_[y * width_ + x]; }
    float& at(std::size_t x, std::size_t y) { return pixels_[y * width_ + x]; }

    const std::vector<float>& pixels() const { return pixels_; }

    friend bool operator==(const RasterImage&, const RasterImage&) = default;

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<float> pixels_;
};

struct AugmentPolicy {
    double flip_prob = 0.5;
    std::pair<double, double> crop_scale_range{0.6, 1.0};
    double erase_prob = 0.25;
    std::pair<double, double> erase_area_range{0.02, 0.2};
    double gridmask_ratio = 0.5;
    std::pair<int, int> gridmask_unit_range{16, 48};
    std::uint64_t seed = 0;

    // Throws std::invalid_argument on out-of-range fields.
    void validate() const;
};

RasterImage horizontal_flip(const RasterImage& img);

// Crop keeps the image aspect ratio: side lengths are round(side * sqrt(scale)),
// clamped to [1, side]. The crop is resized back with bilinear sampling at
// pixel centres, so a full-size crop is an exact identity.
RasterImage random_crop(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng);

// With probability erase_prob, fills one rectangle with 1.0. The rectangle
// has the image aspect ratio and sides round(side * sqrt(area)), so a 10x10
// image with area 0.25 erases exactly a 5x5 block.
RasterImage random_erase(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng);

struct GridMaskResult {
    RasterImage image;
    bool unit_exceeds_image = false;
    int unit = 0;
};

// Square cells of side round((1 - ratio) * unit), repeating every `unit`
// pixels in both axes from a random phase, are set to 1.0. Masked area is
// therefore about (1 - ratio)^2.
GridMaskResult gridmask(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng);

// flip -> crop -> erase -> gridmask, each drawing from its own split of rng.
RasterImage augment(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng);

// Binary PGM (P5), maxval up to 65535.
RasterImage read_pgm(const std::filesystem::path& path);
void write_pgm(const RasterImage& img, const std::filesystem::path& path);

}  // namespace pir
