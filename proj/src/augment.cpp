#include "pir/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pir {

RasterImage::RasterImage(std::size_t width, std::size_t height, float fill)
    : width_(width), height_(height), pixels_(width * height, fill) {
    if (width == 0 || height == 0) throw std::invalid_argument("raster dimensions must be positive");
}

RasterImage::RasterImage(std::size_t width, std::size_t height, std::vector<float> pixels)
    : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width == 0 || height == 0) throw std::invalid_argument("raster dimensions must be positive");
    if (pixels_.size() != width * height) throw std::invalid_argument("pixel count does not match dimensions");
    for (float p : pixels_) {
        if (!(p >= 0.0f && p <= 1.0f)) throw std::invalid_argument("pixel intensity outside [0,1]");
    }
}

void AugmentPolicy::validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(flip_prob) || !unit(erase_prob)) throw std::invalid_argument("probabilities must lie in [0,1]");
    if (!(crop_scale_range.first > 0.0 && crop_scale_range.first <= crop_scale_range.second &&
          crop_scale_range.second <= 1.0)) {
        throw std::invalid_argument("crop_scale_range must satisfy 0 < lo <= hi <= 1");
    }
    if (!(erase_area_range.first > 0.0 && erase_area_range.first <= erase_area_range.second &&
          erase_area_range.second < 1.0)) {
        throw std::invalid_argument("erase_area_range must satisfy 0 < lo <= hi < 1");
    }
    if (!(gridmask_ratio > 0.0 && gridmask_ratio <= 1.0)) throw std::invalid_argument("gridmask_ratio must lie in (0,1]");
    if (!(gridmask_unit_range.first >= 1 && gridmask_unit_range.first <= gridmask_unit_range.second)) {
        throw std::invalid_argument("gridmask_unit_range must satisfy 1 <= lo <= hi");
    }
}

RasterImage horizontal_flip(const RasterImage& img) {
    RasterImage out = img;
    const auto w = img.width();
    for (std::size_t y = 0; y < img.height(); ++y) {
        for (std::size_t x = 0; x < w; ++x) out.at(x, y) = img.at(w - 1 - x, y);
    }
    return out;
}

namespace {

std::size_t scaled_side(std::size_t side, double area_fraction) {
    const auto s = static_cast<long>(std::lround(static_cast<double>(side) * std::sqrt(area_fraction)));
    return static_cast<std::size_t>(std::clamp<long>(s, 1, static_cast<long>(side)));
}

float sample_bilinear(const RasterImage& img, std::size_t x0, std::size_t y0, std::size_t cw, std::size_t ch,
                      double sx, double sy) {
    sx = std::clamp(sx, 0.0, static_cast<double>(cw - 1));
    sy = std::clamp(sy, 0.0, static_cast<double>(ch - 1));
    const auto ix = static_cast<std::size_t>(std::floor(sx));
    const auto iy = static_cast<std::size_t>(std::floor(sy));
    const auto jx = std::min(ix + 1, cw - 1);
    const auto jy = std::min(iy + 1, ch - 1);
    const double fx = sx - static_cast<double>(ix);
    const double fy = sy - static_cast<double>(iy);
    const double top = (1 - fx) * img.at(x0 + ix, y0 + iy) + fx * img.at(x0 + jx, y0 + iy);
    const double bot = (1 - fx) * img.at(x0 + ix, y0 + jy) + fx * img.at(x0 + jx, y0 + jy);
    return static_cast<float>(std::clamp((1 - fy) * top + fy * bot, 0.0, 1.0));
}

}  // namespace

RasterImage random_crop(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng) {
    const double scale = rng.uniform(policy.crop_scale_range.first, policy.crop_scale_range.second);
    const auto cw = scaled_side(img.width(), scale);
    const auto ch = scaled_side(img.height(), scale);
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(img.width() - cw)));
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(img.height() - ch)));

    RasterImage out(img.width(), img.height());
    const double rx = static_cast<double>(cw) / static_cast<double>(img.width());
    const double ry = static_cast<double>(ch) / static_cast<double>(img.height());
    for (std::size_t y = 0; y < img.height(); ++y) {
        const double sy = (static_cast<double>(y) + 0.5) * ry - 0.5;
        for (std::size_t x = 0; x < img.width(); ++x) {
            const double sx = (static_cast<double>(x) + 0.5) * rx - 0.5;
            out.at(x, y) = sample_bilinear(img, x0, y0, cw, ch, sx, sy);
        }
    }
    return out;
}

RasterImage random_erase(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng) {
    if (policy.erase_prob <= 0.0 || rng.uniform() >= policy.erase_prob) return img;
    const double area = rng.uniform(policy.erase_area_range.first, policy.erase_area_range.second);
    const auto ew = scaled_side(img.width(), area);
    const auto eh = scaled_side(img.height(), area);
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(img.width() - ew)));
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(img.height() - eh)));
    RasterImage out = img;
    for (std::size_t y = y0; y < y0 + eh; ++y) {
        for (std::size_t x = x0; x < x0 + ew; ++x) out.at(x, y) = 1.0f;
    }
    return out;
}

GridMaskResult gridmask(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng) {
    GridMaskResult res{img, false, 0};
    const int unit = static_cast<int>(rng.uniform_int(policy.gridmask_unit_range.first, policy.gridmask_unit_range.second));
    res.unit = unit;
    if (static_cast<std::size_t>(unit) > std::min(img.width(), img.height())) {
        res.unit_exceeds_image = true;
        return res;
    }
    const auto masked = static_cast<int>(std::lround((1.0 - policy.gridmask_ratio) * unit));
    if (masked <= 0) return res;
    const auto phase_x = static_cast<std::size_t>(rng.uniform_int(0, unit - 1));
    const auto phase_y = static_cast<std::size_t>(rng.uniform_int(0, unit - 1));
    const auto u = static_cast<std::size_t>(unit);
    const auto m = static_cast<std::size_t>(masked);
    for (std::size_t y = 0; y < img.height(); ++y) {
        if ((y + phase_y) % u >= m) continue;
        for (std::size_t x = 0; x < img.width(); ++x) {
            if ((x + phase_x) % u < m) res.image.at(x, y) = 1.0f;
        }
    }
    return res;
}

RasterImage augment(const RasterImage& img, const AugmentPolicy& policy, CounterRng rng) {
    RasterImage out = img;
    CounterRng flip_rng = rng.split("flip");
    if (flip_rng.uniform() < policy.flip_prob) out = horizontal_flip(out);
    out = random_crop(out, policy, rng.split("crop"));
    out = random_erase(out, policy, rng.split("erase"));
    out = gridmask(out, policy, rng.split("gridmask")).image;
    return out;
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string pgm_token(std::istream& in) {
    std::string tok;
    char c;
    while (in.get(c)) {
        if (c == '#') {
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(c);
    }
    return tok;
}

}  // namespace

RasterImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    if (pgm_token(in) != "P5") throw std::runtime_error("not a binary PGM (P5): " + path.string());
    std::size_t w = 0, h = 0;
    int maxval = 0;
    try {
        w = std::stoul(pgm_token(in));
        h = std::stoul(pgm_token(in));
        maxval = std::stoi(pgm_token(in));
    } catch (const std::exception&) {
        throw std::runtime_error("malformed PGM header: " + path.string());
    }
    if (w == 0 || h == 0 || maxval <= 0 || maxval > 65535) throw std::runtime_error("malformed PGM header: " + path.string());

    const std::size_t bpp = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(w * h * bpp);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) throw std::runtime_error("truncated PGM: " + path.string());

    std::vector<float> px(w * h);
    for (std::size_t i = 0; i < px.size(); ++i) {
        const unsigned v = bpp == 2 ? (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1] : raw[i];
        px[i] = std::min(1.0f, static_cast<float>(v) / static_cast<float>(maxval));
    }
    return RasterImage(w, h, std::move(px));
}

void write_pgm(const RasterImage& img, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
    for (float p : img.pixels()) {
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(p, 0.0f, 1.0f) * 255.0f))));
    }
}

}  // namespace pir
