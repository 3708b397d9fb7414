#pragma once

/// @file geometry.hpp
/// Binary masks, pixel boxes and greedy non-maximum suppression.
///
/// Boxes use integer pixel (x, y, w, h) with area w*h, the convention of
/// BOP/COCO detection results. Masks are run-length encoded in row-major
/// order, starting with a (possibly empty) background run.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

namespace protomatch {

struct BoundingBox {
    std::int32_t x = 0;
    std::int32_t y = 0;
    std::int32_t w = 1;
    std::int32_t h = 1;

    std::int64_t area() const noexcept { return std::int64_t{w} * h; }
    std::int32_t right() const noexcept { return x + w; }
    std::int32_t bottom() const noexcept { return y + h; }

    /// w, h >= 1 and x, y >= 0.
    bool valid() const noexcept { return w >= 1 && h >= 1 && x >= 0 && y >= 0; }
    bool fits(std::int32_t image_width, std::int32_t image_height) const noexcept {
        return valid() && right() <= image_width && bottom() <= image_height;
    }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

class BinaryMask {
public:
    BinaryMask() = default;

    /// Takes ownership of `runs`; throws MalformedRle if they do not cover
    /// exactly width*height pixels.
    BinaryMask(std::uint32_t width, std::uint32_t height, std::vector<std::uint32_t> runs);

    std::uint32_t width() const noexcept { return width_; }
    std::uint32_t height() const noexcept { return height_; }
    std::span<const std::uint32_t> runs() const noexcept { return runs_; }

    /// Number of foreground pixels.
    std::uint64_t area() const noexcept;

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    std::uint32_t width_ = 0;
    std::uint32_t height_ = 0;
    std::vector<std::uint32_t> runs_;
};

/// Dense row-major bitmap, one byte per pixel (non-zero = foreground).
BinaryMask rle_encode(std::span<const std::uint8_t> bitmap, std::uint32_t width,
                      std::uint32_t height);
std::vector<std::uint8_t> rle_decode(const BinaryMask& mask);

/// Tightest box around all foreground pixels. Throws EmptyMask.
BoundingBox mask_to_bbox(const BinaryMask& mask);

double box_iou(const BoundingBox& a, const BoundingBox& b) noexcept;

/// Pixel IoU of two equally sized masks, computed on the runs directly.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

struct MaskProposal {
    BinaryMask mask;
    double generator_iou = 1.0;
    double stability = 1.0;
    BoundingBox bbox;
    std::uint64_t area_px = 0;

    friend bool operator==(const MaskProposal&, const MaskProposal&) = default;
};

/// Derives bbox and area from the mask. Throws EmptyMask.
MaskProposal make_proposal(BinaryMask mask, double generator_iou = 1.0, double stability = 1.0);

struct ScoredBox {
    BoundingBox box;
    double score = 0.0;
};

/// Greedy NMS over an arbitrary pairwise overlap measure.
///
/// Candidates are visited by descending score (equal scores by ascending
/// index); a candidate is kept iff its overlap with every kept one is
/// <= threshold. Returns kept indices in keep order.
template <typename Overlap>
std::vector<std::size_t> nms_by(std::span<const double> scores, double threshold,
                                Overlap&& overlap) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::vector<std::size_t> kept;
    for (const std::size_t candidate : order) {
        const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
            return overlap(k, candidate) > threshold;
        });
        if (!suppressed) kept.push_back(candidate);
    }
    return kept;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> items, double threshold);

}  // namespace protomatch
