#include "protomatch/geometry.hpp"

#include <limits>
#include <string>

#include "protomatch/error.hpp"

namespace protomatch {

namespace {

struct Interval {
    std::uint64_t begin;
    std::uint64_t end;
};

// Foreground runs as half-open pixel intervals.
std::vector<Interval> foreground_intervals(const BinaryMask& mask) {
    std::vector<Interval> out;
    std::uint64_t pos = 0;
    bool foreground = false;
    for (const std::uint32_t run : mask.runs()) {
        if (foreground && run > 0) out.push_back({pos, pos + run});
        pos += run;
        foreground = !foreground;
    }
    return out;
}

}  // namespace

BinaryMask::BinaryMask(std::uint32_t width, std::uint32_t height, std::vector<std::uint32_t> runs)
    : width_(width), height_(height), runs_(std::move(runs)) {
    std::uint64_t total = 0;
    for (const std::uint32_t r : runs_) total += r;
    const std::uint64_t expected = std::uint64_t{width_} * height_;
    if (total != expected) {
        throw Error(ErrorCode::MalformedRle, "runs cover " + std::to_string(total) +
                                                 " pixels, expected " + std::to_string(expected));
    }
}

std::uint64_t BinaryMask::area() const noexcept {
    std::uint64_t total = 0;
    for (std::size_t i = 1; i < runs_.size(); i += 2) total += runs_[i];
    return total;
}

BinaryMask rle_encode(std::span<const std::uint8_t> bitmap, std::uint32_t width,
                      std::uint32_t height) {
    if (width == 0 || height == 0) {
        throw Error(ErrorCode::InvalidArgument, "mask dimensions must be at least 1x1");
    }
    if (bitmap.size() != std::size_t{width} * height) {
        throw Error(ErrorCode::DimensionMismatch,
                    "bitmap has " + std::to_string(bitmap.size()) + " pixels, expected " +
                        std::to_string(std::size_t{width} * height));
    }
    std::vector<std::uint32_t> runs;
    bool current = false;
    std::uint32_t length = 0;
    for (const std::uint8_t px : bitmap) {
        const bool fg = px != 0;
        if (fg != current) {
            runs.push_back(length);
            current = fg;
            length = 0;
        }
        ++length;
    }
    runs.push_back(length);
    return BinaryMask(width, height, std::move(runs));
}

std::vector<std::uint8_t> rle_decode(const BinaryMask& mask) {
    std::vector<std::uint8_t> bitmap;
    bitmap.reserve(std::size_t{mask.width()} * mask.height());
    std::uint8_t value = 0;
    for (const std::uint32_t run : mask.runs()) {
        bitmap.insert(bitmap.end(), run, value);
        value ^= 1;
    }
    return bitmap;
}

BoundingBox mask_to_bbox(const BinaryMask& mask) {
    const std::uint64_t w = mask.width();
    std::uint64_t min_row = std::numeric_limits<std::uint64_t>::max();
    std::uint64_t max_row = 0;
    std::uint64_t min_col = std::numeric_limits<std::uint64_t>::max();
    std::uint64_t max_col = 0;
    bool any = false;

    for (const Interval iv : foreground_intervals(mask)) {
        const std::uint64_t first_row = iv.begin / w;
        const std::uint64_t last_row = (iv.end - 1) / w;
        min_row = std::min(min_row, first_row);
        max_row = std::max(max_row, last_row);
        if (first_row == last_row) {
            min_col = std::min(min_col, iv.begin % w);
            max_col = std::max(max_col, (iv.end - 1) % w);
        } else {
            // A run that wraps a row boundary touches both image edges.
            min_col = 0;
            max_col = w - 1;
        }
        any = true;
    }
    if (!any) throw Error(ErrorCode::EmptyMask, "mask has no foreground pixel");

    return BoundingBox{static_cast<std::int32_t>(min_col), static_cast<std::int32_t>(min_row),
                       static_cast<std::int32_t>(max_col - min_col + 1),
                       static_cast<std::int32_t>(max_row - min_row + 1)};
}

double box_iou(const BoundingBox& a, const BoundingBox& b) noexcept {
    const std::int64_t iw =
        std::max<std::int64_t>(0, std::int64_t{std::min(a.right(), b.right())} - std::max(a.x, b.x));
    const std::int64_t ih = std::max<std::int64_t>(
        0, std::int64_t{std::min(a.bottom(), b.bottom())} - std::max(a.y, b.y));
    const std::int64_t inter = iw * ih;
    if (inter == 0) return 0.0;
    const std::int64_t uni = a.area() + b.area() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
    if (a.width() != b.width() || a.height() != b.height()) {
        throw Error(ErrorCode::DimensionMismatch, "mask IoU requires equally sized masks");
    }
    const auto ia = foreground_intervals(a);
    const auto ib = foreground_intervals(b);
    std::uint64_t inter = 0;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < ia.size() && j < ib.size()) {
        const std::uint64_t lo = std::max(ia[i].begin, ib[j].begin);
        const std::uint64_t hi = std::min(ia[i].end, ib[j].end);
        if (hi > lo) inter += hi - lo;
        if (ia[i].end < ib[j].end) {
            ++i;
        } else {
            ++j;
        }
    }
    const std::uint64_t uni = a.area() + b.area() - inter;
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

MaskProposal make_proposal(BinaryMask mask, double generator_iou, double stability) {
    MaskProposal p;
    p.bbox = mask_to_bbox(mask);
    p.area_px = mask.area();
    p.mask = std::move(mask);
    p.generator_iou = generator_iou;
    p.stability = stability;
    return p;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> items, double threshold) {
    std::vector<double> scores(items.size());
    std::transform(items.begin(), items.end(), scores.begin(),
                   [](const ScoredBox& s) { return s.score; });
    return nms_by(std::span<const double>(scores), threshold, [&](std::size_t a, std::size_t b) {
        return box_iou(items[a].box, items[b].box);
    });
}

}  // namespace protomatch
