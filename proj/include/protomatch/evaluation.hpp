#pragma once

/// @file evaluation.hpp
/// COCO-style box AP averaged over IoU thresholds 0.50:0.05:0.95, the
/// protocol used for BOP 2D detection.
///
/// Matching is greedy per image and class in descending score order; each
/// detection takes the unmatched non-ignored ground truth with the highest
/// IoU >= threshold, falling back to an ignored one (which makes the
/// detection neither TP nor FP). Precision is interpolated from the right
/// and sampled on the 101-point recall grid.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "protomatch/geometry.hpp"
#include "protomatch/pipeline.hpp"
#include "protomatch/types.hpp"

namespace protomatch {

struct GroundTruthAnnotation {
    std::int64_t scene_id = 0;
    std::int64_t image_id = 0;
    ClassId class_id;
    BoundingBox bbox;
    bool ignore = false;

    friend bool operator==(const GroundTruthAnnotation&, const GroundTruthAnnotation&) = default;
};

struct ImageInfo {
    std::int64_t scene_id = 0;
    std::int64_t image_id = 0;
    std::int32_t width = 0;
    std::int32_t height = 0;

    friend bool operator==(const ImageInfo&, const ImageInfo&) = default;
};

struct GroundTruthSet {
    /// Registered classes; detections of any other class are rejected.
    std::vector<ClassId> classes;
    /// Evaluated images; detections on other images are skipped.
    std::vector<ImageInfo> images;
    std::vector<GroundTruthAnnotation> annotations;

    friend bool operator==(const GroundTruthSet&, const GroundTruthSet&) = default;
};

/// Flat detection record, the in-memory form of one BOP result entry.
struct ScoredDetection {
    std::int64_t scene_id = 0;
    std::int64_t image_id = 0;
    ClassId class_id;
    BoundingBox bbox;
    double score = 0.0;
    double time_s = -1.0;

    friend bool operator==(const ScoredDetection&, const ScoredDetection&) = default;
};

std::vector<ScoredDetection> flatten(std::span<const DetectionRun> runs);

enum class MatchLabel { TruePositive, FalsePositive, Ignored };

inline constexpr std::size_t kIouThresholdCount = 10;
inline constexpr std::size_t kRecallPointCount = 101;

/// 0.50, 0.55, ..., 0.95 as produced by numpy.linspace(0.5, 0.95, 10).
const std::array<double, kIouThresholdCount>& iou_thresholds() noexcept;
/// 0.00, 0.01, ..., 1.00 as produced by numpy.linspace(0, 1, 101).
const std::array<double, kRecallPointCount>& recall_grid() noexcept;

/// Labels detections of one image. `detections` must already be in
/// descending score order. Boxes of different classes never match.
std::vector<MatchLabel> match_detections(std::span<const ScoredDetection> detections,
                                         std::span<const GroundTruthAnnotation> ground_truth,
                                         double iou_threshold);

/// 101-point interpolated AP for labels in descending score order.
/// Returns nullopt when n_gt == 0 (the class is excluded from averages).
std::optional<double> average_precision(std::span<const MatchLabel> labels, std::size_t n_gt);

struct EvalOptions {
    /// Highest-scoring detections kept per image and class, as COCO's maxDets.
    std::size_t max_detections_per_image = 100;
    /// Worker threads over classes; 0 = hardware concurrency. The report
    /// does not depend on it.
    unsigned threads = 1;
};

struct ApReport {
    std::map<ClassId, double> per_class_ap;
    /// Keyed by threshold index into iou_thresholds().
    std::array<double, kIouThresholdCount> per_threshold_ap{};
    double mean_ap = 0.0;
    std::size_t evaluated_classes = 0;
};

/// Throws UnknownClass for a detection whose class is not registered.
ApReport evaluate(std::span<const ScoredDetection> detections, const GroundTruthSet& gt,
                  const EvalOptions& options = {});

}  // namespace protomatch
