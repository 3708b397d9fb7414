#pragma once

// Slow reference implementations used to check the engine. None of them
// call into the code path they verify.

#include <cstddef>
#include <span>
#include <vector>

#include "protomatch/evaluation.hpp"
#include "protomatch/geometry.hpp"
#include "protomatch/types.hpp"

namespace protomatch::oracle {

// Greedy NMS found by enumerating every subset of the inputs and keeping
// the unique one that satisfies the greedy fixed point: a box is kept iff
// no kept box of higher priority overlaps it above the threshold.
// Returns kept indices in priority order. Only for n <= 16.
std::vector<std::size_t> brute_force_nms(std::span<const ScoredBox> items, double threshold);

// Pixel-count IoU from rasterised boxes.
double raster_iou(const BoundingBox& a, const BoundingBox& b);

// 50-digit reference for the score chain of one similarity row.
struct ReferenceScores {
    std::size_t argmax;
    double s_max;
    double p_max;
    double s_filter;
    double s_mc;
    double s_final;
};
ReferenceScores reference_scores(std::span<const double> raw_embedding,
                                 const std::vector<std::vector<double>>& prototypes);
// Same chain starting from precomputed similarity scores.
ReferenceScores reference_scores_from_row(std::span<const double> scores);

// Mean of normalized vectors computed in long double.
std::vector<double> reference_prototype(const std::vector<std::vector<double>>& supports);

// Cosine of the angle between every pair, computed in long double.
std::vector<std::vector<double>> reference_cosine_matrix(const std::vector<std::vector<double>>& vectors);

// Interpolated precision at each of the 101 recall points, taken directly
// as the maximum precision over all ranks reaching that recall.
double brute_force_ap(std::span<const MatchLabel> labels, std::size_t n_gt);

// Independent COCO-protocol bbox evaluator (pycocotools semantics:
// maxDets 100, all areas, ignore flags, 101 recall points, 10 IoU
// thresholds). Returns the mean AP, or -1 when no class has ground truth.
double coco_reference_map(std::span<const ScoredDetection> detections, const GroundTruthSet& gt);

}  // namespace protomatch::oracle
