#include "protomatch/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <set>
#include <string>
#include <thread>
#include <tuple>

#include "protomatch/error.hpp"

namespace protomatch {

namespace {

using ImageKey = std::tuple<std::int64_t, std::int64_t>;

template <std::size_t N>
std::array<double, N> linspace(double start, double stop) {
    // Mirrors numpy.linspace: start + i * step, with the endpoint pinned.
    std::array<double, N> out{};
    const double step = (stop - start) / static_cast<double>(N - 1);
    for (std::size_t i = 0; i < N; ++i) out[i] = start + static_cast<double>(i) * step;
    out[N - 1] = stop;
    return out;
}

std::vector<std::size_t> order_by_score(std::span<const ScoredDetection> dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dets[a].score > dets[b].score;
    });
    return order;
}

// One image and class: detections (score-ordered, capped) and ground truth.
struct Cell {
    std::vector<ScoredDetection> detections;
    std::vector<GroundTruthAnnotation> ground_truth;
};

}  // namespace

std::vector<ScoredDetection> flatten(std::span<const DetectionRun> runs) {
    std::vector<ScoredDetection> out;
    for (const DetectionRun& run : runs) {
        for (const Detection& d : run.detections) {
            out.push_back({run.scene_id, run.image_id, d.class_id, d.bbox, d.score, run.time_s});
        }
    }
    return out;
}

const std::array<double, kIouThresholdCount>& iou_thresholds() noexcept {
    static const auto values = linspace<kIouThresholdCount>(0.5, 0.95);
    return values;
}

const std::array<double, kRecallPointCount>& recall_grid() noexcept {
    static const auto values = linspace<kRecallPointCount>(0.0, 1.0);
    return values;
}

std::vector<MatchLabel> match_detections(std::span<const ScoredDetection> detections,
                                         std::span<const GroundTruthAnnotation> ground_truth,
                                         double iou_threshold) {
    // Non-ignored ground truth is preferred; visit it first.
    std::vector<std::size_t> gt_order(ground_truth.size());
    std::iota(gt_order.begin(), gt_order.end(), std::size_t{0});
    std::stable_sort(gt_order.begin(), gt_order.end(), [&](std::size_t a, std::size_t b) {
        return !ground_truth[a].ignore && ground_truth[b].ignore;
    });

    const double floor = std::min(iou_threshold, 1.0 - 1e-10);
    std::vector<bool> taken(ground_truth.size(), false);
    std::vector<MatchLabel> labels;
    labels.reserve(detections.size());

    for (const ScoredDetection& det : detections) {
        double best = floor;
        std::optional<std::size_t> match;
        for (const std::size_t g : gt_order) {
            const GroundTruthAnnotation& gt = ground_truth[g];
            if (taken[g] || gt.class_id != det.class_id) continue;
            // Once a regular match exists, ignored ground truth cannot win.
            if (match && !ground_truth[*match].ignore && gt.ignore) break;
            const double iou = box_iou(det.bbox, gt.bbox);
            if (iou < best) continue;
            best = iou;
            match = g;
        }
        if (!match) {
            labels.push_back(MatchLabel::FalsePositive);
            continue;
        }
        taken[*match] = true;
        labels.push_back(ground_truth[*match].ignore ? MatchLabel::Ignored
                                                     : MatchLabel::TruePositive);
    }
    return labels;
}

std::optional<double> average_precision(std::span<const MatchLabel> labels, std::size_t n_gt) {
    if (n_gt == 0) return std::nullopt;

    std::vector<double> recall;
    std::vector<double> precision;
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (const MatchLabel label : labels) {
        if (label == MatchLabel::Ignored) continue;
        (label == MatchLabel::TruePositive ? tp : fp) += 1;
        recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    }
    for (std::size_t i = precision.size(); i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }

    double sum = 0.0;
    for (const double r : recall_grid()) {
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / static_cast<double>(kRecallPointCount);
}

ApReport evaluate(std::span<const ScoredDetection> detections, const GroundTruthSet& gt,
                  const EvalOptions& options) {
    const std::set<ClassId> classes(gt.classes.begin(), gt.classes.end());
    std::set<ImageKey> images;
    for (const ImageInfo& im : gt.images) images.insert({im.scene_id, im.image_id});

    std::map<ClassId, std::map<ImageKey, Cell>> cells;
    for (const ClassId c : classes) cells[c];

    for (const GroundTruthAnnotation& a : gt.annotations) {
        if (!classes.contains(a.class_id)) {
            throw Error(ErrorCode::UnknownClass, "annotation class " +
                                                     std::to_string(a.class_id.value) +
                                                     " is not registered");
        }
        const ImageKey key{a.scene_id, a.image_id};
        if (images.contains(key)) cells[a.class_id][key].ground_truth.push_back(a);
    }
    for (const std::size_t i : order_by_score(detections)) {
        const ScoredDetection& d = detections[i];
        if (!classes.contains(d.class_id)) {
            throw Error(ErrorCode::UnknownClass,
                        "detection class " + std::to_string(d.class_id.value) + " is not registered");
        }
        const ImageKey key{d.scene_id, d.image_id};
        if (!images.contains(key)) continue;
        Cell& cell = cells[d.class_id][key];
        if (cell.detections.size() < options.max_detections_per_image) cell.detections.push_back(d);
    }

    // Each class is independent; results land in per-class slots and are
    // reduced in class order below.
    using ClassCells = std::map<ImageKey, Cell>;
    std::vector<std::pair<ClassId, const ClassCells*>> work;
    for (const auto& [cls, by_image] : cells) work.emplace_back(cls, &by_image);
    std::vector<std::optional<std::array<double, kIouThresholdCount>>> results(work.size());

    const auto evaluate_class = [](const ClassCells& by_image)
        -> std::optional<std::array<double, kIouThresholdCount>> {
        std::size_t n_gt = 0;
        for (const auto& [key, cell] : by_image) {
            n_gt += static_cast<std::size_t>(std::count_if(
                cell.ground_truth.begin(), cell.ground_truth.end(),
                [](const GroundTruthAnnotation& a) { return !a.ignore; }));
        }
        if (n_gt == 0) return std::nullopt;

        std::array<double, kIouThresholdCount> per_threshold{};
        for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
            // Per-image labels, concatenated in image order, then re-sorted by
            // score with a stable sort.
            std::vector<ScoredDetection> dets;
            std::vector<MatchLabel> labels;
            for (const auto& [key, cell] : by_image) {
                const auto l = match_detections(cell.detections, cell.ground_truth,
                                                iou_thresholds()[t]);
                dets.insert(dets.end(), cell.detections.begin(), cell.detections.end());
                labels.insert(labels.end(), l.begin(), l.end());
            }
            std::vector<MatchLabel> ordered;
            ordered.reserve(labels.size());
            for (const std::size_t i : order_by_score(dets)) ordered.push_back(labels[i]);

            per_threshold[t] = *average_precision(ordered, n_gt);
        }
        return per_threshold;
    };

    unsigned threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency())
                                            : options.threads;
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(1, work.size())));
    std::atomic<std::size_t> next{0};
    const auto worker = [&] {
        for (std::size_t i = next++; i < work.size(); i = next++) {
            results[i] = evaluate_class(*work[i].second);
        }
    };
    {
        std::vector<std::jthread> pool;
        for (unsigned t = 1; t < threads; ++t) pool.emplace_back(worker);
        worker();
    }

    ApReport report;
    std::array<double, kIouThresholdCount> threshold_sums{};
    for (std::size_t i = 0; i < work.size(); ++i) {
        if (!results[i]) continue;
        double class_sum = 0.0;
        for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
            class_sum += (*results[i])[t];
            threshold_sums[t] += (*results[i])[t];
        }
        report.per_class_ap[work[i].first] = class_sum / static_cast<double>(kIouThresholdCount);
        ++report.evaluated_classes;
    }

    if (report.evaluated_classes > 0) {
        double total = 0.0;
        for (std::size_t t = 0; t < kIouThresholdCount; ++t) {
            report.per_threshold_ap[t] =
                threshold_sums[t] / static_cast<double>(report.evaluated_classes);
            total += report.per_threshold_ap[t];
        }
        report.mean_ap = total / static_cast<double>(kIouThresholdCount);
    }
    return report;
}

}  // namespace protomatch
