#include "protomatch/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "protomatch/error.hpp"

namespace protomatch {

double l2_norm(std::span<const double> values) noexcept {
    double sum = 0.0;
    for (const double v : values) sum += v * v;
    return std::sqrt(sum);
}

NormalizedEmbedding l2_normalize(std::span<const double> values, double epsilon) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw Error(ErrorCode::InvalidArgument,
                        "embedding component " + std::to_string(i) + " is not finite");
        }
    }
    const double norm = l2_norm(values);
    if (!(norm > epsilon)) {
        throw Error(ErrorCode::ZeroVector, "embedding norm " + std::to_string(norm) +
                                               " is not above epsilon");
    }
    std::vector<double> out(values.begin(), values.end());
    for (double& v : out) v /= norm;
    return NormalizedEmbedding(std::move(out));
}

std::size_t SimilarityRow::argmax() const noexcept {
    return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) -
                                    scores.begin());
}

SimilarityRow cosine_scores(const NormalizedEmbedding& z, std::span<const Prototype> prototypes) {
    if (prototypes.empty()) {
        throw Error(ErrorCode::InvalidArgument, "at least one prototype is required");
    }
    SimilarityRow row;
    row.class_ids.reserve(prototypes.size());
    row.scores.reserve(prototypes.size());
    const auto zv = z.values();
    for (const Prototype& p : prototypes) {
        if (p.vector.size() != zv.size()) {
            throw Error(ErrorCode::DimensionMismatch,
                        "embedding dim " + std::to_string(zv.size()) + " vs prototype dim " +
                            std::to_string(p.vector.size()) + " for class " +
                            std::to_string(p.class_id.value));
        }
        double dot = 0.0;
        for (std::size_t i = 0; i < zv.size(); ++i) dot += zv[i] * p.vector[i];
        row.class_ids.push_back(p.class_id);
        row.scores.push_back(dot);
    }
    return row;
}

double softmax_max(std::span<const double> scores) noexcept {
    const double top = *std::max_element(scores.begin(), scores.end());
    double denom = 0.0;
    for (const double s : scores) denom += std::exp(s - top);
    return 1.0 / denom;
}

double mean_corrected(const SimilarityRow& row) noexcept {
    double sum = 0.0;
    for (const double s : row.scores) sum += s;
    const double mean = sum / static_cast<double>(row.scores.size());
    // Rounding in the mean can overshoot the max by an ulp when all scores tie.
    return std::max(0.0, row.s_max() - mean);
}

ScoreBreakdown score_row(const SimilarityRow& row) noexcept {
    ScoreBreakdown b;
    b.predicted = row.predicted_class();
    b.s_max = row.s_max();
    b.p_max = softmax_max(row.scores);
    b.s_filter = filter_score(b.s_max, b.p_max);
    b.s_mc = mean_corrected(row);
    b.s_final = b.s_filter + b.s_mc;
    return b;
}

}  // namespace protomatch
