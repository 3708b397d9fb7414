#pragma once

/// @file scoring.hpp
/// Similarity scoring of a proposal embedding against class prototypes.
///
/// For a normalized proposal embedding z and prototypes p_c:
///   s_c      = z . p_c                     (prototypes used as stored)
///   p_max    = exp(s_max) / sum_c exp(s_c)
///   S_filter = s_max + p_max               (gates the proposal against tau)
///   s_mc     = s_max - mean_c(s_c)
///   S_final  = s_max + p_max + s_mc        (detection confidence)
/// All arithmetic is double precision.

#include <cstddef>
#include <span>
#include <vector>

#include "protomatch/types.hpp"

namespace protomatch {

inline constexpr double kDefaultNormEpsilon = 1e-12;

class NormalizedEmbedding {
public:
    std::span<const double> values() const noexcept { return values_; }
    std::size_t dim() const noexcept { return values_.size(); }

private:
    friend NormalizedEmbedding l2_normalize(std::span<const double>, double);
    explicit NormalizedEmbedding(std::vector<double> v) : values_(std::move(v)) {}

    std::vector<double> values_;
};

/// Throws ZeroVector when the norm is <= epsilon, InvalidArgument on a
/// non-finite component.
NormalizedEmbedding l2_normalize(std::span<const double> values,
                                 double epsilon = kDefaultNormEpsilon);
inline NormalizedEmbedding l2_normalize(const Embedding& e, double epsilon = kDefaultNormEpsilon) {
    return l2_normalize(std::span<const double>(e.values), epsilon);
}

double l2_norm(std::span<const double> values) noexcept;

struct SimilarityRow {
    std::vector<ClassId> class_ids;
    std::vector<double> scores;

    /// Index of the maximum score; the first (lowest class id in a store's
    /// ordering) wins ties.
    std::size_t argmax() const noexcept;
    double s_max() const noexcept { return scores[argmax()]; }
    ClassId predicted_class() const noexcept { return class_ids[argmax()]; }
};

/// Dot products of `z` with each prototype, in the given order.
/// Throws DimensionMismatch, or InvalidArgument for an empty prototype list.
SimilarityRow cosine_scores(const NormalizedEmbedding& z, std::span<const Prototype> prototypes);

/// Softmax probability of the largest score, evaluated with max subtraction.
double softmax_max(std::span<const double> scores) noexcept;

inline double filter_score(double s_max, double p_max) noexcept { return s_max + p_max; }

/// s_max minus the mean score. Never negative.
double mean_corrected(const SimilarityRow& row) noexcept;

inline double final_score(double s_max, double p_max, double s_mc) noexcept {
    return s_max + p_max + s_mc;
}

struct ScoreBreakdown {
    ClassId predicted;
    double s_max = 0.0;
    double p_max = 0.0;
    double s_filter = 0.0;
    double s_mc = 0.0;
    double s_final = 0.0;
};

ScoreBreakdown score_row(const SimilarityRow& row) noexcept;

}  // namespace protomatch
