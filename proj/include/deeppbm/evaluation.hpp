#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeppbm/video_io.hpp"

namespace deeppbm {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    bool operator==(const ConfusionCounts&) const = default;
};

struct Scores {
    double precision = 0.0;
    double recall = 0.0;
    double f_measure = 0.0;
};

ConfusionCounts confusion(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);

/// Undefined ratios are 0, except that an empty prediction against an empty truth
/// scores 1 across the board.
Scores precision_recall_f(const ConfusionCounts& c);

struct FrameMetrics {
    std::size_t frame = 0;  // absolute frame index (sequence offset applied)
    ConfusionCounts counts;
    Scores scores;
};

struct MetricReport {
    std::size_t frames = 0;
    ConfusionCounts counts;  // summed over labeled frames
    Scores aggregate;        // from the summed counts
    std::vector<FrameMetrics> per_frame;

    nlohmann::json to_json() const;
};

/// Micro-averaged metrics over the labeled frames of `truth`.
MetricReport evaluate_sequence(const MaskSequence& masks, const GroundTruthMasks& truth);

}  // namespace deeppbm
