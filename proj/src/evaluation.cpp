#include "deeppbm/evaluation.hpp"

#include "deeppbm/error.hpp"

namespace deeppbm {

ConfusionCounts confusion(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
    if (predicted.size() != truth.size())
        throw ShapeError("predicted mask has " + std::to_string(predicted.size()) + " pixels, truth has " +
                         std::to_string(truth.size()));
    ConfusionCounts c;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        const bool p = predicted[i] != 0;
        const bool t = truth[i] != 0;
        if (p && t)
            ++c.tp;
        else if (p)
            ++c.fp;
        else if (t)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

Scores precision_recall_f(const ConfusionCounts& c) {
    if (c.tp + c.fp == 0 && c.tp + c.fn == 0) return {1.0, 1.0, 1.0};
    Scores s;
    const auto tp = static_cast<double>(c.tp);
    if (c.tp + c.fp > 0) s.precision = tp / static_cast<double>(c.tp + c.fp);
    if (c.tp + c.fn > 0) s.recall = tp / static_cast<double>(c.tp + c.fn);
    if (c.tp > 0) s.f_measure = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
}

MetricReport evaluate_sequence(const MaskSequence& masks, const GroundTruthMasks& truth) {
    truth.validate();
    if (truth.labeled_indices.empty()) throw ConfigError("no labeled ground-truth frames to evaluate");
    if (truth.frames != masks.frames || truth.height != masks.height || truth.width != masks.width)
        throw ShapeError("ground truth is " + std::to_string(truth.frames) + "x" + std::to_string(truth.height) +
                         "x" + std::to_string(truth.width) + ", masks are " + std::to_string(masks.frames) + "x" +
                         std::to_string(masks.height) + "x" + std::to_string(masks.width));
    MetricReport report;
    for (std::size_t i : truth.labeled_indices) {
        FrameMetrics fm;
        fm.frame = masks.frame_index_offset + i;
        fm.counts = confusion(masks.mask(i), truth.mask(i));
        fm.scores = precision_recall_f(fm.counts);
        report.counts += fm.counts;
        report.per_frame.push_back(fm);
    }
    report.frames = report.per_frame.size();
    report.aggregate = precision_recall_f(report.counts);
    return report;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json frames_json = nlohmann::json::array();
    for (const auto& f : per_frame) {
        frames_json.push_back({{"frame", f.frame},
                               {"tp", f.counts.tp},
                               {"fp", f.counts.fp},
                               {"fn", f.counts.fn},
                               {"tn", f.counts.tn},
                               {"precision", f.scores.precision},
                               {"recall", f.scores.recall},
                               {"f_measure", f.scores.f_measure}});
    }
    return {{"frames", frames},
            {"precision", aggregate.precision},
            {"recall", aggregate.recall},
            {"f_measure", aggregate.f_measure},
            {"per_frame", std::move(frames_json)}};
}

}  // namespace deeppbm
