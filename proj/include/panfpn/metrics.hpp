#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "panfpn/fusion.hpp"

namespace panfpn {

struct EmptyDomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Additive per-category matching statistics; image accumulation is order independent.
struct PqStats {
    struct CategoryStats {
        double iou_sum = 0.0;
        int tp = 0, fp = 0, fn = 0;
    };
    std::map<int, CategoryStats> per_category;

    void merge(const PqStats& o) {
        for (const auto& [cat, s] : o.per_category) {
            auto& dst = per_category[cat];
            dst.iou_sum += s.iou_sum;
            dst.tp += s.tp;
            dst.fp += s.fp;
            dst.fn += s.fn;
        }
    }
};

/// Segment matching for one image pair. Segments match iff same category and IoU > 0.5
/// (matching is unique above that threshold). Ground-truth void pixels are subtracted
/// from prediction IoU denominators; unmatched predictions lying mostly in void or in
/// crowd regions of their own category are not counted as false positives.
inline PqStats pq_match(const PanopticMap& pred, const PanopticMap& gt) {
    if (pred.h != gt.h || pred.w != gt.w) {
        throw ShapeError("pq_match extent mismatch: pred " + std::to_string(pred.h) + "x" +
                         std::to_string(pred.w) + " vs gt " + std::to_string(gt.h) + "x" +
                         std::to_string(gt.w));
    }
    pred.validate();
    gt.validate();

    // joint contingency over (gt_id, pred_id), with id 0 as void on both sides
    std::unordered_map<uint64_t, int> inter;
    for (size_t p = 0; p < pred.id_map.size(); ++p) {
        const uint64_t key = (static_cast<uint64_t>(gt.id_map[p]) << 32) | pred.id_map[p];
        ++inter[key];
    }

    PqStats stats;
    std::map<uint32_t, uint32_t> gt_matched;    // gt id -> pred id
    std::map<uint32_t, uint32_t> pred_matched;  // pred id -> gt id
    for (const auto& [key, count] : inter) {
        const uint32_t gt_id = static_cast<uint32_t>(key >> 32);
        const uint32_t pred_id = static_cast<uint32_t>(key & 0xffffffffu);
        if (gt_id == 0 || pred_id == 0) continue;
        const SegmentInfo& gseg = gt.segments.at(gt_id);
        const SegmentInfo& pseg = pred.segments.at(pred_id);
        if (gseg.crowd || gseg.category != pseg.category) continue;
        auto void_it = inter.find(static_cast<uint64_t>(pred_id));  // gt void x this pred
        const int void_overlap = void_it == inter.end() ? 0 : void_it->second;
        const double uni = gseg.area + pseg.area - count - void_overlap;
        const double iou = count / uni;
        if (iou > 0.5) {
            auto& cat = stats.per_category[gseg.category];
            cat.iou_sum += iou;
            ++cat.tp;
            gt_matched[gt_id] = pred_id;
            pred_matched[pred_id] = gt_id;
        }
    }

    for (const auto& [id, seg] : gt.segments) {
        if (seg.crowd || gt_matched.count(id)) continue;
        ++stats.per_category[seg.category].fn;
    }
    for (const auto& [id, seg] : pred.segments) {
        if (pred_matched.count(id)) continue;
        auto void_it = inter.find(static_cast<uint64_t>(id));
        int excused = void_it == inter.end() ? 0 : void_it->second;
        for (const auto& [gid, gseg] : gt.segments) {
            if (!gseg.crowd || gseg.category != seg.category) continue;
            auto it = inter.find((static_cast<uint64_t>(gid) << 32) | id);
            if (it != inter.end()) excused += it->second;
        }
        if (static_cast<double>(excused) / seg.area > 0.5) continue;
        ++stats.per_category[seg.category].fp;
    }
    return stats;
}

struct PqReport {
    double pq = 0.0, pq_things = 0.0, pq_stuff = 0.0;
    struct CategoryReport {
        int category;
        bool is_thing;
        double pq, sq, rq;
        int tp, fp, fn;
    };
    std::vector<CategoryReport> per_category;
};

/// Percent-scale PQ averaged over categories with any presence (tp + fp + fn > 0), with
/// thing/stuff sub-averages. PQ decomposes per category as SQ * RQ.
inline PqReport compute_pq(const PqStats& stats, const CategoryTable& categories) {
    PqReport rep;
    double sum = 0.0, sum_th = 0.0, sum_st = 0.0;
    int n = 0, n_th = 0, n_st = 0;
    for (const auto& [cat, s] : stats.per_category) {
        if (s.tp + s.fp + s.fn == 0) continue;
        auto it = categories.find(cat);
        if (it == categories.end()) {
            throw std::runtime_error("category " + std::to_string(cat) + " missing from table");
        }
        const double sq = s.tp > 0 ? s.iou_sum / s.tp : 0.0;
        const double rq = s.tp + 0.5 * s.fp + 0.5 * s.fn > 0
                              ? s.tp / (s.tp + 0.5 * s.fp + 0.5 * s.fn)
                              : 0.0;
        const double pq = s.iou_sum / (s.tp + 0.5 * s.fp + 0.5 * s.fn);
        rep.per_category.push_back({cat, it->second, pq * 100.0, sq * 100.0, rq * 100.0, s.tp, s.fp, s.fn});
        sum += pq;
        ++n;
        if (it->second) {
            sum_th += pq;
            ++n_th;
        } else {
            sum_st += pq;
            ++n_st;
        }
    }
    if (n == 0) throw EmptyDomainError("compute_pq: no categories present in gt or pred");
    rep.pq = 100.0 * sum / n;
    rep.pq_things = n_th > 0 ? 100.0 * sum_th / n_th : 0.0;
    rep.pq_stuff = n_st > 0 ? 100.0 * sum_st / n_st : 0.0;
    return rep;
}

/// (K, K) pixel tallies, prediction x ground truth; ignore pixels are never counted.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<int64_t> counts;  // pred * K + gt

    explicit ConfusionMatrix(int k)
        : num_classes(k), counts(static_cast<size_t>(k) * k, 0) {}

    void add(int pred, int gt, int64_t n = 1) {
        counts[static_cast<size_t>(pred) * num_classes + gt] += n;
    }
    int64_t at(int pred, int gt) const {
        return counts[static_cast<size_t>(pred) * num_classes + gt];
    }
    void accumulate(const std::vector<int32_t>& pred, const std::vector<int32_t>& gt,
                    int ignore_label = 255) {
        if (pred.size() != gt.size()) throw ShapeError("confusion matrix input size mismatch");
        for (size_t i = 0; i < pred.size(); ++i) {
            if (gt[i] == ignore_label) continue;
            add(pred[i], gt[i]);
        }
    }
};

struct IouReport {
    double miou = 0.0;  // percent, mean over classes with gt pixels
    double fiou = 0.0;  // percent, gt-frequency weighted
    std::vector<double> per_class;  // percent; NaN for classes without gt pixels
};

inline IouReport compute_miou(const ConfusionMatrix& cm) {
    const int K = cm.num_classes;
    int64_t total = 0;
    for (int64_t c : cm.counts) total += c;
    if (total == 0) throw EmptyDomainError("compute_miou: zero evaluated pixels");

    IouReport rep;
    rep.per_class.assign(K, std::nan(""));
    double sum = 0.0;
    int n = 0;
    for (int c = 0; c < K; ++c) {
        int64_t tp = cm.at(c, c), row = 0, col = 0;
        for (int j = 0; j < K; ++j) {
            row += cm.at(c, j);  // predicted as c
            col += cm.at(j, c);  // gt is c
        }
        if (col == 0) continue;  // class absent from gt
        const double iou = static_cast<double>(tp) / static_cast<double>(row + col - tp);
        rep.per_class[c] = iou * 100.0;
        sum += iou;
        ++n;
        rep.fiou += (static_cast<double>(col) / total) * iou * 100.0;
    }
    if (n == 0) throw EmptyDomainError("compute_miou: no class present in gt");
    rep.miou = 100.0 * sum / n;
    return rep;
}

}  // namespace panfpn
