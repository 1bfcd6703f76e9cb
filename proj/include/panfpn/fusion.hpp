#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "panfpn/tensor.hpp"

namespace panfpn {

/// Binary instance mask with its class and confidence.
struct InstancePrediction {
    std::vector<uint8_t> mask;  // (H, W) row-major, 0/1
    int category = 0;
    double score = 0.0;
};

struct FusionConfig {
    double score_threshold = 0.5;
    double keep_fraction = 0.5;
    int stuff_area_min = 4096;
    int other_class_id = -1;  // class discarded during fusion; -1 = none
};

struct SegmentInfo {
    int category = 0;
    bool is_thing = false;
    int area = 0;
    bool crowd = false;
};

/// Per-pixel segment-id image (0 = void) plus its segment table.
struct PanopticMap {
    int h = 0, w = 0;
    std::vector<uint32_t> id_map;
    std::map<uint32_t, SegmentInfo> segments;

    PanopticMap() = default;
    PanopticMap(int h_, int w_) : h(h_), w(w_), id_map(static_cast<size_t>(h_) * w_, 0) {}

    uint32_t& at(int y, int x) { return id_map[static_cast<size_t>(y) * w + x]; }
    uint32_t at(int y, int x) const { return id_map[static_cast<size_t>(y) * w + x]; }

    void validate() const {
        std::map<uint32_t, int> areas;
        for (uint32_t id : id_map) {
            if (id != 0) ++areas[id];
        }
        for (const auto& [id, area] : areas) {
            auto it = segments.find(id);
            if (it == segments.end()) {
                throw std::runtime_error("panoptic map id " + std::to_string(id) +
                                         " missing from segment table");
            }
            if (it->second.area != area) {
                throw std::runtime_error("segment " + std::to_string(id) + " declared area " +
                                         std::to_string(it->second.area) + " but covers " +
                                         std::to_string(area) + " pixels");
            }
        }
        for (const auto& [id, info] : segments) {
            if (!areas.count(id)) {
                throw std::runtime_error("segment table entry " + std::to_string(id) +
                                         " has no pixels in the id map");
            }
        }
    }
};

/// Maps category id to its thing/stuff kind.
using CategoryTable = std::map<int, bool>;  // category -> is_thing

/// Step 1 of panoptic inference: threshold by score, order by descending score (ties: larger
/// original mask, then input order), greedily claim unclaimed pixels, and drop instances
/// whose surviving fraction falls below keep_fraction. Output masks are pairwise disjoint.
inline std::vector<InstancePrediction> resolve_instances(
    const std::vector<InstancePrediction>& instances, const FusionConfig& config, int h, int w) {
    const size_t npx = static_cast<size_t>(h) * w;
    struct Cand {
        size_t idx;
        int area;
    };
    std::vector<Cand> cands;
    for (size_t i = 0; i < instances.size(); ++i) {
        const auto& inst = instances[i];
        if (inst.mask.size() != npx) {
            throw ShapeError("instance mask extent mismatch: expected " + std::to_string(h) + "x" +
                             std::to_string(w));
        }
        if (inst.score < config.score_threshold) continue;
        const int area = static_cast<int>(std::count(inst.mask.begin(), inst.mask.end(), 1));
        if (area == 0) continue;
        cands.push_back({i, area});
    }
    std::stable_sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
        if (instances[a.idx].score != instances[b.idx].score) {
            return instances[a.idx].score > instances[b.idx].score;
        }
        if (a.area != b.area) return a.area > b.area;
        return a.idx < b.idx;
    });

    std::vector<uint8_t> claimed(npx, 0);
    std::vector<InstancePrediction> surviving;
    for (const Cand& c : cands) {
        const auto& inst = instances[c.idx];
        InstancePrediction kept{std::vector<uint8_t>(npx, 0), inst.category, inst.score};
        int kept_area = 0;
        for (size_t p = 0; p < npx; ++p) {
            if (inst.mask[p] && !claimed[p]) {
                kept.mask[p] = 1;
                ++kept_area;
            }
        }
        if (static_cast<double>(kept_area) / c.area < config.keep_fraction) continue;
        for (size_t p = 0; p < npx; ++p) {
            if (kept.mask[p]) claimed[p] = 1;
        }
        surviving.push_back(std::move(kept));
    }
    return surviving;
}

/// Steps 2 and 3: instance pixels win; remaining pixels group into one segment per stuff
/// class; `other`, thing classes, and undersized stuff regions become void. Ids are
/// instances first (resolution order), then stuff classes in ascending class id.
inline PanopticMap merge_semantic(const std::vector<InstancePrediction>& surviving,
                                  const std::vector<int32_t>& semantic_labels,
                                  const FusionConfig& config, const CategoryTable& categories,
                                  int h, int w) {
    const size_t npx = static_cast<size_t>(h) * w;
    if (semantic_labels.size() != npx) {
        throw ShapeError("semantic label map extent mismatch: expected " + std::to_string(h) + "x" +
                         std::to_string(w));
    }
    PanopticMap out(h, w);
    uint32_t next_id = 1;
    for (const auto& inst : surviving) {
        SegmentInfo info{inst.category, true, 0, false};
        for (size_t p = 0; p < npx; ++p) {
            if (inst.mask[p]) {
                out.id_map[p] = next_id;
                ++info.area;
            }
        }
        out.segments[next_id++] = info;
    }
    std::map<int32_t, std::vector<size_t>> stuff_pixels;
    for (size_t p = 0; p < npx; ++p) {
        if (out.id_map[p] != 0) continue;
        const int32_t cls = semantic_labels[p];
        if (cls == config.other_class_id) continue;  // void
        auto it = categories.find(cls);
        if (it == categories.end()) {
            throw std::runtime_error("semantic label " + std::to_string(cls) +
                                     " missing from category table");
        }
        if (it->second) continue;  // thing-class pixels in the semantic map become void
        stuff_pixels[cls].push_back(p);
    }
    for (const auto& [cls, pixels] : stuff_pixels) {
        if (static_cast<int>(pixels.size()) < config.stuff_area_min) continue;
        for (size_t p : pixels) out.id_map[p] = next_id;
        out.segments[next_id++] = {cls, false, static_cast<int>(pixels.size()), false};
    }
    return out;
}

/// Per-pixel argmax of a class distribution; the lowest class id wins ties.
inline std::vector<int32_t> argmax_channels(const Tensor& probs) {
    if (probs.n() != 1) throw ShapeError("argmax_channels expects a single-image tensor");
    const size_t plane = static_cast<size_t>(probs.h()) * probs.w();
    std::vector<int32_t> labels(plane, 0);
    for (size_t p = 0; p < plane; ++p) {
        float best = probs.data()[p];
        int best_c = 0;
        for (int c = 1; c < probs.c(); ++c) {
            const float v = probs.data()[c * plane + p];
            if (v > best) {
                best = v;
                best_c = c;
            }
        }
        labels[p] = best_c;
    }
    return labels;
}

/// Full panoptic inference: argmax the semantic distribution, resolve instance overlaps,
/// then merge with the stuff segmentation.
inline PanopticMap panoptic_fuse(const std::vector<InstancePrediction>& instances,
                                 const Tensor& semantic_probs, const FusionConfig& config,
                                 const CategoryTable& categories) {
    const auto labels = argmax_channels(semantic_probs);
    const auto surviving = resolve_instances(instances, config, semantic_probs.h(), semantic_probs.w());
    return merge_semantic(surviving, labels, config, categories, semantic_probs.h(), semantic_probs.w());
}

}  // namespace panfpn
