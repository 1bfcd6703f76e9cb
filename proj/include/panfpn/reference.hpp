#pragma once

// Independent reference implementations used by the selfcheck command and the test
// suites. These deliberately take the slow, obvious route (per-pixel scans, all-pairs
// matching, double arithmetic) and share no code with the optimized paths they audit.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "panfpn/fusion.hpp"
#include "panfpn/metrics.hpp"
#include "panfpn/ops.hpp"

namespace panfpn::reference {

/// Plain seven-loop cross-correlation with double accumulation.
inline Tensor conv2d(const Tensor& input, const ConvParams& p) {
    const int k = p.k();
    const int oh = conv_out_extent(input.h(), k, p.stride, p.padding, p.dilation);
    const int ow = conv_out_extent(input.w(), k, p.stride, p.padding, p.dilation);
    Tensor out(input.n(), p.c_out(), oh, ow);
    for (int n = 0; n < input.n(); ++n)
        for (int co = 0; co < p.c_out(); ++co)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    double acc = p.bias[co];
                    for (int ci = 0; ci < p.c_in(); ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int sy = y * p.stride - p.padding + ky * p.dilation;
                                const int sx = x * p.stride - p.padding + kx * p.dilation;
                                if (sy < 0 || sy >= input.h() || sx < 0 || sx >= input.w()) continue;
                                acc += static_cast<double>(input.at(n, ci, sy, sx)) *
                                       p.weight.at(co, ci, ky, kx);
                            }
                    out.at(n, co, y, x) = static_cast<float>(acc);
                }
    return out;
}

/// Scalar-loop group normalization (population variance).
inline Tensor group_norm(const Tensor& input, const GroupNormParams& p) {
    Tensor out(input.n(), input.c(), input.h(), input.w());
    const int cpg = input.c() / p.groups;
    for (int n = 0; n < input.n(); ++n) {
        for (int g = 0; g < p.groups; ++g) {
            double sum = 0.0;
            long count = 0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                for (int y = 0; y < input.h(); ++y)
                    for (int x = 0; x < input.w(); ++x) {
                        sum += input.at(n, c, y, x);
                        ++count;
                    }
            const double mean = sum / count;
            double var = 0.0;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                for (int y = 0; y < input.h(); ++y)
                    for (int x = 0; x < input.w(); ++x) {
                        const double d = input.at(n, c, y, x) - mean;
                        var += d * d;
                    }
            var /= count;
            for (int c = g * cpg; c < (g + 1) * cpg; ++c)
                for (int y = 0; y < input.h(); ++y)
                    for (int x = 0; x < input.w(); ++x) {
                        out.at(n, c, y, x) = static_cast<float>(
                            p.gamma[c] * (input.at(n, c, y, x) - mean) / std::sqrt(var + p.epsilon) +
                            p.beta[c]);
                    }
        }
    }
    return out;
}

/// Per-destination-pixel evaluation of the half-pixel-center sampling formula.
inline Tensor bilinear_upsample(const Tensor& input, int factor) {
    Tensor out(input.n(), input.c(), input.h() * factor, input.w() * factor);
    for (int n = 0; n < input.n(); ++n)
        for (int c = 0; c < input.c(); ++c)
            for (int y = 0; y < out.h(); ++y)
                for (int x = 0; x < out.w(); ++x) {
                    double sy = (y + 0.5) / factor - 0.5;
                    double sx = (x + 0.5) / factor - 0.5;
                    sy = std::min(std::max(sy, 0.0), static_cast<double>(input.h() - 1));
                    sx = std::min(std::max(sx, 0.0), static_cast<double>(input.w() - 1));
                    const int y0 = static_cast<int>(std::floor(sy));
                    const int x0 = static_cast<int>(std::floor(sx));
                    const int y1 = std::min(y0 + 1, input.h() - 1);
                    const int x1 = std::min(x0 + 1, input.w() - 1);
                    const double fy = sy - y0, fx = sx - x0;
                    out.at(n, c, y, x) = static_cast<float>(
                        (1 - fy) * ((1 - fx) * input.at(n, c, y0, x0) + fx * input.at(n, c, y0, x1)) +
                        fy * ((1 - fx) * input.at(n, c, y1, x0) + fx * input.at(n, c, y1, x1)));
                }
    return out;
}

/// Pixel-by-pixel application of the three fusion rules, evaluated without any of the
/// incremental bookkeeping of the production path.
inline PanopticMap fuse(const std::vector<InstancePrediction>& instances,
                        const std::vector<int32_t>& semantic_labels, const FusionConfig& config,
                        const CategoryTable& categories, int h, int w) {
    const size_t npx = static_cast<size_t>(h) * w;
    // priority order: score desc, original area desc, input order
    std::vector<size_t> order;
    std::vector<int> areas(instances.size(), 0);
    for (size_t i = 0; i < instances.size(); ++i) {
        for (size_t p = 0; p < npx; ++p) areas[i] += instances[i].mask[p] ? 1 : 0;
        if (instances[i].score >= config.score_threshold && areas[i] > 0) order.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (instances[a].score != instances[b].score) return instances[a].score > instances[b].score;
        if (areas[a] != areas[b]) return areas[a] > areas[b];
        return a < b;
    });

    std::vector<std::vector<uint8_t>> kept_masks;
    std::vector<size_t> kept_idx;
    for (size_t i : order) {
        std::vector<uint8_t> mine(npx, 0);
        int mine_area = 0;
        for (size_t p = 0; p < npx; ++p) {
            if (!instances[i].mask[p]) continue;
            bool taken = false;
            for (const auto& m : kept_masks) taken = taken || m[p];
            if (!taken) {
                mine[p] = 1;
                ++mine_area;
            }
        }
        if (static_cast<double>(mine_area) / areas[i] >= config.keep_fraction) {
            kept_masks.push_back(std::move(mine));
            kept_idx.push_back(i);
        }
    }

    PanopticMap out(h, w);
    uint32_t next_id = 1;
    for (size_t j = 0; j < kept_masks.size(); ++j) {
        SegmentInfo info{instances[kept_idx[j]].category, true, 0, false};
        for (size_t p = 0; p < npx; ++p) {
            if (kept_masks[j][p]) {
                out.id_map[p] = next_id;
                ++info.area;
            }
        }
        out.segments[next_id++] = info;
    }
    // stuff pass, evaluated per class over the whole image
    std::vector<int32_t> classes(semantic_labels);
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    for (int32_t cls : classes) {
        if (cls == config.other_class_id) continue;
        if (categories.at(cls)) continue;
        int area = 0;
        for (size_t p = 0; p < npx; ++p) {
            if (semantic_labels[p] == cls && out.id_map[p] == 0) ++area;
        }
        if (area < config.stuff_area_min || area == 0) continue;
        for (size_t p = 0; p < npx; ++p) {
            if (semantic_labels[p] == cls && out.id_map[p] == 0) out.id_map[p] = next_id;
        }
        out.segments[next_id++] = {cls, false, area, false};
    }
    return out;
}

/// All-pairs matcher: IoU of every (pred, gt) pair by scanning the full image, then the
/// same match/FP/FN rules as the production path.
inline PqStats pq_match(const PanopticMap& pred, const PanopticMap& gt) {
    PqStats stats;
    const size_t npx = pred.id_map.size();
    auto overlap = [&](uint32_t gid, uint32_t pid) {
        int n = 0;
        for (size_t p = 0; p < npx; ++p) {
            if (gt.id_map[p] == gid && pred.id_map[p] == pid) ++n;
        }
        return n;
    };

    std::map<uint32_t, uint32_t> gt_matched, pred_matched;
    for (const auto& [gid, gseg] : gt.segments) {
        if (gseg.crowd) continue;
        for (const auto& [pid, pseg] : pred.segments) {
            if (pseg.category != gseg.category) continue;
            const int inter = overlap(gid, pid);
            if (inter == 0) continue;
            const int void_overlap = overlap(0, pid);
            const double iou =
                static_cast<double>(inter) / (gseg.area + pseg.area - inter - void_overlap);
            if (iou > 0.5) {
                auto& cat = stats.per_category[gseg.category];
                cat.iou_sum += iou;
                ++cat.tp;
                gt_matched[gid] = pid;
                pred_matched[pid] = gid;
            }
        }
    }
    for (const auto& [gid, gseg] : gt.segments) {
        if (gseg.crowd || gt_matched.count(gid)) continue;
        ++stats.per_category[gseg.category].fn;
    }
    for (const auto& [pid, pseg] : pred.segments) {
        if (pred_matched.count(pid)) continue;
        int excused = overlap(0, pid);
        for (const auto& [gid, gseg] : gt.segments) {
            if (gseg.crowd && gseg.category == pseg.category) excused += overlap(gid, pid);
        }
        if (static_cast<double>(excused) / pseg.area > 0.5) continue;
        ++stats.per_category[pseg.category].fp;
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Selfcheck suites
// ---------------------------------------------------------------------------

struct SuiteResult {
    std::string name;
    int cases = 0;
    int failures = 0;
    std::string detail;
    bool passed() const { return failures == 0; }
};

inline Tensor random_tensor(Rng& rng, int n, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
    Tensor t(n, c, h, w);
    for (size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    }
    return m;
}

inline SuiteResult check_conv(int cases = 100, double tol = 1e-5, uint64_t seed = 11) {
    Rng rng(seed);
    SuiteResult res{"conv2d vs naive loop reference"};
    for (int i = 0; i < cases; ++i) {
        const int n = 1 + static_cast<int>(rng.next_below(2));
        const int ci = 1 + static_cast<int>(rng.next_below(4));
        const int co = 1 + static_cast<int>(rng.next_below(4));
        const int hw = 4 + static_cast<int>(rng.next_below(8));
        const int k = rng.next_below(2) ? 3 : 1;
        ConvParams p(co, ci, k, 1 + static_cast<int>(rng.next_below(2)),
                     static_cast<int>(rng.next_below(2)), 1 + static_cast<int>(rng.next_below(2)));
        init_conv(p, rng);
        for (int b = 0; b < co; ++b) p.bias[b] = static_cast<float>(rng.uniform(-1, 1));
        Tensor x = random_tensor(rng, n, ci, hw, hw);
        ++res.cases;
        try {
            const double d = max_abs_diff(panfpn::conv2d(x, p), reference::conv2d(x, p));
            if (d > tol) {
                ++res.failures;
                res.detail = "max |diff| " + std::to_string(d);
            }
        } catch (const ShapeError&) {
            --res.cases;  // receptive span larger than input; regenerate implicitly
        }
    }
    return res;
}

inline SuiteResult check_group_norm(int cases = 100, double tol = 1e-5, uint64_t seed = 12) {
    Rng rng(seed);
    SuiteResult res{"group_norm vs scalar loop reference"};
    for (int i = 0; i < cases; ++i) {
        const int groups = 1 + static_cast<int>(rng.next_below(4));
        const int c = groups * (1 + static_cast<int>(rng.next_below(4)));
        GroupNormParams p(c, groups);
        for (int j = 0; j < c; ++j) {
            p.gamma[j] = static_cast<float>(rng.uniform(0.5, 1.5));
            p.beta[j] = static_cast<float>(rng.uniform(-0.5, 0.5));
        }
        Tensor x = random_tensor(rng, 1 + static_cast<int>(rng.next_below(2)), c,
                                 2 + static_cast<int>(rng.next_below(6)),
                                 2 + static_cast<int>(rng.next_below(6)));
        ++res.cases;
        const double d = max_abs_diff(panfpn::group_norm(x, p), reference::group_norm(x, p));
        if (d > tol) {
            ++res.failures;
            res.detail = "max |diff| " + std::to_string(d);
        }
    }
    return res;
}

inline SuiteResult check_bilinear(int cases = 100, double tol = 1e-5, uint64_t seed = 13) {
    Rng rng(seed);
    SuiteResult res{"bilinear_upsample vs loop reference"};
    for (int i = 0; i < cases; ++i) {
        const int factor = rng.next_below(2) ? 2 : 4;
        Tensor x = random_tensor(rng, 1, 1 + static_cast<int>(rng.next_below(3)),
                                 1 + static_cast<int>(rng.next_below(12)),
                                 1 + static_cast<int>(rng.next_below(12)));
        ++res.cases;
        const double d = max_abs_diff(panfpn::bilinear_upsample(x, factor), reference::bilinear_upsample(x, factor));
        if (d > tol) {
            ++res.failures;
            res.detail = "max |diff| " + std::to_string(d);
        }
    }
    return res;
}

inline std::vector<InstancePrediction> random_instances(Rng& rng, int h, int w, int max_count) {
    std::vector<InstancePrediction> out;
    const int count = static_cast<int>(rng.next_below(max_count + 1));
    for (int i = 0; i < count; ++i) {
        InstancePrediction inst;
        inst.category = 100 + static_cast<int>(rng.next_below(3));
        inst.score = rng.next_double();
        inst.mask.assign(static_cast<size_t>(h) * w, 0);
        const int y0 = static_cast<int>(rng.next_below(h));
        const int x0 = static_cast<int>(rng.next_below(w));
        const int y1 = y0 + static_cast<int>(rng.next_below(h - y0)) + 1;
        const int x1 = x0 + static_cast<int>(rng.next_below(w - x0)) + 1;
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) inst.mask[static_cast<size_t>(y) * w + x] = 1;
        out.push_back(std::move(inst));
    }
    return out;
}

inline SuiteResult check_fusion(int cases = 1000, uint64_t seed = 14) {
    SuiteResult res{"panoptic fusion vs pixel-wise brute force"};
    CategoryTable cats;
    for (int c = 0; c < 4; ++c) cats[c] = false;   // stuff
    for (int c = 100; c < 103; ++c) cats[c] = true;  // things
    for (int i = 0; i < cases; ++i) {
        Rng rng(seed + i);
        const int h = 4 + static_cast<int>(rng.next_below(13));
        const int w = 4 + static_cast<int>(rng.next_below(13));
        FusionConfig config;
        config.stuff_area_min = static_cast<int>(rng.next_below(8));
        config.other_class_id = 3;
        auto instances = random_instances(rng, h, w, 4);
        std::vector<int32_t> labels(static_cast<size_t>(h) * w);
        for (auto& l : labels) l = static_cast<int32_t>(rng.next_below(4));
        ++res.cases;
        const auto surviving = resolve_instances(instances, config, h, w);
        const PanopticMap got = merge_semantic(surviving, labels, config, cats, h, w);
        const PanopticMap want = fuse(instances, labels, config, cats, h, w);
        if (got.id_map != want.id_map || got.segments.size() != want.segments.size()) {
            ++res.failures;
            if (res.detail.empty()) res.detail = "first mismatch at case seed " + std::to_string(seed + i);
        }
    }
    return res;
}

inline PanopticMap random_panoptic_map(Rng& rng, int h, int w, int num_categories,
                                       bool allow_crowd = true) {
    PanopticMap map(h, w);
    const int n_segs = 1 + static_cast<int>(rng.next_below(6));
    // random rectangles stamped in order; later ones overwrite
    for (int s = 0; s < n_segs; ++s) {
        const uint32_t id = static_cast<uint32_t>(s + 1);
        const int y0 = static_cast<int>(rng.next_below(h));
        const int x0 = static_cast<int>(rng.next_below(w));
        const int y1 = y0 + static_cast<int>(rng.next_below(h - y0)) + 1;
        const int x1 = x0 + static_cast<int>(rng.next_below(w - x0)) + 1;
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) map.at(y, x) = id;
    }
    std::map<uint32_t, int> areas;
    for (uint32_t id : map.id_map) {
        if (id) ++areas[id];
    }
    for (const auto& [id, area] : areas) {
        const int cat = static_cast<int>(rng.next_below(num_categories));
        map.segments[id] = {cat, cat >= num_categories / 2,
                            area, allow_crowd && rng.next_below(8) == 0};
    }
    // leave some void: clear one random rectangle
    if (rng.next_below(2) == 0) {
        const int y0 = static_cast<int>(rng.next_below(h));
        const int x0 = static_cast<int>(rng.next_below(w));
        const int y1 = y0 + static_cast<int>(rng.next_below(h - y0)) + 1;
        const int x1 = x0 + static_cast<int>(rng.next_below(w - x0)) + 1;
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) map.at(y, x) = 0;
        // rebuild table after the hole
        std::map<uint32_t, int> areas2;
        for (uint32_t id : map.id_map) {
            if (id) ++areas2[id];
        }
        std::map<uint32_t, SegmentInfo> segs;
        for (const auto& [id, area] : areas2) {
            SegmentInfo info = map.segments.at(id);
            info.area = area;
            segs[id] = info;
        }
        map.segments = std::move(segs);
    }
    return map;
}

inline bool stats_equal(const PqStats& a, const PqStats& b, double tol = 1e-9) {
    if (a.per_category.size() != b.per_category.size()) return false;
    for (const auto& [cat, s] : a.per_category) {
        auto it = b.per_category.find(cat);
        if (it == b.per_category.end()) return false;
        if (s.tp != it->second.tp || s.fp != it->second.fp || s.fn != it->second.fn) return false;
        if (std::abs(s.iou_sum - it->second.iou_sum) > tol) return false;
    }
    return true;
}

inline SuiteResult check_pq(int cases = 1000, uint64_t seed = 15) {
    SuiteResult res{"pq_match vs exhaustive pair matcher"};
    for (int i = 0; i < cases; ++i) {
        Rng rng(seed + i);
        const int h = 4 + static_cast<int>(rng.next_below(13));
        const int w = 4 + static_cast<int>(rng.next_below(13));
        PanopticMap gt = random_panoptic_map(rng, h, w, 6, true);
        PanopticMap pred = random_panoptic_map(rng, h, w, 6, false);
        for (auto& [id, seg] : pred.segments) seg.crowd = false;
        ++res.cases;
        if (!stats_equal(panfpn::pq_match(pred, gt), reference::pq_match(pred, gt))) {
            ++res.failures;
            if (res.detail.empty()) res.detail = "first mismatch at case seed " + std::to_string(seed + i);
        }
    }
    return res;
}

inline std::vector<SuiteResult> run_all_suites() {
    return {check_conv(), check_group_norm(), check_bilinear(), check_fusion(), check_pq()};
}

}  // namespace panfpn::reference
