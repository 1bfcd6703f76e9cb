#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "panfpn/tensor.hpp"

namespace panfpn {

constexpr int kIgnoreLabel = 255;

struct DegenerateInputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Per-pixel integer label map, (n, H, W); kIgnoreLabel pixels contribute nothing.
struct SemanticTarget {
    int n, h, w;
    std::vector<int32_t> labels;

    SemanticTarget(int n_, int h_, int w_)
        : n(n_), h(h_), w(w_), labels(static_cast<size_t>(n_) * h_ * w_, 0) {}

    int32_t& at(int b, int y, int x) { return labels[(static_cast<size_t>(b) * h + y) * w + x]; }
    int32_t at(int b, int y, int x) const { return labels[(static_cast<size_t>(b) * h + y) * w + x]; }
};

/// Cross entropy from logits via fused log-softmax, normalized by the number of labeled
/// pixels. When `grad` is non-null it receives d(loss)/d(logits) (same shape, accumulated).
inline double semantic_loss(const Tensor& logits, const SemanticTarget& target,
                            Tensor* grad = nullptr) {
    if (logits.n() != target.n || logits.h() != target.h || logits.w() != target.w) {
        throw ShapeError("semantic_loss shape mismatch: logits (" + logits.shape() + ") vs target (" +
                         Tensor::shape_str(target.n, 1, target.h, target.w) + ")");
    }
    const int K = logits.c();
    const size_t plane = static_cast<size_t>(logits.h()) * logits.w();
    size_t labeled = 0;
    for (int32_t l : target.labels) {
        if (l == kIgnoreLabel) continue;
        if (l < 0 || l >= K) {
            throw ShapeError("semantic target label " + std::to_string(l) + " out of range [0," +
                             std::to_string(K) + ")");
        }
        ++labeled;
    }
    if (labeled == 0) throw DegenerateInputError("semantic_loss: every pixel is ignored");

    double loss = 0.0;
    for (int b = 0; b < logits.n(); ++b) {
        for (int y = 0; y < logits.h(); ++y) {
            for (int x = 0; x < logits.w(); ++x) {
                const int32_t t = target.at(b, y, x);
                if (t == kIgnoreLabel) continue;
                const size_t base = logits.index(b, 0, y, x);
                float mx = logits.data()[base];
                for (int c = 1; c < K; ++c) mx = std::max(mx, logits.data()[base + c * plane]);
                double denom = 0.0;
                for (int c = 0; c < K; ++c) {
                    denom += std::exp(static_cast<double>(logits.data()[base + c * plane]) - mx);
                }
                const double log_denom = std::log(denom) + mx;
                loss += log_denom - logits.data()[base + t * plane];
                if (grad) {
                    float* gp = grad->grad();
                    for (int c = 0; c < K; ++c) {
                        const double p =
                            std::exp(static_cast<double>(logits.data()[base + c * plane]) - log_denom);
                        gp[base + c * plane] += static_cast<float>(
                            (p - (c == t ? 1.0 : 0.0)) / static_cast<double>(labeled));
                    }
                }
            }
        }
    }
    return loss / static_cast<double>(labeled);
}

/// Inputs to the three instance-branch losses; masks are M x M per foreground RoI.
struct InstanceLossInputs {
    int num_sampled_rois = 0;     // R
    int num_foreground_rois = 0;  // R_fg
    int num_classes = 0;          // K + 1 including background column 0
    int mask_extent = 0;          // M

    std::vector<float> class_logits;    // (R, K+1)
    std::vector<int32_t> class_targets; // (R)
    std::vector<float> box_pred;        // (R_fg, 4)
    std::vector<float> box_target;      // (R_fg, 4)
    std::vector<float> mask_logits;     // (R_fg, M, M)
    std::vector<float> mask_targets;    // (R_fg, M, M), entries in {0, 1}

    void validate() const {
        if (num_foreground_rois > num_sampled_rois) {
            throw ShapeError("R_fg > R in instance loss inputs");
        }
        if (class_logits.size() != static_cast<size_t>(num_sampled_rois) * num_classes ||
            class_targets.size() != static_cast<size_t>(num_sampled_rois) ||
            box_pred.size() != static_cast<size_t>(num_foreground_rois) * 4 ||
            box_target.size() != box_pred.size() ||
            mask_logits.size() != static_cast<size_t>(num_foreground_rois) * mask_extent * mask_extent ||
            mask_targets.size() != mask_logits.size()) {
            throw ShapeError("instance loss input sizes inconsistent with R/R_fg/K/M");
        }
        for (int32_t t : class_targets) {
            if (t < 0 || t >= num_classes) throw ShapeError("class target out of range");
        }
        for (float m : mask_targets) {
            if (m != 0.0f && m != 1.0f) throw ShapeError("mask targets must be binary");
        }
    }
};

struct InstanceLosses {
    double l_class = 0.0;
    double l_box = 0.0;
    double l_mask = 0.0;
    double sum() const { return l_class + l_box + l_mask; }
};

/// Optional gradients w.r.t. the prediction arrays (same layouts as the inputs).
struct InstanceLossGrads {
    std::vector<float> class_logits;
    std::vector<float> box_pred;
    std::vector<float> mask_logits;
};

inline double smooth_l1(double d) {
    const double a = std::abs(d);
    return a < 1.0 ? 0.5 * d * d : a - 0.5;
}
inline double smooth_l1_grad(double d) { return std::abs(d) < 1.0 ? d : (d > 0 ? 1.0 : -1.0); }

/// L_c and L_b are normalized by R (sampled RoIs); L_m by R_fg (foreground RoIs).
/// An empty foreground set gives zero box/mask loss; R == 0 is a degenerate input.
inline InstanceLosses instance_losses(const InstanceLossInputs& in,
                                      InstanceLossGrads* grads = nullptr) {
    if (in.num_sampled_rois == 0) throw DegenerateInputError("instance_losses: no sampled RoIs");
    in.validate();
    InstanceLosses out;
    if (grads) {
        grads->class_logits.assign(in.class_logits.size(), 0.0f);
        grads->box_pred.assign(in.box_pred.size(), 0.0f);
        grads->mask_logits.assign(in.mask_logits.size(), 0.0f);
    }

    const int K1 = in.num_classes;
    const double inv_r = 1.0 / in.num_sampled_rois;
    for (int r = 0; r < in.num_sampled_rois; ++r) {
        const float* row = in.class_logits.data() + static_cast<size_t>(r) * K1;
        float mx = row[0];
        for (int c = 1; c < K1; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < K1; ++c) denom += std::exp(static_cast<double>(row[c]) - mx);
        const double log_denom = std::log(denom) + mx;
        out.l_class += (log_denom - row[in.class_targets[r]]) * inv_r;
        if (grads) {
            float* g = grads->class_logits.data() + static_cast<size_t>(r) * K1;
            for (int c = 0; c < K1; ++c) {
                const double p = std::exp(static_cast<double>(row[c]) - log_denom);
                g[c] += static_cast<float>((p - (c == in.class_targets[r] ? 1.0 : 0.0)) * inv_r);
            }
        }
    }

    // smooth-L1 (transition 1.0), summed over foreground box coordinates, divided by R
    for (size_t i = 0; i < in.box_pred.size(); ++i) {
        const double d = static_cast<double>(in.box_pred[i]) - in.box_target[i];
        out.l_box += smooth_l1(d) * inv_r;
        if (grads) grads->box_pred[i] += static_cast<float>(smooth_l1_grad(d) * inv_r);
    }

    // per-pixel binary cross entropy, averaged per RoI, then divided by R_fg
    if (in.num_foreground_rois > 0) {
        const size_t msz = static_cast<size_t>(in.mask_extent) * in.mask_extent;
        const double inv_fg = 1.0 / in.num_foreground_rois;
        for (int r = 0; r < in.num_foreground_rois; ++r) {
            double acc = 0.0;
            for (size_t i = 0; i < msz; ++i) {
                const size_t idx = r * msz + i;
                const double x = in.mask_logits[idx];
                const double t = in.mask_targets[idx];
                acc += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
                if (grads) {
                    const double sig = 1.0 / (1.0 + std::exp(-x));
                    grads->mask_logits[idx] +=
                        static_cast<float>((sig - t) / static_cast<double>(msz) * inv_fg);
                }
            }
            out.l_mask += acc / static_cast<double>(msz) * inv_fg;
        }
    }
    return out;
}

struct LossWeights {
    double lambda_i = 1.0;
    double lambda_s = 1.0;
};

/// L = lambda_i * (L_c + L_b + L_m) + lambda_s * L_s
inline double joint_loss(const InstanceLosses& inst, double semantic, const LossWeights& w) {
    if (!std::isfinite(inst.sum()) || !std::isfinite(semantic)) {
        throw DegenerateInputError("joint_loss: non-finite term");
    }
    return w.lambda_i * inst.sum() + w.lambda_s * semantic;
}

struct SweepRow {
    double lambda_i, lambda_s;
    double l_class, l_box, l_mask, l_semantic, total;
    std::vector<double> metrics;
    std::string error;  // non-empty when the runner failed for this grid point
};

struct SweepResult {
    std::vector<std::string> metric_names;
    std::vector<SweepRow> rows;
};

/// Runs `runner` for each (lambda_i, lambda_s) grid point. Runner failures are captured
/// per-row without aborting the sweep.
inline SweepResult lambda_sweep(
    const std::function<SweepRow(const LossWeights&)>& runner,
    const std::vector<LossWeights>& grid, std::vector<std::string> metric_names = {}) {
    if (grid.empty()) throw DegenerateInputError("lambda_sweep: empty grid");
    SweepResult result;
    result.metric_names = std::move(metric_names);
    for (const LossWeights& w : grid) {
        SweepRow row;
        try {
            row = runner(w);
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        row.lambda_i = w.lambda_i;
        row.lambda_s = w.lambda_s;
        result.rows.push_back(std::move(row));
    }
    return result;
}

inline void write_sweep_csv(std::ostream& os, const SweepResult& r) {
    os << "lambda_i,lambda_s,L_c,L_b,L_m,L_s,L";
    for (const auto& name : r.metric_names) os << "," << name;
    os << "\n";
    for (const SweepRow& row : r.rows) {
        os << row.lambda_i << "," << row.lambda_s << ",";
        if (!row.error.empty()) {
            os << "error,error,error,error,error";
            for (size_t i = 0; i < r.metric_names.size(); ++i) os << ",error";
        } else {
            os << row.l_class << "," << row.l_box << "," << row.l_mask << "," << row.l_semantic
               << "," << row.total;
            for (double m : row.metrics) os << "," << m;
        }
        os << "\n";
    }
}

}  // namespace panfpn
