#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "panfpn/graph.hpp"

namespace panfpn {

/// Pyramid scales as denominators: level 4 means 1/4 resolution.
constexpr std::array<int, 4> kPyramidScales = {4, 8, 16, 32};

struct BranchConfig {
    int branch_width = 128;
    enum class Aggregation { Sum, Concat } aggregation = Aggregation::Sum;
    int num_classes = 53;
    bool include_other_class = true;
    int channel_dim = 256;  // FPN pyramid channel dimension
    uint64_t seed = 0;

    int output_channels() const { return num_classes + (include_other_class ? 1 : 0); }
};

/// Largest group count <= 32 that divides the channel width while keeping at least two
/// channels per group; single-channel groups collapse to instance norm, which normalizes a
/// lone value to exactly zero on 1x1 feature maps and silences the level behind the relu.
inline int norm_groups(int channels) {
    int g = std::gcd(channels, 32);
    while (g > 1 && channels / g < 2) g /= 2;
    return g < 1 ? 1 : g;
}

/// Lateral 1x1 convs plus the top-down pathway: start at 1/32, repeatedly 2x upsample and
/// sum with the next lateral; every merged map then passes a 3x3 conv at channel_dim.
struct FpnParams {
    std::map<int, std::shared_ptr<ConvParams>> laterals;  // scale -> 1x1 conv
    std::map<int, std::shared_ptr<ConvParams>> outputs;   // scale -> 3x3 conv
    int channel_dim;

    FpnParams(const std::map<int, int>& bottom_up_channels, int channel_dim_, Rng& rng)
        : channel_dim(channel_dim_) {
        for (int scale : kPyramidScales) {
            auto it = bottom_up_channels.find(scale);
            if (it == bottom_up_channels.end()) {
                throw ShapeError("fpn_topdown: missing bottom-up scale 1/" + std::to_string(scale));
            }
            auto lat = std::make_shared<ConvParams>(channel_dim_, it->second, 1);
            init_conv(*lat, rng);
            laterals[scale] = std::move(lat);
        }
        for (int scale : kPyramidScales) {
            auto out = std::make_shared<ConvParams>(channel_dim_, channel_dim_, 3, 1, 1);
            init_conv(*out, rng);
            outputs[scale] = std::move(out);
        }
    }

    void zero_grad() {
        for (auto& [s, p] : laterals) p->zero_grad();
        for (auto& [s, p] : outputs) p->zero_grad();
    }
};

/// Runs the top-down pathway on a recorded graph. `bottom_up` maps scale denominator to the
/// node holding that level. Returns scale -> pyramid node at channel_dim channels.
inline std::map<int, NodeId> fpn_topdown(Graph& g, const std::map<int, NodeId>& bottom_up,
                                         const FpnParams& params) {
    std::map<int, NodeId> laterals;
    int prev_h = -1, prev_w = -1;
    for (auto it = kPyramidScales.rbegin(); it != kPyramidScales.rend(); ++it) {
        const int scale = *it;
        auto found = bottom_up.find(scale);
        if (found == bottom_up.end()) {
            throw ShapeError("fpn_topdown: missing bottom-up scale 1/" + std::to_string(scale));
        }
        const Tensor& v = g.value(found->second);
        if (prev_h >= 0 && (v.h() != prev_h * 2 || v.w() != prev_w * 2)) {
            throw ShapeError("fpn_topdown: extents must double between adjacent scales, got (" +
                             v.shape() + ") after " + std::to_string(prev_h) + "x" +
                             std::to_string(prev_w));
        }
        prev_h = v.h();
        prev_w = v.w();
        laterals[scale] = g.conv2d_node(found->second, params.laterals.at(scale));
    }
    std::map<int, NodeId> pyramid;
    NodeId merged = laterals.at(32);
    pyramid[32] = g.conv2d_node(merged, params.outputs.at(32));
    for (int scale : {16, 8, 4}) {
        merged = g.sum_node({g.bilinear_node(merged, 2), laterals.at(scale)});
        pyramid[scale] = g.conv2d_node(merged, params.outputs.at(scale));
    }
    return pyramid;
}

/// The dense-prediction head: per pyramid level, conv/norm/relu stages with 2x upsampling
/// until 1/4 scale, aggregation, a 1x1 classifier, 4x upsampling, and channel softmax.
class SemanticBranch {
public:
    struct Stage {
        std::shared_ptr<ConvParams> conv;
        std::shared_ptr<GroupNormParams> norm;
        bool upsample;
    };

    SemanticBranch(const BranchConfig& config, Rng& rng) : config_(config) {
        const int w = config.branch_width;
        for (size_t k = 0; k < kPyramidScales.size(); ++k) {
            std::vector<Stage> stages;
            // 1/4 level keeps one non-upsampling conv block
            const int n_stages = static_cast<int>(std::max<size_t>(k, 1));
            for (int s = 0; s < n_stages; ++s) {
                const int c_in = (s == 0) ? config.channel_dim : w;
                auto conv = std::make_shared<ConvParams>(w, c_in, 3, 1, 1);
                init_conv(*conv, rng);
                stages.push_back(
                    {std::move(conv), std::make_shared<GroupNormParams>(w, norm_groups(w)), k > 0});
            }
            levels_.push_back(std::move(stages));
        }
        if (config.aggregation == BranchConfig::Aggregation::Concat) {
            // width-adapting 1x1 conv keeps the classifier aggregation-independent
            concat_adapter_ = std::make_shared<ConvParams>(w, w * static_cast<int>(kPyramidScales.size()), 1);
            init_conv(*concat_adapter_, rng);
        }
        classifier_ = std::make_shared<ConvParams>(config.output_channels(), w, 1);
        init_conv(*classifier_, rng);
    }

    struct ForwardResult {
        NodeId logits;  // (n, C_out, H, W) pre-softmax
        NodeId probs;   // softmax over channels
        NodeId aggregated;  // (n, width, H/4, W/4) merged feature map
    };

    /// Records the branch onto `g`. `pyramid` maps scale denominator to node.
    ForwardResult forward(Graph& g, const std::map<int, NodeId>& pyramid) const {
        std::vector<NodeId> merged;
        for (size_t k = 0; k < kPyramidScales.size(); ++k) {
            auto it = pyramid.find(kPyramidScales[k]);
            if (it == pyramid.end()) {
                throw ShapeError("semantic branch: missing pyramid scale 1/" +
                                 std::to_string(kPyramidScales[k]));
            }
            NodeId x = it->second;
            for (const Stage& st : levels_[k]) {
                x = g.relu_node(g.group_norm_node(g.conv2d_node(x, st.conv), st.norm));
                if (st.upsample) x = g.bilinear_node(x, 2);
            }
            merged.push_back(x);
        }
        NodeId agg;
        if (config_.aggregation == BranchConfig::Aggregation::Sum) {
            agg = g.sum_node(merged);
        } else {
            agg = g.conv2d_node(g.concat_node(merged), concat_adapter_);
        }
        NodeId logits = g.bilinear_node(g.conv2d_node(agg, classifier_), 4);
        return {logits, g.softmax_node(logits), agg};
    }

    /// Upsampling stage count for pyramid level index k (scale 1/2^(k+2)).
    int upsample_stages(size_t k) const {
        int n = 0;
        for (const Stage& st : levels_[k]) n += st.upsample ? 1 : 0;
        return n;
    }

    size_t param_count() const {
        size_t n = 0;
        for (const auto& stages : levels_) {
            for (const Stage& st : stages) n += st.conv->param_count() + st.norm->param_count();
        }
        if (concat_adapter_) n += concat_adapter_->param_count();
        n += classifier_->param_count();
        return n;
    }

    const BranchConfig& config() const { return config_; }
    const std::vector<std::vector<Stage>>& levels() const { return levels_; }
    const std::shared_ptr<ConvParams>& classifier() const { return classifier_; }
    const std::shared_ptr<ConvParams>& concat_adapter() const { return concat_adapter_; }

    void zero_grad() {
        for (auto& stages : levels_) {
            for (auto& st : stages) {
                st.conv->zero_grad();
                st.norm->zero_grad();
            }
        }
        if (concat_adapter_) concat_adapter_->zero_grad();
        classifier_->zero_grad();
    }

private:
    BranchConfig config_;
    std::vector<std::vector<Stage>> levels_;  // index k = pyramid level, coarse stages last
    std::shared_ptr<ConvParams> concat_adapter_;
    std::shared_ptr<ConvParams> classifier_;
};

// --- config file (key = value) ---

inline void save_branch_config(const std::string& path, const BranchConfig& c) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << "width = " << c.branch_width << "\n"
      << "aggregation = " << (c.aggregation == BranchConfig::Aggregation::Sum ? "sum" : "concat") << "\n"
      << "classes = " << c.num_classes << "\n"
      << "other_class = " << (c.include_other_class ? "true" : "false") << "\n"
      << "channel_dim = " << c.channel_dim << "\n"
      << "seed = " << c.seed << "\n";
}

inline BranchConfig load_branch_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    BranchConfig c;
    std::string line;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos || line.empty() || line[0] == '#') continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "width") c.branch_width = std::stoi(val);
        else if (key == "aggregation") {
            if (val == "sum") c.aggregation = BranchConfig::Aggregation::Sum;
            else if (val == "concat") c.aggregation = BranchConfig::Aggregation::Concat;
            else throw std::runtime_error("unknown aggregation '" + val + "' in " + path);
        } else if (key == "classes") c.num_classes = std::stoi(val);
        else if (key == "other_class") c.include_other_class = (val == "true" || val == "1");
        else if (key == "channel_dim") c.channel_dim = std::stoi(val);
        else if (key == "seed") c.seed = std::stoull(val);
        else throw std::runtime_error("unknown key '" + key + "' in " + path);
    }
    return c;
}

// --- parameter checkpoint: one tensor file per layer plus a manifest listing order ---

namespace detail {
inline Tensor vector_as_tensor(const std::vector<float>& v) {
    Tensor t(1, 1, 1, static_cast<int>(v.size()));
    std::memcpy(t.data(), v.data(), v.size() * sizeof(float));
    return t;
}
inline void tensor_into_vector(const Tensor& t, std::vector<float>& v) {
    if (t.size() != v.size()) throw ShapeError("checkpoint vector size mismatch");
    std::memcpy(v.data(), t.data(), v.size() * sizeof(float));
}
}  // namespace detail

/// Named parameter tensors in a fixed traversal order.
class ParamVisitor {
public:
    using Fn = std::function<void(const std::string&, Tensor&, std::vector<float>*)>;

    static void visit(SemanticBranch& b, FpnParams* fpn, const Fn& fn) {
        if (fpn) {
            for (int scale : kPyramidScales) {
                fn("fpn.lateral" + std::to_string(scale) + ".weight",
                   fpn->laterals.at(scale)->weight, &fpn->laterals.at(scale)->bias);
                fn("fpn.output" + std::to_string(scale) + ".weight",
                   fpn->outputs.at(scale)->weight, &fpn->outputs.at(scale)->bias);
            }
        }
        auto& levels = const_cast<std::vector<std::vector<SemanticBranch::Stage>>&>(b.levels());
        for (size_t k = 0; k < levels.size(); ++k) {
            for (size_t s = 0; s < levels[k].size(); ++s) {
                const std::string base =
                    "branch.level" + std::to_string(kPyramidScales[k]) + ".stage" + std::to_string(s);
                fn(base + ".conv.weight", levels[k][s].conv->weight, &levels[k][s].conv->bias);
                Tensor gamma = detail::vector_as_tensor(levels[k][s].norm->gamma);
                fn(base + ".norm.gamma", gamma, nullptr);
                detail::tensor_into_vector(gamma, levels[k][s].norm->gamma);
                Tensor beta = detail::vector_as_tensor(levels[k][s].norm->beta);
                fn(base + ".norm.beta", beta, nullptr);
                detail::tensor_into_vector(beta, levels[k][s].norm->beta);
            }
        }
        if (b.concat_adapter()) {
            fn("branch.concat_adapter.weight", b.concat_adapter()->weight, &b.concat_adapter()->bias);
        }
        fn("branch.classifier.weight", b.classifier()->weight, &b.classifier()->bias);
    }
};

inline void save_checkpoint(const std::string& dir, SemanticBranch& b, FpnParams* fpn) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw std::runtime_error("cannot open manifest for writing in " + dir);
    ParamVisitor::visit(b, fpn, [&](const std::string& name, Tensor& t, std::vector<float>* bias) {
        save_tensor(dir + "/" + name + ".ptsr", t);
        manifest << name << ".ptsr\n";
        if (bias) {
            Tensor bt = detail::vector_as_tensor(*bias);
            const std::string bname = name.substr(0, name.rfind(".weight")) + ".bias";
            save_tensor(dir + "/" + bname + ".ptsr", bt);
            manifest << bname << ".ptsr\n";
        }
    });
}

inline void load_checkpoint(const std::string& dir, SemanticBranch& b, FpnParams* fpn) {
    ParamVisitor::visit(b, fpn, [&](const std::string& name, Tensor& t, std::vector<float>* bias) {
        Tensor loaded = load_tensor(dir + "/" + name + ".ptsr");
        if (!loaded.same_shape(t)) {
            throw ShapeError("checkpoint shape mismatch for " + name + ": file (" + loaded.shape() +
                             ") vs model (" + t.shape() + ")");
        }
        std::memcpy(t.data(), loaded.data(), t.size() * sizeof(float));
        if (bias) {
            const std::string bname = name.substr(0, name.rfind(".weight")) + ".bias";
            Tensor bt = load_tensor(dir + "/" + bname + ".ptsr");
            detail::tensor_into_vector(bt, *bias);
        }
    });
}

}  // namespace panfpn
