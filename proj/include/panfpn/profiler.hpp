#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "panfpn/tensor.hpp"

namespace panfpn {

/// One backbone layer. `scale` is the output scale denominator (4 means 1/4 resolution).
/// Pool layers contribute stride but no multiply-adds or activations.
struct LayerSpec {
    std::string name;
    int kernel = 3;
    int c_in = 0, c_out = 0;
    int stride = 1;
    int dilation = 1;
    int scale = 1;
    bool pool = false;
};

/// Residual stage summary used to derive decoder mirrors and FPN lateral taps.
struct StageInfo {
    int scale = 4;   // output scale denominator
    int c_out = 0;   // stage output channels
    int blocks = 0;  // residual blocks in the stage
};

struct SemanticHeadSpec {
    int width = 128;
    int classes = 54;
};

struct ArchSpec {
    enum class Decoder { None, Dilated, SymmetricDecoder, Fpn };

    std::string name;
    std::vector<LayerSpec> backbone;
    std::vector<StageInfo> stages;
    Decoder decoder = Decoder::None;
    int dilated_scale = 16;      // output scale of the dilated variant (8 or 16)
    int fpn_channels = 256;
    bool with_semantic_head = false;
    SemanticHeadSpec head;

    void validate() const {
        for (const LayerSpec& l : backbone) {
            if (l.c_in < 1 || l.c_out < 1 || l.kernel < 1 || l.stride < 1 || l.dilation < 1 ||
                l.scale < 1) {
                throw ShapeError("inconsistent layer chain at '" + l.name + "'");
            }
        }
    }
};

struct CostReport {
    struct Layer {
        std::string name;
        int64_t multiply_adds = 0;
        int64_t activations = 0;
    };
    std::vector<Layer> layers;
    int64_t total_multiply_adds = 0;
    int64_t total_activations = 0;
    int image_h = 0, image_w = 0;

    void add(const std::string& name, int64_t madds, int64_t act) {
        layers.push_back({name, madds, act});
        total_multiply_adds += madds;
        total_activations += act;
    }
};

/// ResNet-101: 7x7/2 stem, /2 max pool, bottleneck stages of 3/4/23/3 blocks with output
/// channels 256/512/1024/2048, strides 1/2/2/2. Projection shortcut on each stage's first
/// block.
inline ArchSpec resnet101() {
    ArchSpec spec;
    spec.name = "resnet101";
    auto conv = [&](const std::string& name, int k, int ci, int co, int stride, int scale) {
        spec.backbone.push_back({name, k, ci, co, stride, 1, scale, false});
    };
    conv("stem.conv7x7", 7, 3, 64, 2, 2);
    spec.backbone.push_back({"stem.maxpool", 3, 64, 64, 2, 1, 4, true});
    const int stage_blocks[4] = {3, 4, 23, 3};
    const int stage_channels[4] = {256, 512, 1024, 2048};
    int c_in = 64, in_scale = 4;
    for (int s = 0; s < 4; ++s) {
        const int c_out = stage_channels[s];
        const int mid = c_out / 4;
        const int stride = s == 0 ? 1 : 2;
        const int out_scale = in_scale * stride;
        const std::string stage = "stage" + std::to_string(s + 2);
        for (int b = 0; b < stage_blocks[s]; ++b) {
            const std::string base = stage + ".block" + std::to_string(b);
            conv(base + ".conv1", 1, b == 0 ? c_in : c_out, mid, 1, b == 0 ? in_scale : out_scale);
            conv(base + ".conv2", 3, mid, mid, b == 0 ? stride : 1, out_scale);
            conv(base + ".conv3", 1, mid, c_out, 1, out_scale);
            if (b == 0) conv(base + ".proj", 1, c_in, c_out, stride, out_scale);
        }
        spec.stages.push_back({out_scale, c_out, stage_blocks[s]});
        c_in = c_out;
        in_scale = out_scale;
    }
    return spec;
}

/// Caps every layer's output scale at `output_scale`, removing the strides beyond it and
/// doubling dilation once per removed stride. Layer count and parameter count are
/// unchanged; only spatial extents move.
inline ArchSpec dilate_backbone(ArchSpec spec, int output_scale) {
    spec.decoder = ArchSpec::Decoder::Dilated;
    spec.dilated_scale = output_scale;
    spec.name += "-d" + std::to_string(output_scale);
    for (LayerSpec& l : spec.backbone) {
        if (l.scale > output_scale) {
            const int factor = l.scale / output_scale;
            if (l.kernel > 1) l.dilation *= factor;
            if (l.stride > 1) l.stride = 1;
            l.scale = output_scale;
        }
    }
    for (StageInfo& st : spec.stages) st.scale = std::min(st.scale, output_scale);
    return spec;
}

inline ArchSpec with_symmetric_decoder(ArchSpec spec) {
    spec.decoder = ArchSpec::Decoder::SymmetricDecoder;
    spec.name += "-symdec";
    return spec;
}

inline ArchSpec with_fpn(ArchSpec spec, int channels = 256, bool semantic_head = true,
                         SemanticHeadSpec head = {}) {
    spec.decoder = ArchSpec::Decoder::Fpn;
    spec.fpn_channels = channels;
    spec.with_semantic_head = semantic_head;
    spec.head = head;
    spec.name += "-fpn";
    return spec;
}

namespace detail {

inline void profile_conv(CostReport& rep, const std::string& name, int k, int ci, int co,
                         int64_t oh, int64_t ow) {
    rep.add(name, oh * ow * co * ci * static_cast<int64_t>(k) * k, oh * ow * co);
}

}  // namespace detail

/// Multiply-add and activation accounting. Only convolutions contribute multiply-adds
/// (out_h * out_w * c_out * c_in * k^2) and only conv outputs contribute activations;
/// norm, activation, pool, and upsample layers count as zero.
inline CostReport profile(const ArchSpec& spec, int image_h, int image_w) {
    if (image_h % 32 != 0 || image_w % 32 != 0) {
        throw ShapeError("profile: image extent must be divisible by 32, got " +
                         std::to_string(image_h) + "x" + std::to_string(image_w));
    }
    spec.validate();
    CostReport rep;
    rep.image_h = image_h;
    rep.image_w = image_w;

    const auto extent_at = [&](int scale) {
        return std::pair<int64_t, int64_t>{image_h / scale, image_w / scale};
    };

    for (const LayerSpec& l : spec.backbone) {
        if (l.pool) continue;
        const auto [h, w] = extent_at(l.scale);
        detail::profile_conv(rep, l.name, l.kernel, l.c_in, l.c_out, h, w);
    }

    if (spec.decoder == ArchSpec::Decoder::SymmetricDecoder) {
        // mirror of the bottom-up pathway: per stage (reverse order, skipping the deepest),
        // 2x upsample + 3x3 transition from the deeper width + 1x1 lateral sum + the
        // mirrored block count at this stage's width
        int c_above = spec.stages.back().c_out;
        for (size_t i = spec.stages.size() - 1; i-- > 0;) {
            const StageInfo& st = spec.stages[i];
            const auto [sh, sw] = extent_at(st.scale);
            const std::string base = "decoder.scale" + std::to_string(st.scale);
            detail::profile_conv(rep, base + ".transition", 3, c_above, st.c_out, sh, sw);
            detail::profile_conv(rep, base + ".lateral", 1, st.c_out, st.c_out, sh, sw);
            const int mid = std::max(1, st.c_out / 4);
            for (int b = 0; b < st.blocks; ++b) {
                const std::string bb = base + ".block" + std::to_string(b);
                detail::profile_conv(rep, bb + ".conv1", 1, st.c_out, mid, sh, sw);
                detail::profile_conv(rep, bb + ".conv2", 3, mid, mid, sh, sw);
                detail::profile_conv(rep, bb + ".conv3", 1, mid, st.c_out, sh, sw);
            }
            c_above = st.c_out;
        }
    } else if (spec.decoder == ArchSpec::Decoder::Fpn) {
        for (const StageInfo& st : spec.stages) {
            const auto [sh, sw] = extent_at(st.scale);
            const std::string base = "fpn.scale" + std::to_string(st.scale);
            detail::profile_conv(rep, base + ".lateral", 1, st.c_out, spec.fpn_channels, sh, sw);
            detail::profile_conv(rep, base + ".output", 3, spec.fpn_channels, spec.fpn_channels,
                                 sh, sw);
        }
        if (spec.with_semantic_head) {
            // level at scale 1/2^(k+2) runs k upsampling stages (one conv block at 1/4);
            // each stage convs at the current scale then doubles resolution
            for (size_t k = 0; k < spec.stages.size(); ++k) {
                const int level_scale = 4 << k;
                const int n_stages = std::max<int>(static_cast<int>(k), 1);
                int scale = level_scale;
                for (int s = 0; s < n_stages; ++s) {
                    const auto [sh, sw] = extent_at(scale);
                    detail::profile_conv(
                        rep,
                        "head.level" + std::to_string(level_scale) + ".conv" + std::to_string(s), 3,
                        s == 0 ? spec.fpn_channels : spec.head.width, spec.head.width, sh, sw);
                    if (k > 0) scale /= 2;
                }
            }
            const auto [sh, sw] = extent_at(4);
            detail::profile_conv(rep, "head.classifier", 1, spec.head.width, spec.head.classes, sh,
                                 sw);
        }
    }
    return rep;
}

struct VariantComparison {
    struct Row {
        std::string name;
        int64_t multiply_adds;
        int64_t activations;
        double madds_vs_fpn;
        double activations_vs_fpn;
    };
    std::vector<Row> rows;
};

/// Profiles dilation-8, dilation-16, symmetric-decoder, and FPN variants of the given
/// backbone and reports absolute costs plus ratios to the FPN variant.
inline VariantComparison compare_variants(const ArchSpec& base, int image_h, int image_w) {
    std::vector<ArchSpec> variants = {
        dilate_backbone(base, 8),
        dilate_backbone(base, 16),
        with_symmetric_decoder(base),
        with_fpn(base, 256, true),
    };
    std::vector<CostReport> reports;
    for (const auto& v : variants) reports.push_back(profile(v, image_h, image_w));
    const CostReport& fpn = reports.back();
    VariantComparison cmp;
    for (size_t i = 0; i < variants.size(); ++i) {
        cmp.rows.push_back({variants[i].name, reports[i].total_multiply_adds,
                            reports[i].total_activations,
                            static_cast<double>(reports[i].total_multiply_adds) /
                                static_cast<double>(fpn.total_multiply_adds),
                            static_cast<double>(reports[i].total_activations) /
                                static_cast<double>(fpn.total_activations)});
    }
    return cmp;
}

// --- spec file (key = value, one conv/pool/stage per line) ---

inline ArchSpec load_arch_spec(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    ArchSpec spec;
    spec.name = std::filesystem::path(path).stem().string();
    std::string line;
    int n = 0;
    int cum_scale = 1;
    while (std::getline(f, line)) {
        const auto eq = line.find('=');
        if (eq == std::string::npos || line.empty() || line[0] == '#') continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        for (char& c : val) {
            if (c == ',') c = ' ';
        }
        std::istringstream ss(val);
        if (key == "conv") {
            LayerSpec l;
            l.name = "conv" + std::to_string(n++);
            if (!(ss >> l.kernel >> l.c_in >> l.c_out >> l.stride)) {
                throw std::runtime_error("bad conv line in " + path + ": " + line);
            }
            ss >> l.dilation;
            if (l.dilation < 1) l.dilation = 1;
            cum_scale *= l.stride;
            l.scale = cum_scale;
            spec.backbone.push_back(l);
        } else if (key == "pool") {
            LayerSpec l;
            l.name = "pool" + std::to_string(n++);
            l.pool = true;
            if (!(ss >> l.kernel >> l.stride)) {
                throw std::runtime_error("bad pool line in " + path + ": " + line);
            }
            l.c_in = l.c_out = spec.backbone.empty() ? 1 : spec.backbone.back().c_out;
            cum_scale *= l.stride;
            l.scale = cum_scale;
            spec.backbone.push_back(l);
        } else if (key == "stage") {
            StageInfo st;
            if (!(ss >> st.scale >> st.c_out >> st.blocks)) {
                throw std::runtime_error("bad stage line in " + path + ": " + line);
            }
            spec.stages.push_back(st);
        } else if (key == "decoder") {
            if (val == "none") spec.decoder = ArchSpec::Decoder::None;
            else if (val == "dilated-8") { spec.decoder = ArchSpec::Decoder::Dilated; spec.dilated_scale = 8; }
            else if (val == "dilated-16") { spec.decoder = ArchSpec::Decoder::Dilated; spec.dilated_scale = 16; }
            else if (val == "symdec") spec.decoder = ArchSpec::Decoder::SymmetricDecoder;
            else if (val == "fpn") spec.decoder = ArchSpec::Decoder::Fpn;
            else throw std::runtime_error("unknown decoder '" + val + "' in " + path);
        } else if (key == "fpn_channels") {
            ss >> spec.fpn_channels;
        } else if (key == "semantic_head") {
            spec.with_semantic_head = (val == "true" || val == "1");
        } else if (key == "head_width") {
            ss >> spec.head.width;
        } else if (key == "head_classes") {
            ss >> spec.head.classes;
        } else {
            throw std::runtime_error("unknown key '" + key + "' in " + path);
        }
    }
    if (spec.decoder == ArchSpec::Decoder::Dilated) {
        ArchSpec base = spec;
        base.decoder = ArchSpec::Decoder::None;
        const std::string name = spec.name;
        spec = dilate_backbone(std::move(base), spec.dilated_scale);
        spec.name = name;
    }
    return spec;
}

inline void write_report_csv(std::ostream& os, const CostReport& rep) {
    os << "layer,multiply_adds,activations\n";
    for (const auto& l : rep.layers) os << l.name << "," << l.multiply_adds << "," << l.activations << "\n";
    os << "total," << rep.total_multiply_adds << "," << rep.total_activations << "\n";
}

inline void write_report_text(std::ostream& os, const CostReport& rep) {
    os << std::left << std::setw(34) << "layer" << std::right << std::setw(16) << "multiply-adds"
       << std::setw(14) << "activations" << "\n";
    for (const auto& l : rep.layers) {
        os << std::left << std::setw(34) << l.name << std::right << std::setw(16) << l.multiply_adds
           << std::setw(14) << l.activations << "\n";
    }
    os << std::left << std::setw(34) << "TOTAL" << std::right << std::setw(16)
       << rep.total_multiply_adds << std::setw(14) << rep.total_activations << "\n";
}

inline void write_comparison_csv(std::ostream& os, const VariantComparison& cmp) {
    os << "variant,multiply_adds,activations,madds_vs_fpn,activations_vs_fpn\n";
    for (const auto& r : cmp.rows) {
        os << r.name << "," << r.multiply_adds << "," << r.activations << "," << r.madds_vs_fpn
           << "," << r.activations_vs_fpn << "\n";
    }
}

inline void write_comparison_text(std::ostream& os, const VariantComparison& cmp) {
    os << std::left << std::setw(24) << "variant" << std::right << std::setw(16) << "multiply-adds"
       << std::setw(14) << "activations" << std::setw(12) << "madds/FPN" << std::setw(12)
       << "act/FPN" << "\n";
    for (const auto& r : cmp.rows) {
        os << std::left << std::setw(24) << r.name << std::right << std::setw(16) << r.multiply_adds
           << std::setw(14) << r.activations << std::setw(12) << std::fixed << std::setprecision(3)
           << r.madds_vs_fpn << std::setw(12) << r.activations_vs_fpn << "\n";
    }
}

}  // namespace panfpn
