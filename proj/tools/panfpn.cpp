// panfpn: panoptic segmentation toolkit CLI.
//
// Exit codes: 0 success, 1 usage error, 2 validation/data error, 3 internal error.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "panfpn/branch.hpp"
#include "panfpn/losses.hpp"
#include "panfpn/metrics.hpp"
#include "panfpn/panoptic_io.hpp"
#include "panfpn/profiler.hpp"
#include "panfpn/reference.hpp"
#include "panfpn/train_demo.hpp"

namespace fs = std::filesystem;
using namespace panfpn;

namespace {

struct GlobalOpts {
    uint64_t seed = 1;
    int threads = 1;
    std::string format = "text";  // json | csv | text
};

int default_threads() {
    if (const char* env = std::getenv("PANFPN_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

std::pair<int, int> parse_extent(const std::string& s) {
    const auto x = s.find('x');
    if (x == std::string::npos) {
        throw CLI::ValidationError("--image", "expected HxW, got '" + s + "'");
    }
    const int h = std::stoi(s.substr(0, x));
    const int w = std::stoi(s.substr(x + 1));
    if (h < 1 || w < 1) throw CLI::ValidationError("--image", "extent must be positive");
    return {h, w};
}

// --- fuse ---

int cmd_fuse(const GlobalOpts&, const std::string& instances_path,
             const std::string& semantic_path, const std::string& categories_path,
             const std::string& out_prefix, const FusionConfig& config) {
    Tensor probs = load_tensor(semantic_path);
    if (probs.n() != 1) {
        throw ValidationError("semantic tensor must hold a single image, got batch " +
                              std::to_string(probs.n()));
    }
    PanopticDataset meta = load_dataset_json(categories_path);
    const CategoryTable categories = meta.category_table();
    if (categories.empty()) {
        throw ValidationError("no categories found in " + categories_path);
    }

    std::vector<InstancePrediction> instances;
    if (!instances_path.empty()) {
        instances = load_instances_jsonl(instances_path, probs.h(), probs.w());
    }

    PanopticMap map = panoptic_fuse(instances, probs, config, categories);
    map.validate();

    const fs::path prefix(out_prefix);
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    write_file(out_prefix + ".png", encode_id_png(map.id_map, map.h, map.w));
    PanopticDataset out;
    out.categories = meta.categories;
    append_panoptic_result(out, prefix.has_parent_path() ? prefix.parent_path().string() : ".",
                           0, prefix.filename().string() + ".png", map);
    save_dataset_json(out_prefix + ".json", out);

    int things = 0, stuff = 0;
    for (const auto& [id, seg] : map.segments) (seg.is_thing ? things : stuff)++;
    std::cout << "fused " << map.segments.size() << " segments (" << things << " things, "
              << stuff << " stuff) over " << map.h << "x" << map.w << "\n";
    return 0;
}

// --- evaluate ---

int cmd_evaluate(const GlobalOpts& opts, const std::string& pred_json, std::string pred_dir,
                 const std::string& gt_json, std::string gt_dir, bool repair_areas) {
    if (pred_dir.empty()) pred_dir = fs::path(pred_json).parent_path().string();
    if (gt_dir.empty()) gt_dir = fs::path(gt_json).parent_path().string();
    DatasetLoader pred(pred_json, pred_dir, repair_areas);
    DatasetLoader gt(gt_json, gt_dir, repair_areas);

    std::set<int64_t> pred_ids, gt_ids;
    for (const auto& a : pred.dataset().annotations) pred_ids.insert(a.image_id);
    for (const auto& a : gt.dataset().annotations) gt_ids.insert(a.image_id);
    if (pred_ids != gt_ids) {
        std::ostringstream msg;
        msg << "image id sets differ;";
        for (int64_t id : gt_ids) {
            if (!pred_ids.count(id)) msg << " missing prediction for " << id;
        }
        for (int64_t id : pred_ids) {
            if (!gt_ids.count(id)) msg << " prediction without ground truth " << id;
        }
        throw ValidationError(msg.str());
    }

    std::map<int64_t, size_t> pred_index;
    for (size_t i = 0; i < pred.size(); ++i) {
        pred_index[pred.dataset().annotations[i].image_id] = i;
    }

    // dense class indices for the confusion matrix
    const CategoryTable categories = gt.dataset().category_table();
    std::map<int, int> class_index;
    for (const auto& [cat, is_thing] : categories) {
        class_index[cat] = static_cast<int>(class_index.size());
    }
    const int K = static_cast<int>(class_index.size());
    const int ignore = K;  // sentinel row for void pixels

    const size_t n_images = gt.size();
    const int threads = std::max(1, opts.threads);
    std::vector<PqStats> pq_parts(threads);
    std::vector<ConfusionMatrix> cm_parts(threads, ConfusionMatrix(K));
    std::vector<std::string> errors(threads);

    auto worker = [&](int t) {
        try {
            for (size_t i = t; i < n_images; i += threads) {
                auto [gt_map, gt_ann] = gt.load(i);
                auto [pred_map, pred_ann] = pred.load(pred_index.at(gt_ann->image_id));
                pq_parts[t].merge(pq_match(pred_map, gt_map));

                auto to_labels = [&](const PanopticMap& m) {
                    std::vector<int32_t> labels(m.id_map.size(), ignore);
                    for (size_t p = 0; p < m.id_map.size(); ++p) {
                        if (m.id_map[p] == 0) continue;
                        labels[p] = class_index.at(m.segments.at(m.id_map[p]).category);
                    }
                    return labels;
                };
                cm_parts[t].accumulate(to_labels(pred_map), to_labels(gt_map), ignore);
            }
        } catch (const std::exception& e) {
            errors[t] = e.what();
        }
    };
    if (threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (!e.empty()) throw ValidationError(e);
    }

    PqStats pq_stats;
    for (const auto& p : pq_parts) pq_stats.merge(p);
    ConfusionMatrix cm(K);
    for (const auto& part : cm_parts) {
        for (size_t i = 0; i < cm.counts.size(); ++i) cm.counts[i] += part.counts[i];
    }

    const PqReport pq = compute_pq(pq_stats, categories);
    const IouReport iou = compute_miou(cm);

    nlohmann::json j;
    j["images"] = n_images;
    j["pq"] = pq.pq;
    j["pq_th"] = pq.pq_things;
    j["pq_st"] = pq.pq_stuff;
    j["miou"] = iou.miou;
    j["fiou"] = iou.fiou;
    j["per_category"] = nlohmann::json::array();
    for (const auto& c : pq.per_category) {
        j["per_category"].push_back({{"category", c.category},
                                     {"isthing", c.is_thing},
                                     {"pq", c.pq},
                                     {"sq", c.sq},
                                     {"rq", c.rq},
                                     {"tp", c.tp},
                                     {"fp", c.fp},
                                     {"fn", c.fn}});
    }
    if (opts.format == "csv") {
        std::cout << "metric,value\nimages," << n_images << "\npq," << pq.pq << "\npq_th,"
                  << pq.pq_things << "\npq_st," << pq.pq_stuff << "\nmiou," << iou.miou
                  << "\nfiou," << iou.fiou << "\n";
    } else if (opts.format == "text") {
        std::cout << "evaluated " << n_images << " images\n"
                  << "PQ    " << pq.pq << "\nPQ-Th " << pq.pq_things << "\nPQ-St " << pq.pq_stuff
                  << "\nmIoU  " << iou.miou << "\nfIoU  " << iou.fiou << "\n";
    } else {
        std::cout << j.dump(2) << "\n";
    }
    return 0;
}

// --- profile ---

ArchSpec resolve_arch(const std::string& arch) {
    if (arch == "builtin:r101-fpn") return with_fpn(resnet101(), 256, true);
    if (arch == "builtin:r101-d8") return dilate_backbone(resnet101(), 8);
    if (arch == "builtin:r101-d16") return dilate_backbone(resnet101(), 16);
    if (arch == "builtin:r101-symdec") return with_symmetric_decoder(resnet101());
    if (arch.rfind("builtin:", 0) == 0) {
        throw ValidationError("unknown builtin architecture '" + arch + "'");
    }
    return load_arch_spec(arch);
}

int cmd_profile(const GlobalOpts& opts, const std::string& arch, const std::string& image,
                bool compare) {
    const auto [h, w] = parse_extent(image);
    if (compare) {
        auto cmp = compare_variants(resnet101(), h, w);
        if (opts.format == "csv") {
            write_comparison_csv(std::cout, cmp);
        } else if (opts.format == "json") {
            nlohmann::json j = nlohmann::json::array();
            for (const auto& r : cmp.rows) {
                j.push_back({{"variant", r.name},
                             {"multiply_adds", r.multiply_adds},
                             {"activations", r.activations},
                             {"madds_vs_fpn", r.madds_vs_fpn},
                             {"activations_vs_fpn", r.activations_vs_fpn}});
            }
            std::cout << j.dump(2) << "\n";
        } else {
            write_comparison_text(std::cout, cmp);
        }
        return 0;
    }
    auto rep = profile(resolve_arch(arch), h, w);
    if (opts.format == "csv") {
        write_report_csv(std::cout, rep);
    } else if (opts.format == "json") {
        nlohmann::json j;
        j["image"] = {rep.image_h, rep.image_w};
        j["total_multiply_adds"] = rep.total_multiply_adds;
        j["total_activations"] = rep.total_activations;
        j["layers"] = nlohmann::json::array();
        for (const auto& l : rep.layers) {
            j["layers"].push_back(
                {{"name", l.name}, {"multiply_adds", l.multiply_adds}, {"activations", l.activations}});
        }
        std::cout << j.dump(2) << "\n";
    } else {
        write_report_text(std::cout, rep);
    }
    return 0;
}

// --- train-demo ---

int cmd_train_demo(const GlobalOpts& opts, int steps, double lr, double lambda_i, double lambda_s,
                   int extent, int classes, int width, const std::string& csv_path,
                   const std::string& checkpoint_dir) {
    TrainConfig tc;
    tc.steps = steps;
    tc.learning_rate = lr;
    tc.lambda_i = lambda_i;
    tc.lambda_s = lambda_s;
    tc.seed = opts.seed;

    BranchConfig bc;
    bc.branch_width = width;
    bc.channel_dim = 64;
    bc.num_classes = classes;
    bc.seed = opts.seed;

    ToyScene scene = generate_scene(opts.seed, extent, classes);
    Trainer trainer(tc, bc, scene);
    std::vector<StepLosses> curve;
    for (int s = 0; s < steps; ++s) curve.push_back(trainer.step());
    const double miou = trainer.train_miou();

    if (!csv_path.empty()) {
        std::ofstream f(csv_path);
        if (!f) throw IoError("cannot open for writing: " + csv_path);
        write_loss_csv(f, curve);
    }
    if (!checkpoint_dir.empty()) {
        save_checkpoint(checkpoint_dir, trainer.branch(), &trainer.fpn());
        save_branch_config((fs::path(checkpoint_dir) / "branch.cfg").string(), bc);
    }
    std::cout << "trained " << steps << " steps; final loss " << curve.back().total
              << "; training-scene mIoU " << miou << "%\n";
    return 0;
}

// --- convert ---

bool has_ext(const std::string& path, const std::string& ext) {
    std::string e = fs::path(path).extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ext;
}

int cmd_convert(const GlobalOpts&, const std::string& in, const std::string& out) {
    if (has_ext(in, ".png") && has_ext(out, ".ptsr")) {
        int h = 0, w = 0;
        const auto ids = decode_id_png(read_file(in), h, w);
        Tensor t(1, 1, h, w);
        for (size_t i = 0; i < ids.size(); ++i) t.data()[i] = static_cast<float>(ids[i]);
        save_tensor(out, t);
        std::cout << "wrote " << out << " (" << h << "x" << w << " id map)\n";
        return 0;
    }
    if (has_ext(in, ".ptsr") && has_ext(out, ".png")) {
        Tensor t = load_tensor(in);
        if (t.n() != 1 || t.c() != 1) {
            throw ValidationError("expected a (1,1,H,W) id tensor, got (" + t.shape() + ")");
        }
        std::vector<uint32_t> ids(t.size());
        for (size_t i = 0; i < ids.size(); ++i) {
            const float v = t.data()[i];
            if (v < 0 || v != std::floor(v) || v >= 16777216.0f) {
                throw ValidationError("tensor value " + std::to_string(v) +
                                      " is not a valid segment id");
            }
            ids[i] = static_cast<uint32_t>(v);
        }
        write_file(out, encode_id_png(ids, t.h(), t.w()));
        std::cout << "wrote " << out << " (" << t.h() << "x" << t.w() << " id map)\n";
        return 0;
    }
    throw CLI::ValidationError("convert",
                               "supported directions: .png -> .ptsr and .ptsr -> .png");
}

// --- selfcheck ---

int cmd_selfcheck(const GlobalOpts&) {
    auto suites = reference::run_all_suites();
    bool all_ok = true;
    for (const auto& s : suites) {
        std::cout << (s.passed() ? "[pass] " : "[FAIL] ") << s.name << " (" << s.cases
                  << " cases)";
        if (!s.passed()) std::cout << " -- " << s.failures << " failures: " << s.detail;
        std::cout << "\n";
        all_ok = all_ok && s.passed();
    }
    if (!all_ok) throw ValidationError("selfcheck found disagreements with the reference suite");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"panfpn: panoptic segmentation toolkit"};
    app.require_subcommand(1);
    app.fallthrough();  // allow global flags after the subcommand name

    GlobalOpts opts;
    opts.threads = default_threads();
    app.add_option("--seed", opts.seed, "deterministic seed for all randomized paths");
    app.add_option("--threads", opts.threads, "per-image worker count (evaluate)");
    app.add_option("--format", opts.format, "output format")
        ->check(CLI::IsMember({"json", "csv", "text"}));

    // fuse
    auto* fuse = app.add_subcommand("fuse", "merge instance and semantic predictions");
    std::string instances_path, semantic_path, categories_path, out_prefix;
    FusionConfig fusion_config;
    fuse->add_option("--instances", instances_path, "instance predictions (jsonl, RLE masks)");
    fuse->add_option("--semantic", semantic_path, "semantic distribution tensor file")->required();
    fuse->add_option("--categories", categories_path, "dataset JSON carrying the category table")
        ->required();
    fuse->add_option("--out", out_prefix, "output prefix (writes <out>.png and <out>.json)")
        ->required();
    fuse->add_option("--score-thresh", fusion_config.score_threshold, "instance score threshold");
    fuse->add_option("--keep-frac", fusion_config.keep_fraction, "minimum surviving mask fraction");
    fuse->add_option("--stuff-area", fusion_config.stuff_area_min, "minimum stuff segment area");
    fuse->add_option("--other-class", fusion_config.other_class_id,
                     "semantic class discarded at fusion");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "panoptic + semantic metrics");
    std::string pred_json, pred_dir, gt_json, gt_dir;
    bool repair_areas = false;
    evaluate->add_option("--pred", pred_json, "prediction dataset JSON")->required();
    evaluate->add_option("--pred-dir", pred_dir, "prediction PNG directory (default: JSON's)");
    evaluate->add_option("--gt", gt_json, "ground-truth dataset JSON")->required();
    evaluate->add_option("--gt-dir", gt_dir, "ground-truth PNG directory (default: JSON's)");
    evaluate->add_flag("--repair-areas", repair_areas, "trust pixels over declared areas");

    // profile
    auto* prof = app.add_subcommand("profile", "analytic cost model");
    std::string arch = "builtin:r101-fpn", image = "1152x1728";
    bool compare = false;
    prof->add_option("--arch", arch,
                     "spec file or builtin:{r101-fpn,r101-d8,r101-d16,r101-symdec}");
    prof->add_option("--image", image, "input extent HxW");
    prof->add_flag("--compare", compare, "compare decoder variants against FPN");

    // train-demo
    auto* demo = app.add_subcommand("train-demo", "overfit a toy scene with the joint loss");
    int steps = 500, extent = 64, classes = 4, width = 32;
    double lr = 0.2, lambda_i = 1.0, lambda_s = 1.0;
    std::string csv_path, checkpoint_dir;
    demo->add_option("--steps", steps, "gradient steps")->check(CLI::PositiveNumber);
    demo->add_option("--lr", lr, "learning rate")->check(CLI::PositiveNumber);
    demo->add_option("--lambda-i", lambda_i, "instance loss weight");
    demo->add_option("--lambda-s", lambda_s, "semantic loss weight");
    demo->add_option("--extent", extent, "scene extent (divisible by 32)");
    demo->add_option("--classes", classes, "stuff class count");
    demo->add_option("--width", width, "branch width");
    demo->add_option("--loss-csv", csv_path, "per-step loss CSV output");
    demo->add_option("--checkpoint", checkpoint_dir, "checkpoint output directory");

    // convert
    auto* convert = app.add_subcommand("convert", "translate id PNGs to/from tensor files");
    std::string conv_in, conv_out;
    convert->add_option("--in", conv_in, "input file (.png or .ptsr)")->required();
    convert->add_option("--out", conv_out, "output file (.ptsr or .png)")->required();

    // selfcheck
    app.add_subcommand("selfcheck", "run the reference-oracle suites");

    try {
        app.parse(argc, argv);
        const GlobalOpts g = opts;
        if (app.got_subcommand("fuse")) {
            return cmd_fuse(g, instances_path, semantic_path, categories_path, out_prefix,
                            fusion_config);
        }
        if (app.got_subcommand("evaluate")) {
            return cmd_evaluate(g, pred_json, pred_dir, gt_json, gt_dir, repair_areas);
        }
        if (app.got_subcommand("profile")) return cmd_profile(g, arch, image, compare);
        if (app.got_subcommand("train-demo")) {
            return cmd_train_demo(g, steps, lr, lambda_i, lambda_s, extent, classes, width,
                                  csv_path, checkpoint_dir);
        }
        if (app.got_subcommand("convert")) return cmd_convert(g, conv_in, conv_out);
        if (app.got_subcommand("selfcheck")) return cmd_selfcheck(g);
        std::cerr << "no subcommand selected\n";
        return 1;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const DegenerateInputError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const EmptyDomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}
