#include <sstream>

#include "doctest.h"
#include "fd_check.hpp"
#include "panfpn/losses.hpp"
#include "panfpn/reference.hpp"

using namespace panfpn;

namespace {

InstanceLossInputs make_inputs(int R, int R_fg, int K1, int M, uint64_t seed) {
    Rng rng(seed);
    InstanceLossInputs in;
    in.num_sampled_rois = R;
    in.num_foreground_rois = R_fg;
    in.num_classes = K1;
    in.mask_extent = M;
    in.class_logits.resize(static_cast<size_t>(R) * K1);
    in.class_targets.resize(R);
    in.box_pred.resize(static_cast<size_t>(R_fg) * 4);
    in.box_target.resize(in.box_pred.size());
    in.mask_logits.resize(static_cast<size_t>(R_fg) * M * M);
    in.mask_targets.resize(in.mask_logits.size());
    for (auto& v : in.class_logits) v = static_cast<float>(rng.uniform(-2, 2));
    for (int r = 0; r < R; ++r)
        in.class_targets[r] = static_cast<int32_t>(rng.next_u64() % static_cast<uint64_t>(K1));
    for (auto& v : in.box_pred) v = static_cast<float>(rng.uniform(-3, 3));
    for (auto& v : in.box_target) v = static_cast<float>(rng.uniform(-3, 3));
    for (auto& v : in.mask_logits) v = static_cast<float>(rng.uniform(-4, 4));
    for (auto& v : in.mask_targets) v = (rng.next_u64() & 1) ? 1.0f : 0.0f;
    return in;
}

}  // namespace

TEST_CASE("semantic_loss: uniform logits give ln K") {
    Tensor logits(1, 4, 3, 3);
    logits.fill(0.7f);
    SemanticTarget target(1, 3, 3);
    for (auto& l : target.labels) l = 2;
    CHECK(semantic_loss(logits, target) == doctest::Approx(std::log(4.0)).epsilon(1e-9));
}

TEST_CASE("semantic_loss: confident correct logits drive loss to zero") {
    Tensor logits(1, 3, 2, 2);
    SemanticTarget target(1, 2, 2);
    for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) {
            target.at(0, y, x) = 1;
            logits.at(0, 1, y, x) = 50.0f;
        }
    CHECK(semantic_loss(logits, target) <= 1e-6);
}

TEST_CASE("semantic_loss: ignored pixels contribute nothing") {
    Rng rng(1);
    Tensor logits = reference::random_tensor(rng, 1, 5, 4, 4, -3.0, 3.0);
    SemanticTarget full(1, 4, 4);
    for (int i = 0; i < 16; ++i) full.labels[i] = static_cast<int32_t>(rng.next_u64() % 5);

    // corrupt half the pixels with wild logits but mark them ignored
    SemanticTarget half = full;
    Tensor corrupted = logits;
    for (int i = 0; i < 16; i += 2) {
        half.labels[i] = kIgnoreLabel;
        for (int c = 0; c < 5; ++c)
            corrupted.data()[c * 16 + i] = 1000.0f;
    }
    // losses computed over the surviving labeled set agree
    SemanticTarget survivors = half;
    double a = semantic_loss(corrupted, half);
    double b = semantic_loss(logits, survivors);
    CHECK(a == doctest::Approx(b).epsilon(1e-9));
}

TEST_CASE("semantic_loss: all-ignored target throws") {
    Tensor logits(1, 3, 2, 2);
    SemanticTarget target(1, 2, 2);
    for (auto& l : target.labels) l = kIgnoreLabel;
    CHECK_THROWS_AS(semantic_loss(logits, target), DegenerateInputError);
}

TEST_CASE("semantic_loss: out-of-range label throws") {
    Tensor logits(1, 3, 2, 2);
    SemanticTarget target(1, 2, 2);
    target.labels[0] = 3;
    CHECK_THROWS_AS(semantic_loss(logits, target), ShapeError);
}

TEST_CASE("semantic_loss gradient matches finite differences") {
    Rng rng(2);
    Tensor logits = reference::random_tensor(rng, 1, 4, 3, 3, -2.0, 2.0);
    SemanticTarget target(1, 3, 3);
    for (size_t i = 0; i < target.labels.size(); ++i)
        target.labels[i] = static_cast<int32_t>(rng.next_u64() % 4);
    target.labels[4] = kIgnoreLabel;

    Tensor grad = logits;
    grad.ensure_grad();
    semantic_loss(logits, target, &grad);
    auto loss = [&] { return semantic_loss(logits, target); };
    auto res = fdcheck::check_params(logits.data(), grad.grad(), logits.size(), loss);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_error <= 1e-2);
}

TEST_CASE("semantic_loss gradient is zero at ignored pixels") {
    Rng rng(3);
    Tensor logits = reference::random_tensor(rng, 1, 3, 2, 2);
    SemanticTarget target(1, 2, 2);
    target.labels = {0, kIgnoreLabel, 1, 2};
    Tensor grad = logits;
    grad.ensure_grad();
    semantic_loss(logits, target, &grad);
    for (int c = 0; c < 3; ++c) CHECK(grad.grad()[c * 4 + 1] == 0.0f);
}

TEST_CASE("instance_losses: uniform class logits give ln(K+1)") {
    auto in = make_inputs(8, 0, 5, 2, 4);
    std::fill(in.class_logits.begin(), in.class_logits.end(), 0.0f);
    in.box_pred.clear();
    in.box_target.clear();
    in.mask_logits.clear();
    in.mask_targets.clear();
    auto out = instance_losses(in);
    CHECK(out.l_class == doctest::Approx(std::log(5.0)).epsilon(1e-9));
    CHECK(out.l_box == 0.0);
    CHECK(out.l_mask == 0.0);
}

TEST_CASE("instance_losses: smooth-L1 branches") {
    InstanceLossInputs in;
    in.num_sampled_rois = 1;
    in.num_foreground_rois = 1;
    in.num_classes = 2;
    in.mask_extent = 1;
    in.class_logits = {0.0f, 0.0f};
    in.class_targets = {1};
    in.box_pred = {0.5f, 2.0f, -3.0f, 0.0f};
    in.box_target = {0.0f, 0.0f, 0.0f, 0.0f};
    in.mask_logits = {0.0f};
    in.mask_targets = {1.0f};
    auto out = instance_losses(in);
    // 0.5*0.25 + (2-0.5) + (3-0.5) + 0, over R=1
    CHECK(out.l_box == doctest::Approx(0.125 + 1.5 + 2.5).epsilon(1e-9));
    // BCE at logit 0: ln 2 per pixel
    CHECK(out.l_mask == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("instance_losses: R_fg == 0 zeroes box and mask terms") {
    auto in = make_inputs(4, 0, 3, 2, 5);
    in.box_pred.clear();
    in.box_target.clear();
    in.mask_logits.clear();
    in.mask_targets.clear();
    auto out = instance_losses(in);
    CHECK(out.l_box == 0.0);
    CHECK(out.l_mask == 0.0);
    CHECK(out.l_class > 0.0);
}

TEST_CASE("instance_losses: R == 0 throws") {
    InstanceLossInputs in;
    CHECK_THROWS_AS(instance_losses(in), DegenerateInputError);
}

TEST_CASE("instance_losses: duplicating every RoI leaves all three terms unchanged") {
    auto in = make_inputs(6, 3, 4, 4, 6);
    auto doubled = in;
    doubled.num_sampled_rois *= 2;
    doubled.num_foreground_rois *= 2;
    auto dup = [](auto& v) { v.insert(v.end(), v.begin(), v.end()); };
    dup(doubled.class_logits);
    dup(doubled.class_targets);
    dup(doubled.box_pred);
    dup(doubled.box_target);
    dup(doubled.mask_logits);
    dup(doubled.mask_targets);
    auto a = instance_losses(in);
    auto b = instance_losses(doubled);
    CHECK(a.l_class == doctest::Approx(b.l_class).epsilon(1e-12));
    CHECK(a.l_box == doctest::Approx(b.l_box).epsilon(1e-12));
    CHECK(a.l_mask == doctest::Approx(b.l_mask).epsilon(1e-12));
}

TEST_CASE("instance_losses gradients match finite differences") {
    auto in = make_inputs(5, 3, 4, 3, 7);
    InstanceLossGrads grads;
    instance_losses(in, &grads);

    auto class_loss = [&] { return instance_losses(in).l_class; };
    auto res = fdcheck::check_params(in.class_logits.data(), grads.class_logits.data(),
                                     in.class_logits.size(), class_loss);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_error <= 1e-2);

    auto box_loss = [&] { return instance_losses(in).l_box; };
    res = fdcheck::check_params(in.box_pred.data(), grads.box_pred.data(), in.box_pred.size(),
                                box_loss);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_error <= 1e-2);

    auto mask_loss = [&] { return instance_losses(in).l_mask; };
    res = fdcheck::check_params(in.mask_logits.data(), grads.mask_logits.data(),
                                in.mask_logits.size(), mask_loss);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_error <= 1e-2);
}

TEST_CASE("instance_losses input validation") {
    auto in = make_inputs(4, 2, 3, 2, 8);
    auto bad = in;
    bad.class_targets[0] = 3;
    CHECK_THROWS_AS(instance_losses(bad), ShapeError);
    bad = in;
    bad.mask_targets[0] = 0.5f;
    CHECK_THROWS_AS(instance_losses(bad), ShapeError);
    bad = in;
    bad.num_foreground_rois = 5;
    CHECK_THROWS_AS(instance_losses(bad), ShapeError);
    bad = in;
    bad.box_pred.pop_back();
    CHECK_THROWS_AS(instance_losses(bad), ShapeError);
}

TEST_CASE("joint_loss is linear in the lambdas") {
    InstanceLosses inst{0.7, 0.3, 0.5};
    const double ls = 1.1;
    CHECK(joint_loss(inst, ls, {1.0, 1.0}) == doctest::Approx(1.5 + 1.1));
    CHECK(joint_loss(inst, ls, {0.5, 1.0}) == doctest::Approx(0.75 + 1.1));
    CHECK(joint_loss(inst, ls, {1.0, 0.75}) == doctest::Approx(1.5 + 0.825));
    CHECK(joint_loss(inst, ls, {0.0, 0.0}) == 0.0);
    // linearity: L(a+b) = L(a) + L(b) over weights
    const double l1 = joint_loss(inst, ls, {0.25, 0.5});
    const double l2 = joint_loss(inst, ls, {0.5, 0.25});
    CHECK(joint_loss(inst, ls, {0.75, 0.75}) == doctest::Approx(l1 + l2));
}

TEST_CASE("joint_loss rejects non-finite terms") {
    InstanceLosses inst{std::numeric_limits<double>::quiet_NaN(), 0, 0};
    CHECK_THROWS_AS(joint_loss(inst, 0.0, {}), DegenerateInputError);
    CHECK_THROWS_AS(joint_loss({0, 0, 0}, std::numeric_limits<double>::infinity(), {}),
                    DegenerateInputError);
}

TEST_CASE("lambda_sweep covers the grid and captures per-row failures") {
    std::vector<LossWeights> grid;
    for (double li : {0.5, 0.75, 1.0})
        for (double ls : {0.5, 0.75, 1.0}) grid.push_back({li, ls});

    auto runner = [](const LossWeights& w) -> SweepRow {
        if (w.lambda_i == 0.75 && w.lambda_s == 0.5) throw std::runtime_error("boom");
        SweepRow row;
        row.l_class = 0.1;
        row.l_box = 0.2;
        row.l_mask = 0.3;
        row.l_semantic = 0.4;
        row.total = joint_loss({0.1, 0.2, 0.3}, 0.4, w);
        row.metrics = {w.lambda_i + w.lambda_s};
        return row;
    };
    auto result = lambda_sweep(runner, grid, {"check"});
    REQUIRE(result.rows.size() == 9);
    int failures = 0;
    for (const auto& row : result.rows) {
        if (!row.error.empty()) {
            ++failures;
            CHECK(row.lambda_i == 0.75);
            CHECK(row.lambda_s == 0.5);
        } else {
            CHECK(row.total ==
                  doctest::Approx(row.lambda_i * 0.6 + row.lambda_s * 0.4).epsilon(1e-12));
        }
    }
    CHECK(failures == 1);

    std::ostringstream csv;
    write_sweep_csv(csv, result);
    const std::string text = csv.str();
    CHECK(text.rfind("lambda_i,lambda_s,L_c,L_b,L_m,L_s,L,check\n", 0) == 0);
    CHECK(text.find("error") != std::string::npos);
    size_t lines = 0;
    for (char ch : text)
        if (ch == '\n') ++lines;
    CHECK(lines == 10);
}

TEST_CASE("lambda_sweep rejects an empty grid") {
    CHECK_THROWS_AS(lambda_sweep([](const LossWeights&) { return SweepRow{}; }, {}),
                    DegenerateInputError);
}
