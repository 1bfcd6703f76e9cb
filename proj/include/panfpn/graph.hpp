#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "panfpn/ops.hpp"
#include "panfpn/tensor.hpp"

namespace panfpn {

using NodeId = int;

/// Tape over the seven op families used by the top-down pathway and the semantic branch.
/// Forward results are recorded per node; backward() runs a single reverse sweep and
/// accumulates gradients into node buffers and into the shared parameter objects.
class Graph {
public:
    NodeId input(Tensor t) { return push(Node{OpKind::Input, {}, std::move(t), nullptr, nullptr, 0}); }

    NodeId conv2d_node(NodeId x, std::shared_ptr<ConvParams> p) {
        Tensor out = conv2d(value(x), *p);
        return push(Node{OpKind::Conv, {x}, std::move(out), std::move(p), nullptr, 0});
    }

    NodeId group_norm_node(NodeId x, std::shared_ptr<GroupNormParams> p) {
        Tensor out = group_norm(value(x), *p);
        return push(Node{OpKind::GroupNorm, {x}, std::move(out), nullptr, std::move(p), 0});
    }

    NodeId relu_node(NodeId x) {
        return push(Node{OpKind::Relu, {x}, relu(value(x)), nullptr, nullptr, 0});
    }

    NodeId bilinear_node(NodeId x, int factor) {
        return push(Node{OpKind::Bilinear, {x}, bilinear_upsample(value(x), factor), nullptr,
                         nullptr, factor});
    }

    NodeId sum_node(const std::vector<NodeId>& xs) {
        std::vector<const Tensor*> ins;
        for (NodeId id : xs) ins.push_back(&value(id));
        return push(Node{OpKind::Sum, xs, elementwise_sum(ins), nullptr, nullptr, 0});
    }

    NodeId concat_node(const std::vector<NodeId>& xs) {
        std::vector<const Tensor*> ins;
        for (NodeId id : xs) ins.push_back(&value(id));
        return push(Node{OpKind::Concat, xs, channel_concat(ins), nullptr, nullptr, 0});
    }

    NodeId softmax_node(NodeId x) {
        return push(Node{OpKind::Softmax, {x}, softmax_channels(value(x)), nullptr, nullptr, 0});
    }

    Tensor& value(NodeId id) { return nodes_.at(static_cast<size_t>(id)).value; }
    const Tensor& value(NodeId id) const { return nodes_.at(static_cast<size_t>(id)).value; }

    /// Gradient of the seeded objective w.r.t. this node's output (valid after backward()).
    const float* node_grad(NodeId id) const { return nodes_.at(static_cast<size_t>(id)).value.grad(); }

    size_t node_count() const { return nodes_.size(); }

    void zero_grad() {
        for (auto& n : nodes_) n.value.zero_grad();
    }

    /// Adds `g` to the objective gradient at `id` before running backward().
    void seed_grad(NodeId id, const Tensor& g) {
        Tensor& v = value(id);
        if (!v.same_shape(g)) {
            throw ShapeError("seed_grad shape mismatch: node (" + v.shape() + ") vs seed (" +
                             g.shape() + ")");
        }
        float* dst = v.grad();
        for (size_t i = 0; i < g.size(); ++i) dst[i] += g.data()[i];
    }

    /// Reverse sweep. Requires at least one seeded gradient; parameter gradients accumulate
    /// additively (call zero_grad on the parameters between steps).
    void backward() {
        bool seeded = false;
        for (auto& n : nodes_) seeded = seeded || n.value.has_grad();
        if (!seeded) throw std::logic_error("backward() before any gradient was seeded");
        for (size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.value.has_grad()) continue;
            Tensor out_grad = grad_tensor(n.value);
            switch (n.kind) {
                case OpKind::Input:
                    break;
                case OpKind::Conv:
                    conv2d_backward(value(n.inputs[0]), *n.conv, out_grad, value(n.inputs[0]));
                    break;
                case OpKind::GroupNorm:
                    group_norm_backward(value(n.inputs[0]), *n.gn, out_grad, value(n.inputs[0]));
                    break;
                case OpKind::Relu:
                    relu_backward(value(n.inputs[0]), out_grad, value(n.inputs[0]));
                    break;
                case OpKind::Bilinear:
                    bilinear_upsample_backward(value(n.inputs[0]), n.factor, out_grad,
                                               value(n.inputs[0]));
                    break;
                case OpKind::Sum:
                    for (NodeId id : n.inputs) {
                        float* dst = value(id).grad();
                        for (size_t j = 0; j < out_grad.size(); ++j) dst[j] += out_grad.data()[j];
                    }
                    break;
                case OpKind::Concat: {
                    const size_t plane = static_cast<size_t>(n.value.h()) * n.value.w();
                    for (int b = 0; b < n.value.n(); ++b) {
                        int c_off = 0;
                        for (NodeId id : n.inputs) {
                            Tensor& in = value(id);
                            float* dst = in.grad() + in.index(b, 0, 0, 0);
                            const float* src =
                                out_grad.data() + out_grad.index(b, c_off, 0, 0);
                            for (size_t j = 0; j < in.c() * plane; ++j) dst[j] += src[j];
                            c_off += in.c();
                        }
                    }
                    break;
                }
                case OpKind::Softmax:
                    softmax_channels_backward(n.value, out_grad, value(n.inputs[0]));
                    break;
            }
        }
    }

private:
    enum class OpKind { Input, Conv, GroupNorm, Relu, Bilinear, Sum, Concat, Softmax };

    struct Node {
        OpKind kind;
        std::vector<NodeId> inputs;
        Tensor value;
        std::shared_ptr<ConvParams> conv;
        std::shared_ptr<GroupNormParams> gn;
        int factor;
    };

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    static Tensor grad_tensor(const Tensor& v) {
        Tensor g(v.n(), v.c(), v.h(), v.w());
        std::memcpy(g.data(), v.grad(), v.size() * sizeof(float));
        return g;
    }

    std::vector<Node> nodes_;
};

}  // namespace panfpn
