#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "panfpn/tensor.hpp"

namespace panfpn {

/// Convolution parameters. Weight layout is (c_out, c_in, k, k) stored in a Tensor.
/// Cross-correlation semantics, no kernel flip.
struct ConvParams {
    Tensor weight;             // (c_out, c_in, k, k)
    std::vector<float> bias;   // (c_out)
    std::vector<float> bias_grad;
    int stride = 1;
    int padding = 0;
    int dilation = 1;

    ConvParams(int c_out, int c_in, int k, int stride_ = 1, int padding_ = 0, int dilation_ = 1)
        : weight(c_out, c_in, k, k), bias(c_out, 0.0f), bias_grad(c_out, 0.0f),
          stride(stride_), padding(padding_), dilation(dilation_) {
        if (k != 1 && k != 3) throw ShapeError("conv kernel size must be 1 or 3, got " + std::to_string(k));
        if (stride_ < 1 || dilation_ < 1 || padding_ < 0) {
            throw ShapeError("conv stride/dilation must be >= 1 and padding >= 0");
        }
    }

    int c_out() const { return weight.n(); }
    int c_in() const { return weight.c(); }
    int k() const { return weight.h(); }
    size_t param_count() const { return weight.size() + bias.size(); }

    void zero_grad() {
        weight.zero_grad();
        std::fill(bias_grad.begin(), bias_grad.end(), 0.0f);
    }
};

struct GroupNormParams {
    int groups;
    std::vector<float> gamma, beta;
    std::vector<float> gamma_grad, beta_grad;
    float epsilon = 1e-5f;

    GroupNormParams(int channels, int groups_)
        : groups(groups_), gamma(channels, 1.0f), beta(channels, 0.0f),
          gamma_grad(channels, 0.0f), beta_grad(channels, 0.0f) {
        if (groups_ < 1 || channels % groups_ != 0) {
            throw ShapeError("channels (" + std::to_string(channels) +
                             ") must be divisible by groups (" + std::to_string(groups_) + ")");
        }
    }

    int channels() const { return static_cast<int>(gamma.size()); }
    size_t param_count() const { return gamma.size() + beta.size(); }

    void zero_grad() {
        std::fill(gamma_grad.begin(), gamma_grad.end(), 0.0f);
        std::fill(beta_grad.begin(), beta_grad.end(), 0.0f);
    }
};

inline int conv_out_extent(int in, int k, int stride, int padding, int dilation) {
    const int span = (k - 1) * dilation + 1;
    const int padded = in + 2 * padding;
    if (span > padded) {
        throw ShapeError("conv receptive span " + std::to_string(span) +
                         " exceeds padded input extent " + std::to_string(padded));
    }
    return (padded - span) / stride + 1;
}

inline Tensor conv2d(const Tensor& input, const ConvParams& p) {
    if (input.c() != p.c_in()) {
        throw ShapeError("conv2d channel mismatch: input (" + input.shape() + ") vs weight (" +
                         p.weight.shape() + ")");
    }
    const int k = p.k();
    const int oh = conv_out_extent(input.h(), k, p.stride, p.padding, p.dilation);
    const int ow = conv_out_extent(input.w(), k, p.stride, p.padding, p.dilation);
    Tensor out(input.n(), p.c_out(), oh, ow);

    const int ih = input.h(), iw = input.w(), ci = p.c_in();
    for (int n = 0; n < input.n(); ++n) {
        for (int co = 0; co < p.c_out(); ++co) {
            const float* wbase = p.weight.data() + p.weight.index(co, 0, 0, 0);
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    double acc = p.bias[co];
                    for (int ky = 0; ky < k; ++ky) {
                        const int sy = y * p.stride - p.padding + ky * p.dilation;
                        if (sy < 0 || sy >= ih) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int sx = x * p.stride - p.padding + kx * p.dilation;
                            if (sx < 0 || sx >= iw) continue;
                            const float* in_px = input.data() + input.index(n, 0, sy, sx);
                            const float* w_px = wbase + ky * k + kx;
                            const size_t in_stride = static_cast<size_t>(ih) * iw;
                            const size_t w_stride = static_cast<size_t>(k) * k;
                            for (int c = 0; c < ci; ++c) {
                                acc += static_cast<double>(in_px[c * in_stride]) *
                                       static_cast<double>(w_px[c * w_stride]);
                            }
                        }
                    }
                    out.at(n, co, y, x) = static_cast<float>(acc);
                }
            }
        }
    }
    return out;
}

/// Accumulates input/weight/bias gradients for conv2d. out_grad has the forward output shape.
inline void conv2d_backward(const Tensor& input, ConvParams& p, const Tensor& out_grad,
                            Tensor& in_grad) {
    const int k = p.k();
    const int ih = input.h(), iw = input.w();
    float* dx = in_grad.grad();
    float* dw = p.weight.grad();
    for (int n = 0; n < input.n(); ++n) {
        for (int co = 0; co < p.c_out(); ++co) {
            for (int y = 0; y < out_grad.h(); ++y) {
                for (int x = 0; x < out_grad.w(); ++x) {
                    const float g = out_grad.at(n, co, y, x);
                    if (g == 0.0f) continue;
                    p.bias_grad[co] += g;
                    for (int ky = 0; ky < k; ++ky) {
                        const int sy = y * p.stride - p.padding + ky * p.dilation;
                        if (sy < 0 || sy >= ih) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int sx = x * p.stride - p.padding + kx * p.dilation;
                            if (sx < 0 || sx >= iw) continue;
                            for (int c = 0; c < p.c_in(); ++c) {
                                const size_t ii = input.index(n, c, sy, sx);
                                const size_t wi = p.weight.index(co, c, ky, kx);
                                dw[wi] += g * input.data()[ii];
                                dx[ii] += g * p.weight.data()[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}

inline Tensor group_norm(const Tensor& input, const GroupNormParams& p) {
    if (input.c() != p.channels() || input.c() % p.groups != 0) {
        throw ShapeError("group_norm: input channels " + std::to_string(input.c()) +
                         " not divisible into " + std::to_string(p.groups) + " groups of size " +
                         std::to_string(p.channels() / p.groups));
    }
    Tensor out(input.n(), input.c(), input.h(), input.w());
    const int cpg = input.c() / p.groups;
    const size_t plane = static_cast<size_t>(input.h()) * input.w();
    const size_t gsize = cpg * plane;
    for (int n = 0; n < input.n(); ++n) {
        for (int g = 0; g < p.groups; ++g) {
            const float* src = input.data() + input.index(n, g * cpg, 0, 0);
            double sum = 0.0, sq = 0.0;
            for (size_t i = 0; i < gsize; ++i) {
                sum += src[i];
                sq += static_cast<double>(src[i]) * src[i];
            }
            const double mean = sum / static_cast<double>(gsize);
            const double var = sq / static_cast<double>(gsize) - mean * mean;
            const double inv = 1.0 / std::sqrt(std::max(var, 0.0) + p.epsilon);
            float* dst = out.data() + out.index(n, g * cpg, 0, 0);
            for (int c = 0; c < cpg; ++c) {
                const double gm = p.gamma[g * cpg + c], bt = p.beta[g * cpg + c];
                for (size_t i = 0; i < plane; ++i) {
                    dst[c * plane + i] =
                        static_cast<float>(gm * (src[c * plane + i] - mean) * inv + bt);
                }
            }
        }
    }
    return out;
}

inline void group_norm_backward(const Tensor& input, GroupNormParams& p, const Tensor& out_grad,
                                Tensor& in_grad) {
    const int cpg = input.c() / p.groups;
    const size_t plane = static_cast<size_t>(input.h()) * input.w();
    const size_t gsize = cpg * plane;
    float* dx = in_grad.grad();
    for (int n = 0; n < input.n(); ++n) {
        for (int g = 0; g < p.groups; ++g) {
            const float* src = input.data() + input.index(n, g * cpg, 0, 0);
            const float* dy = out_grad.data() + out_grad.index(n, g * cpg, 0, 0);
            double sum = 0.0, sq = 0.0;
            for (size_t i = 0; i < gsize; ++i) {
                sum += src[i];
                sq += static_cast<double>(src[i]) * src[i];
            }
            const double mean = sum / static_cast<double>(gsize);
            const double var = sq / static_cast<double>(gsize) - mean * mean;
            const double inv = 1.0 / std::sqrt(std::max(var, 0.0) + p.epsilon);
            // t = dy * gamma; dx = inv * (t - mean(t) - xhat * mean(t * xhat))
            double t_sum = 0.0, tx_sum = 0.0;
            for (int c = 0; c < cpg; ++c) {
                const double gm = p.gamma[g * cpg + c];
                double dg = 0.0, db = 0.0;
                for (size_t i = 0; i < plane; ++i) {
                    const double xhat = (src[c * plane + i] - mean) * inv;
                    const double d = dy[c * plane + i];
                    t_sum += d * gm;
                    tx_sum += d * gm * xhat;
                    dg += d * xhat;
                    db += d;
                }
                p.gamma_grad[g * cpg + c] += static_cast<float>(dg);
                p.beta_grad[g * cpg + c] += static_cast<float>(db);
            }
            const double t_mean = t_sum / static_cast<double>(gsize);
            const double tx_mean = tx_sum / static_cast<double>(gsize);
            float* dxg = dx + in_grad.index(n, g * cpg, 0, 0);
            for (int c = 0; c < cpg; ++c) {
                const double gm = p.gamma[g * cpg + c];
                for (size_t i = 0; i < plane; ++i) {
                    const double xhat = (src[c * plane + i] - mean) * inv;
                    const double d = dy[c * plane + i];
                    dxg[c * plane + i] +=
                        static_cast<float>(inv * (d * gm - t_mean - xhat * tx_mean));
                }
            }
        }
    }
}

inline Tensor relu(const Tensor& input) {
    Tensor out(input.n(), input.c(), input.h(), input.w());
    for (size_t i = 0; i < input.size(); ++i) out.data()[i] = std::max(0.0f, input.data()[i]);
    return out;
}

inline void relu_backward(const Tensor& input, const Tensor& out_grad, Tensor& in_grad) {
    float* dx = in_grad.grad();
    for (size_t i = 0; i < input.size(); ++i) {
        if (input.data()[i] > 0.0f) dx[i] += out_grad.data()[i];
    }
}

/// Source coordinate for destination index d: (d + 0.5)/factor - 0.5, clamped to [0, extent-1].
struct BilinearTap {
    int lo, hi;
    float w_hi;  // weight of hi sample; lo gets 1 - w_hi
};

inline std::vector<BilinearTap> bilinear_taps(int in_extent, int factor) {
    std::vector<BilinearTap> taps(static_cast<size_t>(in_extent) * factor);
    for (int d = 0; d < in_extent * factor; ++d) {
        float s = (static_cast<float>(d) + 0.5f) / static_cast<float>(factor) - 0.5f;
        s = std::clamp(s, 0.0f, static_cast<float>(in_extent - 1));
        const int lo = static_cast<int>(std::floor(s));
        const int hi = std::min(lo + 1, in_extent - 1);
        taps[d] = {lo, hi, s - static_cast<float>(lo)};
    }
    return taps;
}

inline Tensor bilinear_upsample(const Tensor& input, int factor) {
    if (factor != 2 && factor != 4) {
        throw ShapeError("bilinear_upsample factor must be 2 or 4, got " + std::to_string(factor));
    }
    Tensor out(input.n(), input.c(), input.h() * factor, input.w() * factor);
    const auto ty = bilinear_taps(input.h(), factor);
    const auto tx = bilinear_taps(input.w(), factor);
    for (int n = 0; n < input.n(); ++n) {
        for (int c = 0; c < input.c(); ++c) {
            for (int y = 0; y < out.h(); ++y) {
                const auto& a = ty[y];
                for (int x = 0; x < out.w(); ++x) {
                    const auto& b = tx[x];
                    const float v00 = input.at(n, c, a.lo, b.lo);
                    const float v01 = input.at(n, c, a.lo, b.hi);
                    const float v10 = input.at(n, c, a.hi, b.lo);
                    const float v11 = input.at(n, c, a.hi, b.hi);
                    out.at(n, c, y, x) = (1 - a.w_hi) * ((1 - b.w_hi) * v00 + b.w_hi * v01) +
                                         a.w_hi * ((1 - b.w_hi) * v10 + b.w_hi * v11);
                }
            }
        }
    }
    return out;
}

inline void bilinear_upsample_backward(const Tensor& input, int factor, const Tensor& out_grad,
                                       Tensor& in_grad) {
    const auto ty = bilinear_taps(input.h(), factor);
    const auto tx = bilinear_taps(input.w(), factor);
    float* dx = in_grad.grad();
    for (int n = 0; n < input.n(); ++n) {
        for (int c = 0; c < input.c(); ++c) {
            for (int y = 0; y < out_grad.h(); ++y) {
                const auto& a = ty[y];
                for (int x = 0; x < out_grad.w(); ++x) {
                    const auto& b = tx[x];
                    const float g = out_grad.at(n, c, y, x);
                    dx[in_grad.index(n, c, a.lo, b.lo)] += (1 - a.w_hi) * (1 - b.w_hi) * g;
                    dx[in_grad.index(n, c, a.lo, b.hi)] += (1 - a.w_hi) * b.w_hi * g;
                    dx[in_grad.index(n, c, a.hi, b.lo)] += a.w_hi * (1 - b.w_hi) * g;
                    dx[in_grad.index(n, c, a.hi, b.hi)] += a.w_hi * b.w_hi * g;
                }
            }
        }
    }
}

inline Tensor elementwise_sum(const std::vector<const Tensor*>& inputs) {
    if (inputs.empty()) throw ShapeError("elementwise_sum requires at least one input");
    const Tensor& first = *inputs[0];
    Tensor out(first.n(), first.c(), first.h(), first.w());
    for (const Tensor* t : inputs) {
        if (!t->same_shape(first)) {
            throw ShapeError("elementwise_sum shape mismatch: (" + first.shape() + ") vs (" +
                             t->shape() + ")");
        }
        for (size_t i = 0; i < out.size(); ++i) out.data()[i] += t->data()[i];
    }
    return out;
}

inline Tensor channel_concat(const std::vector<const Tensor*>& inputs) {
    if (inputs.empty()) throw ShapeError("channel_concat requires at least one input");
    const Tensor& first = *inputs[0];
    int c_total = 0;
    for (const Tensor* t : inputs) {
        if (t->n() != first.n() || t->h() != first.h() || t->w() != first.w()) {
            throw ShapeError("channel_concat spatial mismatch: (" + first.shape() + ") vs (" +
                             t->shape() + ")");
        }
        c_total += t->c();
    }
    Tensor out(first.n(), c_total, first.h(), first.w());
    const size_t plane = static_cast<size_t>(first.h()) * first.w();
    for (int n = 0; n < first.n(); ++n) {
        int c_off = 0;
        for (const Tensor* t : inputs) {
            std::memcpy(out.data() + out.index(n, c_off, 0, 0), t->data() + t->index(n, 0, 0, 0),
                        t->c() * plane * sizeof(float));
            c_off += t->c();
        }
    }
    return out;
}

inline Tensor softmax_channels(const Tensor& input) {
    Tensor out(input.n(), input.c(), input.h(), input.w());
    const size_t plane = static_cast<size_t>(input.h()) * input.w();
    for (int n = 0; n < input.n(); ++n) {
        for (size_t px = 0; px < plane; ++px) {
            const float* src = input.data() + static_cast<size_t>(n) * input.c() * plane + px;
            float* dst = out.data() + static_cast<size_t>(n) * input.c() * plane + px;
            float mx = src[0];
            for (int c = 1; c < input.c(); ++c) mx = std::max(mx, src[c * plane]);
            double denom = 0.0;
            for (int c = 0; c < input.c(); ++c) denom += std::exp(static_cast<double>(src[c * plane] - mx));
            for (int c = 0; c < input.c(); ++c) {
                dst[c * plane] = static_cast<float>(std::exp(static_cast<double>(src[c * plane] - mx)) / denom);
            }
        }
    }
    return out;
}

inline void softmax_channels_backward(const Tensor& output, const Tensor& out_grad, Tensor& in_grad) {
    const size_t plane = static_cast<size_t>(output.h()) * output.w();
    float* dx = in_grad.grad();
    for (int n = 0; n < output.n(); ++n) {
        for (size_t px = 0; px < plane; ++px) {
            const size_t base = static_cast<size_t>(n) * output.c() * plane + px;
            double dot = 0.0;
            for (int c = 0; c < output.c(); ++c) {
                dot += static_cast<double>(output.data()[base + c * plane]) *
                       out_grad.data()[base + c * plane];
            }
            for (int c = 0; c < output.c(); ++c) {
                dx[base + c * plane] += static_cast<float>(
                    output.data()[base + c * plane] * (out_grad.data()[base + c * plane] - dot));
            }
        }
    }
}

/// Conv weights ~ uniform(-a, a), a = sqrt(6 / fan_in), fan_in = c_in * k * k.
/// Consumption order: weights in (c_out, c_in, ky, kx) row-major order, then nothing for the
/// bias (zeros). Group-norm gamma/beta are 1/0 and consume no stream values.
inline void init_conv(ConvParams& p, Rng& rng) {
    const double a = std::sqrt(6.0 / (static_cast<double>(p.c_in()) * p.k() * p.k()));
    for (size_t i = 0; i < p.weight.size(); ++i) {
        p.weight.data()[i] = static_cast<float>(rng.uniform(-a, a));
    }
    std::fill(p.bias.begin(), p.bias.end(), 0.0f);
}

}  // namespace panfpn
