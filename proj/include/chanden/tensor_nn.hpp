// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef CHANDEN_TENSOR_NN_HPP
#define CHANDEN_TENSOR_NN_HPP

#include <chanden/common.hpp>

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace chanden {

// ---------------------------------------------------------------------------
// Dense tensor. Complex maps travel as two real channels (re, im).

template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty unless gradients are tracked

    Tensor() = default;
    explicit Tensor(std::vector<int> dims) : shape(std::move(dims)), data(element_count(shape), T{}) {}

    static std::size_t element_count(const std::vector<int>& dims)
    {
        std::size_t n = 1;
        for (int d : dims) {
            if (d < 0)
                throw ShapeError("negative tensor dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    int dim(std::size_t i) const { return shape.at(i); }
    void track_grad() { grad.assign(data.size(), T{}); }

    T& operator()(int c, int y, int x)
    {
        return data[(static_cast<std::size_t>(c) * static_cast<std::size_t>(shape[1]) + static_cast<std::size_t>(y)) *
                        static_cast<std::size_t>(shape[2]) +
                    static_cast<std::size_t>(x)];
    }
    const T& operator()(int c, int y, int x) const
    {
        return data[(static_cast<std::size_t>(c) * static_cast<std::size_t>(shape[1]) + static_cast<std::size_t>(y)) *
                        static_cast<std::size_t>(shape[2]) +
                    static_cast<std::size_t>(x)];
    }

    bool all_finite() const
    {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v)))
                return false;
        return true;
    }
};

// Forward-mode dual number. Running the reverse pass on Dual<T> with
// parameter tangents v yields Hessian-vector products in the tangent part.
template <typename T>
struct Dual {
    T v{};
    T d{};

    Dual() = default;
    Dual(T value) : v(value) {}  // NOLINT: implicit lift of constants
    Dual(T value, T tangent) : v(value), d(tangent) {}

    Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
    Dual& operator-=(const Dual& o) { v -= o.v; d -= o.d; return *this; }
    Dual& operator*=(const Dual& o) { d = d * o.v + v * o.d; v *= o.v; return *this; }
    friend Dual operator+(Dual a, const Dual& b) { return a += b; }
    friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
    friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
    friend Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
    friend Dual operator/(const Dual& a, const Dual& b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
    friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
    friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
    explicit operator double() const { return static_cast<double>(v); }
};

// ---------------------------------------------------------------------------
// Residual denoising CNN: `depth` same-padded kernel x kernel convolutions,
// in -> width (ReLU), width -> width (ReLU) x (depth - 2), width -> in.
// The network predicts the noise R(x); the denoised map is x - R(x).

struct ModelSpec {
    int in_channels = 2;
    int width = 16;
    int depth = 5;
    int kernel = 3;

    struct Layer {
        int in = 0;
        int out = 0;
        std::size_t w_offset = 0;  // weights [out][in][kernel][kernel]
        std::size_t b_offset = 0;  // bias [out]
        bool relu = false;
    };

    void validate() const
    {
        if (in_channels < 1 || width < 1 || depth < 1)
            throw ConfigError("model channels and depth must be >= 1");
        if (kernel != 1 && kernel != 3 && kernel != 5 && kernel != 7)
            throw ConfigError("kernel size must be 1, 3, 5 or 7");
    }

    std::vector<Layer> layers() const
    {
        validate();
        std::vector<Layer> out;
        std::size_t off = 0;
        for (int i = 0; i < depth; ++i) {
            Layer l;
            l.in = i == 0 ? in_channels : width;
            l.out = i == depth - 1 ? in_channels : width;
            l.relu = i != depth - 1;
            l.w_offset = off;
            off += static_cast<std::size_t>(l.in) * static_cast<std::size_t>(l.out) * static_cast<std::size_t>(kernel * kernel);
            l.b_offset = off;
            off += static_cast<std::size_t>(l.out);
            out.push_back(l);
        }
        return out;
    }

    std::size_t parameter_count() const
    {
        const auto ls = layers();
        return ls.back().b_offset + static_cast<std::size_t>(ls.back().out);
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

// Denoiser parameters theta plus the architecture they belong to.
struct ModelState {
    ModelSpec spec;
    std::vector<float> theta;

    std::size_t size() const { return theta.size(); }
};

// He-normal weights, zero biases.
inline ModelState init_model(const ModelSpec& spec, std::uint64_t seed)
{
    ModelState m;
    m.spec = spec;
    m.theta.assign(spec.parameter_count(), 0.0f);
    Rng rng(derive_seed(seed, 0x696E6974ULL));
    for (const auto& l : spec.layers()) {
        const double fan_in = static_cast<double>(l.in * spec.kernel * spec.kernel);
        std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / fan_in));
        const std::size_t n = static_cast<std::size_t>(l.in * l.out * spec.kernel * spec.kernel);
        for (std::size_t i = 0; i < n; ++i)
            m.theta[l.w_offset + i] = static_cast<float>(nd(rng));
    }
    return m;
}

// Activations live in zero-bordered planes of (H + 2 pad) x (W + 2 pad) so a
// same-padded convolution is a sum of shifted contiguous axpy passes.
struct PlaneGeometry {
    int H = 0;
    int W = 0;
    int pad = 0;
    int Hp = 0;
    int Wp = 0;
    std::size_t stride = 0;  // plane stride, with slack for shifted reads

    PlaneGeometry() = default;
    PlaneGeometry(int h, int w, int kernel) : H(h), W(w), pad(kernel / 2), Hp(h + 2 * (kernel / 2)), Wp(w + 2 * (kernel / 2))
    {
        stride = static_cast<std::size_t>(Hp) * static_cast<std::size_t>(Wp) + static_cast<std::size_t>(kernel);
        stride = (stride + 15) & ~std::size_t{15};
    }
    std::size_t interior_offset() const { return static_cast<std::size_t>(pad) * static_cast<std::size_t>(Wp) + static_cast<std::size_t>(pad); }
    std::size_t span() const { return static_cast<std::size_t>(H) * static_cast<std::size_t>(Wp); }
    bool operator==(const PlaneGeometry& o) const { return H == o.H && W == o.W && pad == o.pad; }
};

template <typename T>
void zero_border(T* plane, const PlaneGeometry& g)
{
    for (int y = 0; y < g.Hp; ++y) {
        T* row = plane + static_cast<std::size_t>(y) * static_cast<std::size_t>(g.Wp);
        if (y < g.pad || y >= g.H + g.pad) {
            std::fill(row, row + g.Wp, T{});
            continue;
        }
        std::fill(row, row + g.pad, T{});
        std::fill(row + g.pad + g.W, row + g.Wp, T{});
    }
    std::fill(plane + static_cast<std::size_t>(g.Hp) * static_cast<std::size_t>(g.Wp), plane + g.stride, T{});
}

// Per-sample scratch: activations of every layer and their gradients.
template <typename T>
struct Workspace {
    PlaneGeometry geom;
    std::vector<std::vector<T>> acts;   // acts[0] = input, acts[i+1] = layer i output
    std::vector<std::vector<T>> grads;  // same shapes as acts

    void prepare(const ModelSpec& spec, int H, int W)
    {
        const PlaneGeometry g(H, W, spec.kernel);
        const auto ls = spec.layers();
        if (g == geom && acts.size() == ls.size() + 1)
            return;
        geom = g;
        acts.assign(ls.size() + 1, {});
        grads.assign(ls.size() + 1, {});
        acts[0].assign(static_cast<std::size_t>(ls[0].in) * geom.stride, T{});
        grads[0].assign(acts[0].size(), T{});
        for (std::size_t i = 0; i < ls.size(); ++i) {
            acts[i + 1].assign(static_cast<std::size_t>(ls[i].out) * geom.stride, T{});
            grads[i + 1].assign(acts[i + 1].size(), T{});
        }
    }
};

namespace detail {

// Fixed-order SIMD reduction for arithmetic types; lane partials combine in
// the same order on every call, so results are reproducible.
template <typename T>
T dot(const T* __restrict a, const T* __restrict b, std::size_t n)
{
    T acc{};
    if constexpr (std::is_arithmetic_v<T>) {
#pragma omp simd reduction(+ : acc)
        for (std::size_t i = 0; i < n; ++i)
            acc += a[i] * b[i];
    } else {
        for (std::size_t i = 0; i < n; ++i)
            acc += a[i] * b[i];
    }
    return acc;
}

// gw[t] += sum_o go[o] * src[o + sh[t]] for all taps in one pass, one SIMD
// accumulator per tap. Lanes are combined in a fixed order.
template <int KT, typename T, std::size_t N>
void tap_correlate(const T* __restrict go, const T* __restrict src, const std::array<std::size_t, N>& sh, std::size_t n,
                   T* gw)
{
    constexpr std::size_t W = 32 / sizeof(T);
    typedef T vec __attribute__((vector_size(32)));
    vec acc[KT];
    for (int t = 0; t < KT; ++t)
        acc[t] = vec{};
    std::size_t o = 0;
    for (; o + W <= n; o += W) {
        vec a;
        std::memcpy(&a, go + o, sizeof(vec));
        for (int t = 0; t < KT; ++t) {
            vec b;
            std::memcpy(&b, src + sh[static_cast<std::size_t>(t)] + o, sizeof(vec));
            acc[t] += a * b;
        }
    }
    for (int t = 0; t < KT; ++t) {
        T sum{};
        for (std::size_t j = 0; j < W; ++j)
            sum += acc[t][j];
        for (std::size_t r = o; r < n; ++r)
            sum += go[r] * src[sh[static_cast<std::size_t>(t)] + r];
        gw[t] += sum;
    }
}

// Tap offsets of a KxK kernel within the flat padded plane.
template <int K>
std::array<std::size_t, K * K> tap_shifts(const PlaneGeometry& g)
{
    std::array<std::size_t, K * K> sh{};
    for (int dy = 0; dy < K; ++dy)
        for (int dx = 0; dx < K; ++dx)
            sh[static_cast<std::size_t>(dy * K + dx)] = static_cast<std::size_t>(dy) * static_cast<std::size_t>(g.Wp) + static_cast<std::size_t>(dx);
    return sh;
}

// All taps of one (input, output) channel pair are applied in one pass, so
// each output element is loaded and stored once per input channel.
template <int K, typename T>
void conv_forward_k(const ModelSpec::Layer& l, const T* theta, const T* in, T* out, const PlaneGeometry& g)
{
    constexpr int KT = K * K;
    const auto sh = tap_shifts<K>(g);
    const std::size_t n = g.span();
    const std::size_t off = g.interior_offset();
    for (int co = 0; co < l.out; ++co) {
        T* dst_plane = out + static_cast<std::size_t>(co) * g.stride;
        T* __restrict dst = dst_plane + off;
        const T bias = theta[l.b_offset + static_cast<std::size_t>(co)];
        std::fill(dst_plane, dst_plane + g.stride, T{});
        for (std::size_t o = 0; o < n; ++o)
            dst[o] = bias;
        for (int ci = 0; ci < l.in; ++ci) {
            const T* __restrict src = in + static_cast<std::size_t>(ci) * g.stride;
            const T* wp = theta + l.w_offset + (static_cast<std::size_t>(co) * static_cast<std::size_t>(l.in) + static_cast<std::size_t>(ci)) * KT;
            T w[KT];
            const T* sp[KT];
            for (int t = 0; t < KT; ++t) {
                w[t] = wp[t];
                sp[t] = src + sh[static_cast<std::size_t>(t)];
            }
            for (std::size_t o = 0; o < n; ++o) {
                T acc = dst[o];
                for (int t = 0; t < KT; ++t)
                    acc += w[t] * sp[t][o];
                dst[o] = acc;
            }
        }
        zero_border(dst_plane, g);
        if (l.relu) {
            for (std::size_t o = 0; o < g.stride; ++o)
                if (!(dst_plane[o] > T{}))
                    dst_plane[o] = T{};
        }
    }
}

// g_out holds dLoss/d(pre-activation output) with zero borders. Weight
// gradients are correlations of g_out with the shifted input; the input
// gradient is gathered with the taps mirrored.
template <int K, typename T>
void conv_backward_k(const ModelSpec::Layer& l, const T* theta, const T* in, const T* g_out, T* g_in, T* grad,
                     const PlaneGeometry& g)
{
    constexpr int KT = K * K;
    const auto sh = tap_shifts<K>(g);
    const std::size_t n = g.span();
    const std::size_t off = g.interior_offset();
    for (int co = 0; co < l.out; ++co) {
        const T* __restrict go = g_out + static_cast<std::size_t>(co) * g.stride + off;
        T db{};
        for (std::size_t o = 0; o < n; ++o)
            db += go[o];
        grad[l.b_offset + static_cast<std::size_t>(co)] += db;
        for (int ci = 0; ci < l.in; ++ci) {
            const T* __restrict src = in + static_cast<std::size_t>(ci) * g.stride;
            T* gw = grad + l.w_offset + (static_cast<std::size_t>(co) * static_cast<std::size_t>(l.in) + static_cast<std::size_t>(ci)) * KT;
            if constexpr (std::is_floating_point_v<T>) {
                tap_correlate<KT>(go, src, sh, n, gw);
            } else {
                for (int t = 0; t < KT; ++t)
                    gw[t] += dot(go, src + sh[static_cast<std::size_t>(t)], n);
            }
        }
    }
    if (!g_in)
        return;
    // gi[off + o] += sum_t w_t * go_plane[2 off + o - sh_t]; reads outside the
    // interior hit zeroed borders.
    std::fill(g_in, g_in + static_cast<std::size_t>(l.in) * g.stride, T{});
    const std::size_t base = 2 * off;
    for (int ci = 0; ci < l.in; ++ci) {
        T* __restrict gi = g_in + static_cast<std::size_t>(ci) * g.stride + off;
        for (int co = 0; co < l.out; ++co) {
            const T* __restrict gop = g_out + static_cast<std::size_t>(co) * g.stride;
            const T* wp = theta + l.w_offset + (static_cast<std::size_t>(co) * static_cast<std::size_t>(l.in) + static_cast<std::size_t>(ci)) * KT;
            T w[KT];
            const T* gp[KT];
            for (int t = 0; t < KT; ++t) {
                w[t] = wp[t];
                gp[t] = gop + (base - sh[static_cast<std::size_t>(t)]);
            }
            for (std::size_t o = 0; o < n; ++o) {
                T acc = gi[o];
                for (int t = 0; t < KT; ++t)
                    acc += w[t] * gp[t][o];
                gi[o] = acc;
            }
        }
        zero_border(g_in + static_cast<std::size_t>(ci) * g.stride, g);
    }
}

template <typename T>
void conv_forward(const ModelSpec& spec, const ModelSpec::Layer& l, std::span<const T> theta, const T* in, T* out,
                  const PlaneGeometry& g)
{
    switch (spec.kernel) {
    case 1: conv_forward_k<1>(l, theta.data(), in, out, g); break;
    case 3: conv_forward_k<3>(l, theta.data(), in, out, g); break;
    case 5: conv_forward_k<5>(l, theta.data(), in, out, g); break;
    case 7: conv_forward_k<7>(l, theta.data(), in, out, g); break;
    default: throw ConfigError("kernel size must be 1, 3, 5 or 7");
    }
}

template <typename T>
void conv_backward(const ModelSpec& spec, const ModelSpec::Layer& l, std::span<const T> theta, const T* in,
                   const T* g_out, T* g_in, std::span<T> grad, const PlaneGeometry& g)
{
    switch (spec.kernel) {
    case 1: conv_backward_k<1>(l, theta.data(), in, g_out, g_in, grad.data(), g); break;
    case 3: conv_backward_k<3>(l, theta.data(), in, g_out, g_in, grad.data(), g); break;
    case 5: conv_backward_k<5>(l, theta.data(), in, g_out, g_in, grad.data(), g); break;
    case 7: conv_backward_k<7>(l, theta.data(), in, g_out, g_in, grad.data(), g); break;
    default: throw ConfigError("kernel size must be 1, 3, 5 or 7");
    }
}

template <typename T>
void load_input(std::span<const T> input, int channels, Workspace<T>& ws)
{
    const PlaneGeometry& g = ws.geom;
    std::fill(ws.acts[0].begin(), ws.acts[0].end(), T{});
    for (int c = 0; c < channels; ++c) {
        T* plane = ws.acts[0].data() + static_cast<std::size_t>(c) * g.stride;
        for (int y = 0; y < g.H; ++y)
            for (int x = 0; x < g.W; ++x)
                plane[static_cast<std::size_t>(y + g.pad) * static_cast<std::size_t>(g.Wp) + static_cast<std::size_t>(x + g.pad)] =
                    input[(static_cast<std::size_t>(c) * static_cast<std::size_t>(g.H) + static_cast<std::size_t>(y)) * static_cast<std::size_t>(g.W) + static_cast<std::size_t>(x)];
    }
}

template <typename T>
T plane_at(const std::vector<T>& planes, const PlaneGeometry& g, int c, int y, int x)
{
    return planes[static_cast<std::size_t>(c) * g.stride + static_cast<std::size_t>(y + g.pad) * static_cast<std::size_t>(g.Wp) + static_cast<std::size_t>(x + g.pad)];
}

} // namespace detail

inline void check_input_shape(const ModelSpec& spec, std::size_t theta_size, std::size_t input_size, int H, int W)
{
    if (theta_size != spec.parameter_count())
        throw ShapeError("parameter vector has " + std::to_string(theta_size) + " entries, model needs " +
                         std::to_string(spec.parameter_count()));
    if (H < spec.kernel || W < spec.kernel)
        throw ShapeError("input spatial dims must be at least the kernel size");
    if (input_size != static_cast<std::size_t>(spec.in_channels) * static_cast<std::size_t>(H) * static_cast<std::size_t>(W))
        throw ShapeError("input size does not match channels x H x W");
}

// R(input; theta) for one (channels x H x W) map; result has the input shape.
template <typename T>
std::vector<T> forward(const ModelSpec& spec, std::span<const T> theta, std::span<const T> input, int H, int W,
                       Workspace<T>& ws)
{
    check_input_shape(spec, theta.size(), input.size(), H, W);
    ws.prepare(spec, H, W);
    detail::load_input(input, spec.in_channels, ws);
    const auto ls = spec.layers();
    for (std::size_t i = 0; i < ls.size(); ++i)
        detail::conv_forward(spec, ls[i], theta, ws.acts[i].data(), ws.acts[i + 1].data(), ws.geom);
    std::vector<T> out(input.size());
    const auto& last = ws.acts.back();
    for (int c = 0; c < spec.in_channels; ++c)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                out[(static_cast<std::size_t>(c) * static_cast<std::size_t>(H) + static_cast<std::size_t>(y)) * static_cast<std::size_t>(W) + static_cast<std::size_t>(x)] =
                    detail::plane_at(last, ws.geom, c, y, x);
    return out;
}

template <typename T>
std::vector<T> forward(const ModelSpec& spec, std::span<const T> theta, std::span<const T> input, int H, int W)
{
    Workspace<T> ws;
    return forward(spec, theta, input, H, W, ws);
}

// Denoised map: input - R(input).
template <typename T>
std::vector<T> denoise(const ModelSpec& spec, std::span<const T> theta, std::span<const T> input, int H, int W,
                       Workspace<T>& ws)
{
    auto r = forward(spec, theta, input, H, W, ws);
    for (std::size_t i = 0; i < r.size(); ++i)
        r[i] = input[i] - r[i];
    return r;
}

// Residual loss ||R(noisy) - (noisy - clean)||_F^2 for one sample.
template <typename T>
T loss_residual(const ModelSpec& spec, std::span<const T> theta, std::span<const T> noisy, std::span<const T> clean,
                int H, int W, Workspace<T>& ws)
{
    if (noisy.size() != clean.size())
        throw ShapeError("noisy and clean maps differ in size");
    const auto r = forward(spec, theta, noisy, H, W, ws);
    T acc{};
    for (std::size_t i = 0; i < r.size(); ++i) {
        const T e = r[i] - (noisy[i] - clean[i]);
        acc += e * e;
    }
    return acc;
}

// Reverse pass for the residual loss of one sample. Adds dLoss/dtheta into
// `grad` and returns the loss.
template <typename T>
T loss_and_gradient(const ModelSpec& spec, std::span<const T> theta, std::span<const T> noisy, std::span<const T> clean,
                    int H, int W, std::span<T> grad, Workspace<T>& ws)
{
    if (grad.size() != theta.size())
        throw ShapeError("gradient buffer does not match parameter count");
    if (noisy.size() != clean.size())
        throw ShapeError("noisy and clean maps differ in size");
    const auto r = forward(spec, theta, noisy, H, W, ws);
    const auto ls = spec.layers();
    const PlaneGeometry& g = ws.geom;
    auto& g_last = ws.grads.back();
    std::fill(g_last.begin(), g_last.end(), T{});
    T loss{};
    for (int c = 0; c < spec.in_channels; ++c) {
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                const std::size_t i = (static_cast<std::size_t>(c) * static_cast<std::size_t>(H) + static_cast<std::size_t>(y)) * static_cast<std::size_t>(W) + static_cast<std::size_t>(x);
                const T e = r[i] - (noisy[i] - clean[i]);
                loss += e * e;
                g_last[static_cast<std::size_t>(c) * g.stride + static_cast<std::size_t>(y + g.pad) * static_cast<std::size_t>(g.Wp) + static_cast<std::size_t>(x + g.pad)] = T(2) * e;
            }
        }
    }
    for (std::size_t i = ls.size(); i-- > 0;) {
        T* g_in = i > 0 ? ws.grads[i].data() : nullptr;
        detail::conv_backward(spec, ls[i], theta, ws.acts[i].data(), ws.grads[i + 1].data(), g_in, grad, g);
        if (g_in && ls[i - 1].relu) {
            const auto& a = ws.acts[i];
            auto& gi = ws.grads[i];
            for (std::size_t o = 0; o < gi.size(); ++o)
                if (!(a[o] > T{}))
                    gi[o] = T{};
        }
    }
    return loss;
}

// One training pair viewed as flat spans over (channels x H x W) maps.
template <typename T>
struct SamplePair {
    std::span<const T> noisy;
    std::span<const T> clean;
};

template <typename T>
struct BatchGradient {
    T loss{};               // mean per-sample loss
    std::vector<T> grad;    // gradient of the mean loss
};

// Mean residual loss over a batch and its gradient. Per-sample gradients are
// reduced in sample order, so the result does not depend on `jobs`.
template <typename T>
BatchGradient<T> batch_gradient(const ModelSpec& spec, std::span<const T> theta, std::span<const SamplePair<T>> batch,
                                int H, int W, int jobs = 1)
{
    BatchGradient<T> out;
    out.grad.assign(theta.size(), T{});
    if (batch.empty())
        return out;
    const int workers = std::min<int>(resolve_jobs(jobs), static_cast<int>(batch.size()));
    std::vector<T> losses(batch.size(), T{});
    if (workers <= 1) {
        Workspace<T> ws;
        std::vector<T> g(theta.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            std::fill(g.begin(), g.end(), T{});
            losses[i] = loss_and_gradient<T>(spec, theta, batch[i].noisy, batch[i].clean, H, W, g, ws);
            for (std::size_t j = 0; j < g.size(); ++j)
                out.grad[j] += g[j];
        }
    } else {
        std::vector<std::vector<T>> per(batch.size(), std::vector<T>(theta.size(), T{}));
        std::vector<Workspace<T>> spaces(batch.size());
        parallel_for(batch.size(), [&](std::size_t i) {
            losses[i] = loss_and_gradient<T>(spec, theta, batch[i].noisy, batch[i].clean, H, W, per[i], spaces[i]);
        }, workers);
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (std::size_t j = 0; j < theta.size(); ++j)
                out.grad[j] += per[i][j];
    }
    const T inv = T(1) / static_cast<T>(batch.size());
    for (T& v : out.grad)
        v = v * inv;
    for (const T& l : losses)
        out.loss += l;
    out.loss = out.loss * inv;
    return out;
}

// Mean loss only.
template <typename T>
T batch_loss(const ModelSpec& spec, std::span<const T> theta, std::span<const SamplePair<T>> batch, int H, int W)
{
    if (batch.empty())
        return T{};
    Workspace<T> ws;
    T acc{};
    for (const auto& s : batch)
        acc += loss_residual<T>(spec, theta, s.noisy, s.clean, H, W, ws);
    return acc / static_cast<T>(batch.size());
}

// Exact Hessian-vector product of the mean batch loss: forward-over-reverse
// with dual numbers.
template <typename T>
std::vector<T> hessian_vector_product(const ModelSpec& spec, std::span<const T> theta, std::span<const T> v,
                                      std::span<const SamplePair<T>> batch, int H, int W)
{
    if (v.size() != theta.size())
        throw ShapeError("HVP direction does not match parameter count");
    using D = Dual<double>;
    std::vector<D> td(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i)
        td[i] = D(static_cast<double>(theta[i]), static_cast<double>(v[i]));
    std::vector<D> acc(theta.size());
    std::vector<D> g(theta.size());
    Workspace<D> ws;
    for (const auto& s : batch) {
        std::vector<D> noisy(s.noisy.begin(), s.noisy.end());
        std::vector<D> clean(s.clean.begin(), s.clean.end());
        for (auto& x : noisy)
            x = D(static_cast<double>(x.v));
        for (auto& x : clean)
            x = D(static_cast<double>(x.v));
        std::fill(g.begin(), g.end(), D{});
        loss_and_gradient<D>(spec, td, noisy, clean, H, W, g, ws);
        for (std::size_t j = 0; j < g.size(); ++j)
            acc[j] += g[j];
    }
    std::vector<T> out(theta.size());
    const double inv = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
    for (std::size_t j = 0; j < out.size(); ++j)
        out[j] = static_cast<T>(acc[j].d * inv);
    return out;
}

// ---------------------------------------------------------------------------
// Optimizers

template <typename T>
struct AdamState {
    std::vector<T> m;
    std::vector<T> v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamState(std::size_t n = 0) : m(n, T{}), v(n, T{}) {}
};

template <typename T>
void adam_step(AdamState<T>& st, std::span<T> theta, std::span<const T> grad, double lr)
{
    if (st.m.size() != theta.size() || grad.size() != theta.size())
        throw ShapeError("ADAM state, parameters and gradient must have equal size");
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        const double m = st.beta1 * static_cast<double>(st.m[i]) + (1.0 - st.beta1) * g;
        const double v = st.beta2 * static_cast<double>(st.v[i]) + (1.0 - st.beta2) * g * g;
        st.m[i] = static_cast<T>(m);
        st.v[i] = static_cast<T>(v);
        const double mh = m / c1;
        const double vh = v / c2;
        theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * mh / (std::sqrt(vh) + st.eps));
    }
}

// theta <- theta - lr * grad
template <typename T>
void sgd_step(std::span<T> theta, std::span<const T> grad, double lr)
{
    if (grad.size() != theta.size())
        throw ShapeError("parameters and gradient must have equal size");
    for (std::size_t i = 0; i < theta.size(); ++i)
        theta[i] = static_cast<T>(static_cast<double>(theta[i]) - lr * static_cast<double>(grad[i]));
}

template <typename T>
bool all_finite(std::span<const T> v)
{
    for (const T& x : v)
        if (!std::isfinite(static_cast<double>(x)))
            return false;
    return true;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   offset  size  field
//   0       8     magic "CHDNCKPT"
//   8       4     format version (1)
//   12      4     in_channels
//   16      4     width
//   20      4     depth
//   24      4     kernel
//   28      8     parameter count P
//   36      4     metadata length L (UTF-8 JSON text)
//   40      L     metadata
//   40+L    4P    parameters, IEEE-754 binary32
//
// All integers and floats are little-endian.

inline constexpr std::array<char, 8> kCheckpointMagic{'C', 'H', 'D', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace le {

inline void put_u32(std::ostream& os, std::uint32_t v)
{
    const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF), static_cast<char>((v >> 16) & 0xFF),
                       static_cast<char>((v >> 24) & 0xFF)};
    os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v)
{
    put_u32(os, static_cast<std::uint32_t>(v & 0xFFFFFFFFULL));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_f32(std::ostream& os, float f)
{
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put_u32(os, u);
}

inline std::uint32_t get_u32(std::istream& is)
{
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw IoError("unexpected end of file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is)
{
    const std::uint64_t lo = get_u32(is);
    const std::uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

inline float get_f32(std::istream& is)
{
    const std::uint32_t u = get_u32(is);
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

inline void put_string(std::ostream& os, const std::string& s)
{
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, std::uint32_t max_len = 1u << 24)
{
    const std::uint32_t n = get_u32(is);
    if (n > max_len)
        throw IoError("string field too long");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n))
        throw IoError("unexpected end of file");
    return s;
}

} // namespace le

struct Checkpoint {
    ModelState model;
    std::string metadata;  // JSON text
};

inline void write_checkpoint(std::ostream& os, const ModelState& m, const std::string& metadata)
{
    if (m.theta.size() != m.spec.parameter_count())
        throw ShapeError("model parameter count does not match its spec");
    os.write(kCheckpointMagic.data(), 8);
    le::put_u32(os, kCheckpointVersion);
    le::put_u32(os, static_cast<std::uint32_t>(m.spec.in_channels));
    le::put_u32(os, static_cast<std::uint32_t>(m.spec.width));
    le::put_u32(os, static_cast<std::uint32_t>(m.spec.depth));
    le::put_u32(os, static_cast<std::uint32_t>(m.spec.kernel));
    le::put_u64(os, m.theta.size());
    le::put_string(os, metadata);
    for (float f : m.theta)
        le::put_f32(os, f);
    if (!os)
        throw IoError("failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& is)
{
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), 8) || magic != kCheckpointMagic)
        throw IoError("not a checkpoint file (bad magic)");
    const std::uint32_t version = le::get_u32(is);
    if (version != kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.model.spec.in_channels = static_cast<int>(le::get_u32(is));
    c.model.spec.width = static_cast<int>(le::get_u32(is));
    c.model.spec.depth = static_cast<int>(le::get_u32(is));
    c.model.spec.kernel = static_cast<int>(le::get_u32(is));
    const std::uint64_t count = le::get_u64(is);
    try {
        c.model.spec.validate();
    } catch (const ConfigError& e) {
        throw IoError(std::string("corrupt checkpoint header: ") + e.what());
    }
    if (count != c.model.spec.parameter_count())
        throw IoError("checkpoint parameter count does not match its architecture");
    c.metadata = le::get_string(is);
    c.model.theta.resize(count);
    for (auto& f : c.model.theta)
        f = le::get_f32(is);
    return c;
}

inline void save_checkpoint(const std::string& path, const ModelState& m, const std::string& metadata)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot open '" + path + "' for writing");
    write_checkpoint(os, m, metadata);
}

inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open '" + path + "'");
    return read_checkpoint(is);
}

} // namespace chanden

#endif
