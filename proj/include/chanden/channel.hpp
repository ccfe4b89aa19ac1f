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

#ifndef CHANDEN_CHANNEL_HPP
#define CHANDEN_CHANNEL_HPP

#include <chanden/common.hpp>
#include <chanden/resource_grid.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace chanden {

struct PathTap {
    double delay = 0.0;  // seconds
    double power = 1.0;  // linear, all taps sum to 1
};

// Tapped-delay-line description of a time-varying frequency-selective
// channel. Every (rx, tx) element is an independent realization of the same
// statistics.
struct ChannelParams {
    std::vector<PathTap> pdp{{0.0, 1.0}};
    double doppler_hz = 0.0;
    double symbol_duration = 1e-3 / 14.0;
    double sigma_h2 = 1.0;
    std::uint64_t seed = 1;
    int n_oscillators = 32;

    int n_paths() const { return static_cast<int>(pdp.size()); }

    void validate() const
    {
        if (pdp.empty())
            throw ConfigError("power delay profile is empty");
        double total = 0.0;
        for (std::size_t l = 0; l < pdp.size(); ++l) {
            if (pdp[l].delay < 0.0)
                throw ConfigError("path delays must be non-negative");
            if (l > 0 && pdp[l].delay <= pdp[l - 1].delay)
                throw ConfigError("path delays must be strictly increasing");
            if (pdp[l].power < 0.0)
                throw ConfigError("path powers must be non-negative");
            total += pdp[l].power;
        }
        if (std::abs(total - 1.0) > 1e-9)
            throw ConfigError("path powers must sum to 1");
        if (doppler_hz < 0.0)
            throw ConfigError("Doppler frequency must be non-negative");
        if (symbol_duration <= 0.0)
            throw ConfigError("symbol duration must be positive");
        if (sigma_h2 <= 0.0)
            throw ConfigError("sigma_h2 must be positive");
        if (n_oscillators < 16)
            throw ConfigError("at least 16 Doppler oscillators per tap are required");
    }
};

inline std::vector<PathTap> normalize_pdp(std::vector<PathTap> taps)
{
    double total = 0.0;
    for (const auto& t : taps)
        total += t.power;
    if (total <= 0.0)
        throw ConfigError("power delay profile has zero total power");
    for (auto& t : taps)
        t.power /= total;
    return taps;
}

// Named power delay profiles:
//   flat         single zero-delay tap
//   two-tap      equal-power taps at 0 and 500 ns
//   exp-<X>ns    exponentially decaying taps with decay constant X ns, spaced
//                X/4 ns apart up to 5X ns
inline std::vector<PathTap> pdp_preset(const std::string& name)
{
    if (name == "flat")
        return {{0.0, 1.0}};
    if (name == "two-tap")
        return {{0.0, 0.5}, {500e-9, 0.5}};
    if (name.rfind("exp-", 0) == 0 && name.size() > 6 && name.substr(name.size() - 2) == "ns") {
        const std::string num = name.substr(4, name.size() - 6);
        double spread_ns = 0.0;
        try {
            std::size_t used = 0;
            spread_ns = std::stod(num, &used);
            if (used != num.size())
                throw ConfigError("bad preset");
        } catch (const std::exception&) {
            throw ConfigError("unknown power delay profile preset '" + name + "'");
        }
        if (spread_ns <= 0.0)
            throw ConfigError("delay spread must be positive in preset '" + name + "'");
        std::vector<PathTap> taps;
        const double spread = spread_ns * 1e-9;
        const double step = spread / 4.0;
        for (int l = 0; l <= 20; ++l) {
            const double tau = l * step;
            taps.push_back({tau, std::exp(-tau / spread)});
        }
        return normalize_pdp(std::move(taps));
    }
    throw ConfigError("unknown power delay profile preset '" + name + "'");
}

inline double doppler_from_velocity(double velocity_kmh, double carrier_hz)
{
    constexpr double c = 299792458.0;
    return velocity_kmh / 3.6 * carrier_hz / c;
}

struct ChannelRealization {
    int n_symbols = 0;
    int K = 0;
    int n_rx = 0;
    int n_tx = 0;
    std::vector<cplx> cfr;  // (n, k, r, t) row-major
    ChannelParams params;

    std::size_t index(int n, int k, int r, int t) const
    {
        return ((static_cast<std::size_t>(n) * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)) *
                    static_cast<std::size_t>(n_rx) +
                static_cast<std::size_t>(r)) *
                   static_cast<std::size_t>(n_tx) +
               static_cast<std::size_t>(t);
    }
    cplx at(int n, int k, int r, int t) const { return cfr[index(n, k, r, t)]; }
    // N_r x N_t block for one RE, row-major.
    const cplx* re_block(int n, int k) const { return cfr.data() + index(n, k, 0, 0); }
};

// H[n,k] = sum_l a_l[n] exp(-j 2 pi k df tau_l). Each tap a_l[n] is a
// sum-of-sinusoids Rayleigh process with uniformly random arrival angles and
// phases, so its autocorrelation is p_l sigma_h^2 J0(2 pi f_D T (n - n')).
inline ChannelRealization generate_channel(const GridConfig& cfg, const ChannelParams& params, int jobs = 0)
{
    cfg.validate();
    params.validate();
    ChannelRealization ch;
    ch.n_symbols = cfg.n_symbols();
    ch.K = cfg.K;
    ch.n_rx = cfg.n_rx;
    ch.n_tx = cfg.n_tx;
    ch.params = params;
    ch.cfr.assign(static_cast<std::size_t>(ch.n_symbols) * static_cast<std::size_t>(ch.K) *
                      static_cast<std::size_t>(ch.n_rx) * static_cast<std::size_t>(ch.n_tx),
                  cplx{});

    const int L = params.n_paths();
    const int n_osc = params.n_oscillators;

    std::vector<cplx> phase(static_cast<std::size_t>(cfg.K) * static_cast<std::size_t>(L));
    for (int k = 0; k < cfg.K; ++k)
        for (int l = 0; l < L; ++l)
            phase[static_cast<std::size_t>(k * L + l)] =
                std::polar(1.0, -2.0 * kPi * k * cfg.delta_f * params.pdp[static_cast<std::size_t>(l)].delay);

    const int pairs = cfg.n_rx * cfg.n_tx;
    parallel_for(static_cast<std::size_t>(pairs), [&](std::size_t pair) {
        const int r = static_cast<int>(pair) / cfg.n_tx;
        const int t = static_cast<int>(pair) % cfg.n_tx;
        std::vector<cplx> taps(static_cast<std::size_t>(ch.n_symbols) * static_cast<std::size_t>(L));
        for (int l = 0; l < L; ++l) {
            Rng rng(derive_seed(params.seed, r, t, l));
            const double amp = std::sqrt(params.pdp[static_cast<std::size_t>(l)].power * params.sigma_h2 / n_osc);
            std::vector<double> freq(static_cast<std::size_t>(n_osc));
            std::vector<double> phi(static_cast<std::size_t>(n_osc));
            for (int m = 0; m < n_osc; ++m) {
                const double alpha = 2.0 * kPi * uniform01(rng);
                phi[static_cast<std::size_t>(m)] = 2.0 * kPi * uniform01(rng);
                freq[static_cast<std::size_t>(m)] = 2.0 * kPi * params.doppler_hz * params.symbol_duration * std::cos(alpha);
            }
            for (int n = 0; n < ch.n_symbols; ++n) {
                cplx a{};
                for (int m = 0; m < n_osc; ++m)
                    a += std::polar(amp, freq[static_cast<std::size_t>(m)] * n + phi[static_cast<std::size_t>(m)]);
                taps[static_cast<std::size_t>(n * L + l)] = a;
            }
        }
        for (int n = 0; n < ch.n_symbols; ++n) {
            const cplx* a = taps.data() + static_cast<std::size_t>(n * L);
            for (int k = 0; k < cfg.K; ++k) {
                const cplx* ph = phase.data() + static_cast<std::size_t>(k * L);
                cplx h{};
                for (int l = 0; l < L; ++l)
                    h += a[l] * ph[l];
                ch.cfr[ch.index(n, k, r, t)] = h;
            }
        }
    }, jobs);
    return ch;
}

struct NoiseParams {
    double sigma2 = 1.0;
    std::uint64_t seed = 2;
};

// Received samples, (n, k, r) row-major.
struct ReceivedGrid {
    int n_symbols = 0;
    int K = 0;
    int n_rx = 0;
    std::vector<cplx> y;

    std::size_t index(int n, int k, int r) const
    {
        return (static_cast<std::size_t>(n) * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)) *
                   static_cast<std::size_t>(n_rx) +
               static_cast<std::size_t>(r);
    }
    cplx at(int n, int k, int r) const { return y[index(n, k, r)]; }
    const cplx* re_vector(int n, int k) const { return y.data() + index(n, k, 0); }
};

// y[n,k] = H[n,k] x[n,k] + v[n,k], v ~ CN(0, sigma^2 I). Noise for slot s is
// drawn from a stream seeded by (noise seed, s).
inline ReceivedGrid apply_channel(const ResourceGrid& grid, const ChannelRealization& chan, const NoiseParams& noise)
{
    const GridConfig& cfg = grid.cfg;
    if (chan.n_symbols != cfg.n_symbols() || chan.K != cfg.K || chan.n_rx != cfg.n_rx || chan.n_tx != cfg.n_tx)
        throw ShapeError("channel realization does not match the resource grid");
    if (!(noise.sigma2 > 0.0))
        throw ConfigError("noise variance must be positive");
    ReceivedGrid out;
    out.n_symbols = cfg.n_symbols();
    out.K = cfg.K;
    out.n_rx = cfg.n_rx;
    out.y.assign(static_cast<std::size_t>(out.n_symbols) * static_cast<std::size_t>(out.K) *
                     static_cast<std::size_t>(out.n_rx),
                 cplx{});
    for (int slot = 0; slot < cfg.n_slots_total; ++slot) {
        Rng rng(derive_seed(noise.seed, slot));
        for (int s = 0; s < cfg.n_ofdm; ++s) {
            const int n = slot * cfg.n_ofdm + s;
            for (int k = 0; k < cfg.K; ++k) {
                const cplx* h = chan.re_block(n, k);
                const auto x = grid.symbols_at(n, k);
                for (int r = 0; r < cfg.n_rx; ++r) {
                    cplx acc{};
                    for (int t = 0; t < cfg.n_tx; ++t)
                        acc += h[r * cfg.n_tx + t] * x[static_cast<std::size_t>(t)];
                    out.y[out.index(n, k, r)] = acc + complex_gaussian(rng, noise.sigma2);
                }
            }
        }
    }
    return out;
}

// Separable time-frequency correlation of the generated channel:
// eps_{p,q} = J0(2 pi f_D T p) * sum_l p_l exp(-j 2 pi q df tau_l).
inline cplx correlation_coeff(int p, int q, const ChannelParams& params, double delta_f)
{
    const double time = std::cyl_bessel_j(0.0, 2.0 * kPi * params.doppler_hz * params.symbol_duration * std::abs(p));
    cplx freq{};
    for (const auto& tap : params.pdp)
        freq += tap.power * std::polar(1.0, -2.0 * kPi * q * delta_f * tap.delay);
    return time * freq;
}

} // namespace chanden

#endif
