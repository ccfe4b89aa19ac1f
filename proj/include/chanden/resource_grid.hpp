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

#ifndef CHANDEN_RESOURCE_GRID_HPP
#define CHANDEN_RESOURCE_GRID_HPP

#include <chanden/common.hpp>

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace chanden {

// ---------------------------------------------------------------------------
// Square QAM with per-axis Gray mapping.
//
// A symbol index holds log2(M) bits, most significant bit first. The first
// half of the bits selects the in-phase level, the second half the
// quadrature level. Per axis the Gray code g maps to level l = gray^-1(g)
// with amplitude (sqrt(M)-1) - 2l, so for 4-QAM bit 0 -> +1 and bit 1 -> -1:
//
//   00 -> ( 1 + j)/sqrt2   01 -> ( 1 - j)/sqrt2
//   10 -> (-1 + j)/sqrt2   11 -> (-1 - j)/sqrt2
//
// Points are scaled to unit average energy.
class Constellation {
public:
    explicit Constellation(int order) : order_(order)
    {
        if (order != 4 && order != 16 && order != 64)
            throw ConfigError("unsupported modulation order " + std::to_string(order) + " (expected 4, 16 or 64)");
        bits_ = 0;
        while ((1 << bits_) < order)
            ++bits_;
        const int half = bits_ / 2;
        const int side = 1 << half;
        const double scale = std::sqrt(2.0 * (order - 1) / 3.0);
        points_.resize(static_cast<std::size_t>(order));
        for (int idx = 0; idx < order; ++idx) {
            const int gi = idx >> half;
            const int gq = idx & (side - 1);
            const double ai = (side - 1) - 2.0 * gray_to_binary(gi);
            const double aq = (side - 1) - 2.0 * gray_to_binary(gq);
            points_[static_cast<std::size_t>(idx)] = cplx(ai, aq) / scale;
        }
    }

    int order() const { return order_; }
    int bits_per_symbol() const { return bits_; }
    const std::vector<cplx>& points() const { return points_; }
    cplx point(int idx) const { return points_[static_cast<std::size_t>(idx)]; }

    // Nearest point in Euclidean distance; ties go to the lowest index.
    int nearest(cplx z) const
    {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (int i = 0; i < order_; ++i) {
            const double d = std::norm(z - points_[static_cast<std::size_t>(i)]);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

    int index_from_bits(std::span<const std::uint8_t> bits) const
    {
        int idx = 0;
        for (int b = 0; b < bits_; ++b)
            idx = (idx << 1) | (bits[static_cast<std::size_t>(b)] & 1);
        return idx;
    }

    void bits_from_index(int idx, std::span<std::uint8_t> out) const
    {
        for (int b = 0; b < bits_; ++b)
            out[static_cast<std::size_t>(b)] = static_cast<std::uint8_t>((idx >> (bits_ - 1 - b)) & 1);
    }

private:
    static int gray_to_binary(int g)
    {
        int b = g;
        while (g >>= 1)
            b ^= g;
        return b;
    }

    int order_;
    int bits_;
    std::vector<cplx> points_;
};

inline std::vector<cplx> qam_modulate(std::span<const std::uint8_t> bits, int order)
{
    const Constellation c(order);
    const auto bps = static_cast<std::size_t>(c.bits_per_symbol());
    if (bits.size() % bps != 0)
        throw ShapeError("bit count " + std::to_string(bits.size()) + " is not a multiple of " + std::to_string(bps));
    std::vector<cplx> out(bits.size() / bps);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = c.point(c.index_from_bits(bits.subspan(i * bps, bps)));
    return out;
}

struct HardDecisions {
    std::vector<std::uint8_t> bits;
    std::vector<cplx> symbols;
    std::vector<int> indices;
};

inline HardDecisions qam_demodulate_hard(std::span<const cplx> estimates, int order)
{
    const Constellation c(order);
    const auto bps = static_cast<std::size_t>(c.bits_per_symbol());
    HardDecisions out;
    out.bits.resize(estimates.size() * bps);
    out.symbols.resize(estimates.size());
    out.indices.resize(estimates.size());
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        const int idx = c.nearest(estimates[i]);
        out.indices[i] = idx;
        out.symbols[i] = c.point(idx);
        c.bits_from_index(idx, std::span<std::uint8_t>(out.bits).subspan(i * bps, bps));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Grid layout

struct GridConfig {
    int K = 512;               // subcarriers
    int n_ofdm = 14;           // OFDM symbols per slot
    int n_slots_total = 8;
    int n_slots_train = 4;
    int n_tx = 2;
    int n_rx = 16;
    double delta_f = 15e3;     // Hz
    int constellation = 4;
    std::vector<int> dmrs_symbol_indices{2, 11};
    int dmrs_comb_stride = 2;

    int n_symbols() const { return n_slots_total * n_ofdm; }
    std::size_t n_re() const { return static_cast<std::size_t>(n_symbols()) * static_cast<std::size_t>(K); }

    // Slot duration scales with numerology: 1 ms at 15 kHz.
    double symbol_duration() const { return (1e-3 * 15e3 / delta_f) / n_ofdm; }

    void validate() const
    {
        if (K < 1)
            throw ConfigError("K must be >= 1");
        if (n_ofdm < 1)
            throw ConfigError("n_ofdm must be >= 1");
        if (n_slots_total < 1)
            throw ConfigError("n_slots_total must be >= 1");
        if (n_slots_train < 0 || n_slots_train > n_slots_total - n_slots_train)
            throw ConfigError("n_slots_train must satisfy 0 <= N_train <= N_total - N_train");
        if (n_tx < 1 || n_rx < 1)
            throw ConfigError("antenna counts must be >= 1");
        if (delta_f <= 0)
            throw ConfigError("delta_f must be positive");
        Constellation check(constellation);
        (void)check;
        if (dmrs_symbol_indices.empty())
            throw ConfigError("at least one DM-RS symbol is required");
        for (int s : dmrs_symbol_indices)
            if (s < 0 || s >= n_ofdm)
                throw ConfigError("DM-RS symbol index " + std::to_string(s) + " outside [0, n_ofdm)");
        if (dmrs_comb_stride < 1 || K % dmrs_comb_stride != 0)
            throw ConfigError("DM-RS comb stride must divide K");
        if (n_tx > dmrs_comb_stride)
            throw ConfigError("DM-RS comb stride must provide one offset per transmit port");
    }
};

struct RE {
    int n = 0;
    int k = 0;
    friend bool operator==(const RE&, const RE&) = default;
};

// Pilot RE with no active port uses kNoPort.
inline constexpr int kNoPort = -1;

// Known DM-RS value for (slot, symbol, subcarrier): unit-modulus QPSK drawn
// from a hash so transmitter and receiver agree without sharing state.
inline cplx dmrs_value(int slot, int symbol, int k)
{
    const std::uint64_t h = derive_seed(0xD3A5ULL, slot, symbol, k);
    const double s = 1.0 / std::sqrt(2.0);
    return {(h & 1) ? -s : s, (h & 2) ? -s : s};
}

// Symbols are stored per RE as N_t consecutive entries, REs in (n, k) order.
struct ResourceGrid {
    GridConfig cfg;
    std::vector<RE> pilot_index_set;
    std::vector<RE> data_index_set;
    std::vector<std::uint8_t> is_pilot;     // per RE
    std::vector<int> pilot_port;            // per RE, kNoPort on data REs
    std::vector<cplx> tx_symbols;           // n_re * N_t
    std::vector<std::uint8_t> tx_bits;      // data REs * N_t * bits_per_symbol, data_index_set order
    std::vector<int> data_slot;             // per RE: position in data_index_set, -1 on pilots

    std::size_t re_index(int n, int k) const
    {
        return static_cast<std::size_t>(n) * static_cast<std::size_t>(cfg.K) + static_cast<std::size_t>(k);
    }
    bool pilot(int n, int k) const { return is_pilot[re_index(n, k)] != 0; }
    cplx symbol(int n, int k, int t) const
    {
        return tx_symbols[re_index(n, k) * static_cast<std::size_t>(cfg.n_tx) + static_cast<std::size_t>(t)];
    }
    std::span<const cplx> symbols_at(int n, int k) const
    {
        return std::span<const cplx>(tx_symbols).subspan(re_index(n, k) * static_cast<std::size_t>(cfg.n_tx),
                                                         static_cast<std::size_t>(cfg.n_tx));
    }
};

inline bool is_dmrs_symbol(const GridConfig& cfg, int n)
{
    const int s = n % cfg.n_ofdm;
    return std::find(cfg.dmrs_symbol_indices.begin(), cfg.dmrs_symbol_indices.end(), s) != cfg.dmrs_symbol_indices.end();
}

// Comb-type DM-RS: on a DM-RS symbol port t owns subcarriers k = t (mod stride)
// and transmits nothing on the other ports' subcarriers. Subcarriers whose
// comb offset has no port carry data.
inline ResourceGrid build_grid(const GridConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    const Constellation qam(cfg.constellation);
    const auto bps = static_cast<std::size_t>(qam.bits_per_symbol());
    const auto nt = static_cast<std::size_t>(cfg.n_tx);

    ResourceGrid g;
    g.cfg = cfg;
    const std::size_t n_re = cfg.n_re();
    g.is_pilot.assign(n_re, 0);
    g.pilot_port.assign(n_re, kNoPort);
    g.data_slot.assign(n_re, -1);
    g.tx_symbols.assign(n_re * nt, cplx{});

    Rng rng(derive_seed(seed, 0x67726964ULL));
    std::uniform_int_distribution<int> bit(0, 1);

    for (int n = 0; n < cfg.n_symbols(); ++n) {
        const bool dmrs = is_dmrs_symbol(cfg, n);
        for (int k = 0; k < cfg.K; ++k) {
            const std::size_t re = g.re_index(n, k);
            const int offset = k % cfg.dmrs_comb_stride;
            if (dmrs && offset < cfg.n_tx) {
                g.is_pilot[re] = 1;
                g.pilot_port[re] = offset;
                g.pilot_index_set.push_back({n, k});
                g.tx_symbols[re * nt + static_cast<std::size_t>(offset)] = dmrs_value(n / cfg.n_ofdm, n % cfg.n_ofdm, k);
                continue;
            }
            g.data_slot[re] = static_cast<int>(g.data_index_set.size());
            g.data_index_set.push_back({n, k});
            for (std::size_t t = 0; t < nt; ++t) {
                std::uint8_t b[6];
                for (std::size_t i = 0; i < bps; ++i)
                    b[i] = static_cast<std::uint8_t>(bit(rng));
                g.tx_bits.insert(g.tx_bits.end(), b, b + bps);
                g.tx_symbols[re * nt + t] = qam.point(qam.index_from_bits(std::span<const std::uint8_t>(b, bps)));
            }
        }
    }
    return g;
}

} // namespace chanden

#endif
