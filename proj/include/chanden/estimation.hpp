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

#ifndef CHANDEN_ESTIMATION_HPP
#define CHANDEN_ESTIMATION_HPP

#include <chanden/channel.hpp>
#include <chanden/common.hpp>
#include <chanden/resource_grid.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace chanden {

using CMatrix = Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic>;
using CVector = Eigen::Matrix<cplx, Eigen::Dynamic, 1>;
using RowMajorCMap = Eigen::Map<const Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

enum class Provenance { PilotLs, Interpolated, DataAided, Denoised, Truth };

inline const char* to_string(Provenance p)
{
    switch (p) {
    case Provenance::PilotLs: return "pilot-ls";
    case Provenance::Interpolated: return "interpolated";
    case Provenance::DataAided: return "data-aided";
    case Provenance::Denoised: return "denoised";
    case Provenance::Truth: return "truth";
    }
    return "?";
}

// Complex estimate tensor laid out exactly like ChannelRealization::cfr.
// `known` flags (n, k, t) columns that hold a value; a full map has all set.
struct CfrEstimateMap {
    int n_symbols = 0;
    int K = 0;
    int n_rx = 0;
    int n_tx = 0;
    std::vector<cplx> est;
    std::vector<std::uint8_t> known;
    Provenance provenance = Provenance::Interpolated;

    CfrEstimateMap() = default;
    CfrEstimateMap(int n_sym, int k, int nr, int nt, Provenance prov)
        : n_symbols(n_sym), K(k), n_rx(nr), n_tx(nt),
          est(static_cast<std::size_t>(n_sym) * static_cast<std::size_t>(k) * static_cast<std::size_t>(nr) *
                  static_cast<std::size_t>(nt),
              cplx{}),
          known(static_cast<std::size_t>(n_sym) * static_cast<std::size_t>(k) * static_cast<std::size_t>(nt), 0),
          provenance(prov)
    {}

    std::size_t index(int n, int k, int r, int t) const
    {
        return ((static_cast<std::size_t>(n) * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)) *
                    static_cast<std::size_t>(n_rx) +
                static_cast<std::size_t>(r)) *
                   static_cast<std::size_t>(n_tx) +
               static_cast<std::size_t>(t);
    }
    std::size_t known_index(int n, int k, int t) const
    {
        return (static_cast<std::size_t>(n) * static_cast<std::size_t>(K) + static_cast<std::size_t>(k)) *
                   static_cast<std::size_t>(n_tx) +
               static_cast<std::size_t>(t);
    }
    cplx at(int n, int k, int r, int t) const { return est[index(n, k, r, t)]; }
    cplx& at(int n, int k, int r, int t) { return est[index(n, k, r, t)]; }
    bool is_known(int n, int k, int t) const { return known[known_index(n, k, t)] != 0; }
    const cplx* re_block(int n, int k) const { return est.data() + index(n, k, 0, 0); }
    cplx* re_block(int n, int k) { return est.data() + index(n, k, 0, 0); }
    void mark_all_known() { std::fill(known.begin(), known.end(), std::uint8_t{1}); }

    static CfrEstimateMap from_truth(const ChannelRealization& ch)
    {
        CfrEstimateMap m(ch.n_symbols, ch.K, ch.n_rx, ch.n_tx, Provenance::Truth);
        m.est = ch.cfr;
        m.mark_all_known();
        return m;
    }
};

// LS at pilot REs: the comb layout leaves exactly one active port per pilot
// RE, so h_{:,t} = y conj(x_p) / |x_p|^2 for that port.
inline CfrEstimateMap ls_pilot_estimate(const ReceivedGrid& y, const ResourceGrid& grid)
{
    const GridConfig& cfg = grid.cfg;
    if (y.n_symbols != cfg.n_symbols() || y.K != cfg.K || y.n_rx != cfg.n_rx)
        throw ShapeError("received grid does not match the resource grid");
    CfrEstimateMap m(cfg.n_symbols(), cfg.K, cfg.n_rx, cfg.n_tx, Provenance::PilotLs);
    for (const RE& re : grid.pilot_index_set) {
        const int t = grid.pilot_port[grid.re_index(re.n, re.k)];
        const cplx xp = grid.symbol(re.n, re.k, t);
        const double e = std::norm(xp);
        if (e == 0.0)
            throw PreconditionError("zero pilot symbol at (" + std::to_string(re.n) + "," + std::to_string(re.k) + ")");
        for (int r = 0; r < cfg.n_rx; ++r)
            m.at(re.n, re.k, r, t) = y.at(re.n, re.k, r) * std::conj(xp) / e;
        m.known[m.known_index(re.n, re.k, t)] = 1;
    }
    return m;
}

// Linear interpolation weights from a sorted sample lattice onto every
// integer position in [0, extent). Positions outside the lattice hold the
// nearest edge value.
struct LinearWeights {
    std::vector<int> lo;
    std::vector<int> hi;
    std::vector<double> w_hi;

    LinearWeights(std::span<const int> lattice, int begin, int end)
    {
        const int count = end - begin;
        lo.resize(static_cast<std::size_t>(count));
        hi.resize(static_cast<std::size_t>(count));
        w_hi.resize(static_cast<std::size_t>(count));
        std::size_t j = 0;
        for (int x = begin; x < end; ++x) {
            const auto i = static_cast<std::size_t>(x - begin);
            if (lattice.size() == 1 || x <= lattice.front()) {
                lo[i] = hi[i] = 0;
                w_hi[i] = 0.0;
                continue;
            }
            if (x >= lattice.back()) {
                lo[i] = hi[i] = static_cast<int>(lattice.size() - 1);
                w_hi[i] = 0.0;
                continue;
            }
            while (j + 1 < lattice.size() && lattice[j + 1] <= x)
                ++j;
            lo[i] = static_cast<int>(j);
            hi[i] = static_cast<int>(j + 1);
            w_hi[i] = static_cast<double>(x - lattice[j]) / static_cast<double>(lattice[j + 1] - lattice[j]);
        }
    }
};

// Bilinear interpolation of a separable lattice (times x freqs) onto every
// RE with n in [n_begin, n_end) and k in [0, K). get(ti, fj) reads lattice
// values, set(n, k, value) writes the result. Exact on fields affine in
// (n, k) inside the lattice hull.
template <typename Get, typename Set>
void bilinear_fill(std::span<const int> times, std::span<const int> freqs, int n_begin, int n_end, int K, Get&& get,
                   Set&& set)
{
    if (times.empty() || freqs.empty())
        throw PreconditionError("empty interpolation lattice");
    const LinearWeights wf(freqs, 0, K);
    const LinearWeights wt(times, n_begin, n_end);
    std::vector<cplx> rows(times.size() * static_cast<std::size_t>(K));
    for (std::size_t ti = 0; ti < times.size(); ++ti) {
        for (int k = 0; k < K; ++k) {
            const auto kk = static_cast<std::size_t>(k);
            const cplx a = get(static_cast<int>(ti), wf.lo[kk]);
            const cplx b = get(static_cast<int>(ti), wf.hi[kk]);
            rows[ti * static_cast<std::size_t>(K) + kk] = a + wf.w_hi[kk] * (b - a);
        }
    }
    for (int n = n_begin; n < n_end; ++n) {
        const auto i = static_cast<std::size_t>(n - n_begin);
        const cplx* a = rows.data() + static_cast<std::size_t>(wt.lo[i]) * static_cast<std::size_t>(K);
        const cplx* b = rows.data() + static_cast<std::size_t>(wt.hi[i]) * static_cast<std::size_t>(K);
        const double w = wt.w_hi[i];
        for (int k = 0; k < K; ++k)
            set(n, k, a[k] + w * (b[k] - a[k]));
    }
}

enum class InterpolationScope { PerSlot, WholeGrid };

// 2D interpolation of a pilot-only map to the full grid, one antenna pair at
// a time on the lattice of that pair's transmit port.
inline CfrEstimateMap interpolate_2d(const CfrEstimateMap& pilots, const GridConfig& cfg,
                                     InterpolationScope scope = InterpolationScope::PerSlot)
{
    if (pilots.n_symbols != cfg.n_symbols() || pilots.K != cfg.K || pilots.n_rx != cfg.n_rx || pilots.n_tx != cfg.n_tx)
        throw ShapeError("pilot map does not match grid configuration");
    CfrEstimateMap out(pilots.n_symbols, pilots.K, pilots.n_rx, pilots.n_tx, Provenance::Interpolated);
    const int span_len = scope == InterpolationScope::PerSlot ? cfg.n_ofdm : cfg.n_symbols();
    for (int n_begin = 0; n_begin < cfg.n_symbols(); n_begin += span_len) {
        const int n_end = n_begin + span_len;
        for (int t = 0; t < cfg.n_tx; ++t) {
            std::vector<int> times;
            std::vector<int> freqs;
            for (int n = n_begin; n < n_end; ++n) {
                bool any = false;
                for (int k = 0; k < cfg.K; ++k)
                    if (pilots.is_known(n, k, t)) {
                        any = true;
                        if (times.empty())
                            freqs.push_back(k);
                    }
                if (any)
                    times.push_back(n);
            }
            if (times.empty() || freqs.empty())
                throw PreconditionError("empty pilot set for port " + std::to_string(t));
            for (int n : times)
                for (int k : freqs)
                    if (!pilots.is_known(n, k, t))
                        throw PreconditionError("pilot lattice is not separable in time and frequency");
            for (int r = 0; r < cfg.n_rx; ++r) {
                bilinear_fill(
                    times, freqs, n_begin, n_end, cfg.K,
                    [&](int ti, int fj) {
                        return pilots.at(times[static_cast<std::size_t>(ti)], freqs[static_cast<std::size_t>(fj)], r, t);
                    },
                    [&](int n, int k, cplx v) { out.at(n, k, r, t) = v; });
            }
        }
    }
    out.mark_all_known();
    return out;
}

// ---------------------------------------------------------------------------
// LMMSE detection

struct LmmseOutput {
    std::vector<cplx> soft;      // x~ per stream
    std::vector<int> hard;       // constellation index per stream
    std::vector<double> app;     // per-stream posterior of the hard decision
    double vector_app = 1.0;     // product of per-stream APPs
};

inline constexpr double kAppFloor = 1e-3;

// x~ = (H^H H + s2 I)^-1 H^H y. Stream i behaves as x~_i = mu_i x_i + w_i with
// mu_i = [(H^H H + s2 I)^-1 H^H H]_ii and var(w_i) = mu_i (1 - mu_i); the hard
// decision is the point nearest x~_i / mu_i and its APP is the softmax of
// -|x~_i - mu_i s|^2 / var(w_i) over the constellation, clamped to [1e-3, 1].
inline LmmseOutput lmmse_detect(std::span<const cplx> y, const CMatrix& H, double sigma2, const Constellation& qam)
{
    if (!(sigma2 > 0.0))
        throw PreconditionError("LMMSE detection requires sigma^2 > 0");
    const Eigen::Index nt = H.cols();
    if (static_cast<Eigen::Index>(y.size()) != H.rows())
        throw ShapeError("received vector does not match channel rows");
    const Eigen::Map<const CVector> yv(y.data(), static_cast<Eigen::Index>(y.size()));
    const CMatrix gram = H.adjoint() * H;
    CMatrix reg = gram;
    reg.diagonal().array() += sigma2;
    const Eigen::LDLT<CMatrix> solver(reg);
    const CVector x = solver.solve(H.adjoint() * yv);
    const CMatrix bias = solver.solve(gram);

    LmmseOutput out;
    out.soft.resize(static_cast<std::size_t>(nt));
    out.hard.resize(static_cast<std::size_t>(nt));
    out.app.resize(static_cast<std::size_t>(nt));
    std::vector<double> logp(static_cast<std::size_t>(qam.order()));
    for (Eigen::Index i = 0; i < nt; ++i) {
        const auto si = static_cast<std::size_t>(i);
        const double mu = std::clamp(bias(i, i).real(), 1e-12, 1.0);
        const double var = std::max(mu * (1.0 - mu), 1e-300);
        out.soft[si] = x(i);
        const int hard = qam.nearest(x(i) / mu);
        out.hard[si] = hard;
        double peak = -std::numeric_limits<double>::infinity();
        for (int s = 0; s < qam.order(); ++s) {
            logp[static_cast<std::size_t>(s)] = -std::norm(x(i) - mu * qam.point(s)) / var;
            peak = std::max(peak, logp[static_cast<std::size_t>(s)]);
        }
        double z = 0.0;
        for (double lp : logp)
            z += std::exp(lp - peak);
        const double r = std::exp(logp[static_cast<std::size_t>(hard)] - peak) / z;
        out.app[si] = std::clamp(r, kAppFloor, 1.0);
        out.vector_app *= out.app[si];
    }
    out.vector_app = std::clamp(out.vector_app, kAppFloor, 1.0);
    return out;
}

// Per-RE detection state over a whole grid. Pilot REs carry the known pilot
// vector with reliability 1 so the arrays double as the virtual-pilot grid.
struct DetectionResult {
    int n_tx = 0;
    std::vector<cplx> hard_symbols;          // n_re * N_t
    std::vector<cplx> soft_estimates;        // n_re * N_t (zero on pilots)
    std::vector<double> app;                 // n_re, vector APP
    std::vector<std::uint8_t> detected;      // n_re, 1 where a data RE was detected
    std::vector<std::uint8_t> hard_bits;     // data_index_set order, same layout as ResourceGrid::tx_bits

    std::span<const cplx> symbols_at(std::size_t re) const
    {
        return std::span<const cplx>(hard_symbols).subspan(re * static_cast<std::size_t>(n_tx),
                                                           static_cast<std::size_t>(n_tx));
    }
};

// Runs LMMSE over the data REs with n in [n_begin, n_end) using the estimate
// map. REs outside the range keep transmitted pilots only.
inline DetectionResult detect_grid(const ReceivedGrid& y, const CfrEstimateMap& est, const ResourceGrid& grid,
                                   double sigma2, int n_begin, int n_end)
{
    const GridConfig& cfg = grid.cfg;
    if (est.n_symbols != cfg.n_symbols() || est.K != cfg.K || est.n_rx != cfg.n_rx || est.n_tx != cfg.n_tx)
        throw ShapeError("estimate map does not match grid");
    const Constellation qam(cfg.constellation);
    const auto nt = static_cast<std::size_t>(cfg.n_tx);
    const auto bps = static_cast<std::size_t>(qam.bits_per_symbol());
    DetectionResult d;
    d.n_tx = cfg.n_tx;
    d.hard_symbols.assign(cfg.n_re() * nt, cplx{});
    d.soft_estimates.assign(cfg.n_re() * nt, cplx{});
    d.app.assign(cfg.n_re(), 1.0);
    d.detected.assign(cfg.n_re(), 0);
    d.hard_bits.assign(grid.tx_bits.size(), 0);
    for (const RE& re : grid.pilot_index_set) {
        const std::size_t idx = grid.re_index(re.n, re.k);
        for (std::size_t t = 0; t < nt; ++t)
            d.hard_symbols[idx * nt + t] = grid.tx_symbols[idx * nt + t];
    }
    CMatrix H(cfg.n_rx, cfg.n_tx);
    for (int n = n_begin; n < n_end; ++n) {
        for (int k = 0; k < cfg.K; ++k) {
            const std::size_t idx = grid.re_index(n, k);
            if (grid.is_pilot[idx])
                continue;
            H = RowMajorCMap(est.re_block(n, k), cfg.n_rx, cfg.n_tx);
            const auto out = lmmse_detect(std::span<const cplx>(y.re_vector(n, k), static_cast<std::size_t>(cfg.n_rx)),
                                          H, sigma2, qam);
            const auto slot = static_cast<std::size_t>(grid.data_slot[idx]);
            for (std::size_t t = 0; t < nt; ++t) {
                d.hard_symbols[idx * nt + t] = qam.point(out.hard[t]);
                d.soft_estimates[idx * nt + t] = out.soft[t];
                qam.bits_from_index(out.hard[t],
                                    std::span<std::uint8_t>(d.hard_bits).subspan((slot * nt + t) * bps, bps));
            }
            d.app[idx] = out.vector_app;
            d.detected[idx] = 1;
        }
    }
    return d;
}

} // namespace chanden

#endif
