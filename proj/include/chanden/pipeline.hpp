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

#ifndef CHANDEN_PIPELINE_HPP
#define CHANDEN_PIPELINE_HPP

#include <chanden/adaptation.hpp>
#include <chanden/channel.hpp>
#include <chanden/common.hpp>
#include <chanden/data_aided.hpp>
#include <chanden/estimation.hpp>
#include <chanden/resource_grid.hpp>
#include <chanden/tensor_nn.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace chanden {

enum class Method {
    PerfectCsir,
    ConventionalCe,
    DataAidedCe,
    TransferPretrained,
    MetaPretrained,
    TransferProposed,
    MetaProposed,
    TransferTrueCfr,
    MetaTrueCfr,
};

inline constexpr std::array<std::pair<Method, std::string_view>, 9> kMethodNames{{
    {Method::PerfectCsir, "perfect-csir"},
    {Method::ConventionalCe, "conventional-ce"},
    {Method::DataAidedCe, "data-aided-ce"},
    {Method::TransferPretrained, "transfer-pretrained"},
    {Method::MetaPretrained, "meta-pretrained"},
    {Method::TransferProposed, "transfer-proposed"},
    {Method::MetaProposed, "meta-proposed"},
    {Method::TransferTrueCfr, "transfer-truecfr"},
    {Method::MetaTrueCfr, "meta-truecfr"},
}};

inline std::string to_string(Method m)
{
    for (const auto& [k, v] : kMethodNames)
        if (k == m)
            return std::string(v);
    return "?";
}

inline Method method_from_string(std::string_view s)
{
    for (const auto& [k, v] : kMethodNames)
        if (v == s)
            return k;
    throw ConfigError("unknown method '" + std::string(s) + "'");
}

inline bool uses_transfer_model(Method m)
{
    return m == Method::TransferPretrained || m == Method::TransferProposed || m == Method::TransferTrueCfr;
}
inline bool uses_meta_model(Method m)
{
    return m == Method::MetaPretrained || m == Method::MetaProposed || m == Method::MetaTrueCfr;
}
inline bool uses_denoiser(Method m) { return uses_transfer_model(m) || uses_meta_model(m); }
inline bool adapts_online(Method m)
{
    return m == Method::TransferProposed || m == Method::MetaProposed || m == Method::TransferTrueCfr ||
           m == Method::MetaTrueCfr;
}
inline bool truth_labels(Method m) { return m == Method::TransferTrueCfr || m == Method::MetaTrueCfr; }

// ---------------------------------------------------------------------------

struct WindowSearchConfig {
    std::vector<int> p{1, 2, 4, 7};
    std::vector<int> q{1, 2, 3, 6};
    int gram_draws = 200;
    std::uint64_t gram_seed = 7;
    bool detected_reliability = false;  // false: r = 1 everywhere
};

struct AdaptationConfig {
    int steps = 30;
    double lr = 1e-3;
    int samples = 32;  // online sample cap, 0 = all
};

struct ScenarioConfig {
    std::string name = "scenario";
    GridConfig grid;
    ChannelPreset test{"test", "exp-300ns", 120.0};
    std::vector<std::string> train_presets;  // recorded for provenance
    double carrier_hz = 3.5e9;
    int n_oscillators = 32;
    std::vector<double> snr_db{-6.0, -3.0, 0.0, 6.0, 9.0};
    std::vector<Method> methods{Method::PerfectCsir, Method::ConventionalCe};
    WindowSearchConfig window;
    SubsampleSpec sub;
    AdaptationConfig transfer{30, 1e-3, 32};
    AdaptationConfig meta{10, 1e-4, 32};
    int full_batch_cap = 64;
    int minibatch = 32;
    LossReduction reduction = LossReduction::PerElement;
    int trials = 1;
    std::uint64_t seed = 1;
    int jobs = 0;

    void validate() const
    {
        grid.validate();
        sub.validate();
        if (trials < 1)
            throw ConfigError("trials must be >= 1");
        if (methods.empty())
            throw ConfigError("at least one method is required");
        if (snr_db.empty())
            throw ConfigError("at least one SNR is required");
        if (window.p.empty() || window.q.empty())
            throw ConfigError("window candidate lists must be non-empty");
        if (window.gram_draws < 1)
            throw ConfigError("gram_draws must be >= 1");
        for (const auto* a : {&transfer, &meta})
            if (a->steps < 0 || a->lr < 0.0 || a->samples < 0)
                throw ConfigError("adaptation steps, lr and samples must be non-negative");
        for (Method m : methods)
            if (adapts_online(m) && grid.n_slots_train < 1)
                throw ConfigError("method " + to_string(m) + " needs n_slots_train >= 1");
        pdp_preset(test.pdp);
    }
};

struct PretrainedModels {
    std::optional<ModelState> transfer;
    std::optional<ModelState> meta;
};

// ---------------------------------------------------------------------------
// Metrics

inline constexpr double kNmseFloorDb = -100.0;

inline double nmse_db(std::span<const cplx> est, std::span<const cplx> truth)
{
    if (est.size() != truth.size())
        throw ShapeError("estimate and truth differ in size");
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        num += std::norm(est[i] - truth[i]);
        den += std::norm(truth[i]);
    }
    if (!(den > 0.0))
        throw PreconditionError("NMSE of a zero-energy channel is undefined");
    if (!(num > 0.0))
        return kNmseFloorDb;
    return std::max(kNmseFloorDb, 10.0 * std::log10(num / den));
}

// NMSE over symbols [n_begin, n_end) of two aligned maps.
inline double nmse_db(const CfrEstimateMap& est, const ChannelRealization& truth, int n_begin, int n_end)
{
    if (est.n_symbols != truth.n_symbols || est.K != truth.K || est.n_rx != truth.n_rx || est.n_tx != truth.n_tx)
        throw ShapeError("estimate map does not match the channel realization");
    const std::size_t a = truth.index(n_begin, 0, 0, 0);
    const std::size_t b = truth.index(n_end, 0, 0, 0);
    return nmse_db(std::span<const cplx>(est.est).subspan(a, b - a), std::span<const cplx>(truth.cfr).subspan(a, b - a));
}

struct ErrorRates {
    double fer = 0.0;
    double ser = 0.0;
    std::size_t frames = 0;
    std::size_t symbols = 0;
};

// Frames of `frame_bits` consecutive bits; symbols of `bits_per_symbol`.
inline ErrorRates frame_error_metrics(std::span<const std::uint8_t> detected, std::span<const std::uint8_t> truth,
                                      std::size_t frame_bits, int bits_per_symbol)
{
    if (detected.size() != truth.size())
        throw ShapeError("detected and true bit sequences differ in length");
    if (frame_bits == 0 || bits_per_symbol < 1 || frame_bits % static_cast<std::size_t>(bits_per_symbol) != 0 ||
        truth.size() % frame_bits != 0)
        throw ShapeError("bit count must split into whole frames of whole symbols");
    const auto bps = static_cast<std::size_t>(bits_per_symbol);
    ErrorRates e;
    e.frames = truth.size() / frame_bits;
    e.symbols = truth.size() / bps;
    std::size_t bad_frames = 0;
    std::size_t bad_symbols = 0;
    for (std::size_t f = 0; f < e.frames; ++f) {
        bool frame_bad = false;
        for (std::size_t s = 0; s < frame_bits / bps; ++s) {
            const std::size_t base = f * frame_bits + s * bps;
            bool sym_bad = false;
            for (std::size_t b = 0; b < bps; ++b)
                sym_bad |= detected[base + b] != truth[base + b];
            bad_symbols += sym_bad ? 1 : 0;
            frame_bad |= sym_bad;
        }
        bad_frames += frame_bad ? 1 : 0;
    }
    e.fer = e.frames ? static_cast<double>(bad_frames) / static_cast<double>(e.frames) : 0.0;
    e.ser = e.symbols ? static_cast<double>(bad_symbols) / static_cast<double>(e.symbols) : 0.0;
    return e;
}

struct TrialMetrics {
    Method method = Method::PerfectCsir;
    double snr_db = 0.0;
    int trial = 0;
    double nmse_db = 0.0;
    double fer = 0.0;
    double ser = 0.0;
    std::size_t frames = 0;
    std::size_t symbols = 0;
    WindowSize window;
    std::size_t online_samples = 0;
    double runtime_s = 0.0;
};

struct SummaryRow {
    Method method = Method::PerfectCsir;
    double snr_db = 0.0;
    int trials = 0;
    double nmse_db_mean = 0.0;
    double nmse_db_median = 0.0;
    double fer = 0.0;
    double ser = 0.0;
    std::size_t frames = 0;
    std::size_t symbols = 0;
    WindowSize window;
    double runtime_s = 0.0;
};

struct MetricsReport {
    std::vector<TrialMetrics> trials;
    std::vector<SummaryRow> summary;
    std::map<double, WindowOptimization> windows;  // per SNR
};

inline double median_of(std::vector<double> v)
{
    if (v.empty())
        return std::numeric_limits<double>::quiet_NaN();
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline std::vector<SummaryRow> summarize(const std::vector<TrialMetrics>& rows, const std::vector<Method>& methods,
                                         const std::vector<double>& snrs)
{
    std::vector<SummaryRow> out;
    for (Method m : methods) {
        for (double snr : snrs) {
            SummaryRow s;
            s.method = m;
            s.snr_db = snr;
            std::vector<double> nm;
            for (const auto& r : rows) {
                if (r.method != m || r.snr_db != snr)
                    continue;
                ++s.trials;
                nm.push_back(r.nmse_db);
                s.fer += r.fer * static_cast<double>(r.frames);
                s.ser += r.ser * static_cast<double>(r.symbols);
                s.frames += r.frames;
                s.symbols += r.symbols;
                s.window = r.window;
                s.runtime_s += r.runtime_s;
            }
            if (s.trials == 0)
                continue;
            double acc = 0.0;
            for (double v : nm)
                acc += v;
            s.nmse_db_mean = acc / static_cast<double>(nm.size());
            s.nmse_db_median = median_of(nm);
            s.fer = s.frames ? s.fer / static_cast<double>(s.frames) : 0.0;
            s.ser = s.symbols ? s.ser / static_cast<double>(s.symbols) : 0.0;
            out.push_back(s);
        }
    }
    return out;
}

// Column names are plain identifiers so the files load directly into
// gnuplot, pandas or a spreadsheet. Runtime lives in a separate timing file
// so these two stay byte-reproducible.
inline void write_trials_csv(std::ostream& os, const std::vector<TrialMetrics>& rows)
{
    os << "method,snr_db,trial,nmse_db,fer,ser,frames,symbols,P,Q,online_samples\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%g,%d,%.6f,%.6f,%.6f,%zu,%zu,%d,%d,%zu\n", to_string(r.method).c_str(),
                      r.snr_db, r.trial, r.nmse_db, r.fer, r.ser, r.frames, r.symbols, r.window.p, r.window.q,
                      r.online_samples);
        os << buf;
    }
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows)
{
    os << "method,snr_db,trials,nmse_db_mean,nmse_db_median,fer,ser,frames,symbols,P,Q\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%g,%d,%.6f,%.6f,%.6f,%.6f,%zu,%zu,%d,%d\n", to_string(r.method).c_str(),
                      r.snr_db, r.trials, r.nmse_db_mean, r.nmse_db_median, r.fer, r.ser, r.frames, r.symbols,
                      r.window.p, r.window.q);
        os << buf;
    }
}

inline void write_timing_csv(std::ostream& os, const std::vector<SummaryRow>& rows)
{
    os << "method,snr_db,trials,runtime_s\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%g,%d,%.3f\n", to_string(r.method).c_str(), r.snr_db, r.trials, r.runtime_s);
        os << buf;
    }
}

// ---------------------------------------------------------------------------
// Online procedure

// Fills symbols [n_begin, n_end) of `out` by bilinear interpolation of
// lattice values lat[(ti * freqs + fj) * N_r N_t + r N_t + t].
inline void reconstruct_from_lattice(CfrEstimateMap& out, const SubCfrLayout& layout, const std::vector<cplx>& lat,
                                     int n_begin, int n_end)
{
    const std::size_t nf = layout.freqs.size();
    const std::size_t block = static_cast<std::size_t>(out.n_rx) * static_cast<std::size_t>(out.n_tx);
    for (int r = 0; r < out.n_rx; ++r) {
        for (int t = 0; t < out.n_tx; ++t) {
            const std::size_t e = static_cast<std::size_t>(r) * static_cast<std::size_t>(out.n_tx) + static_cast<std::size_t>(t);
            bilinear_fill(
                layout.times, layout.freqs, n_begin, n_end, out.K,
                [&](int ti, int fj) { return lat[(static_cast<std::size_t>(ti) * nf + static_cast<std::size_t>(fj)) * block + e]; },
                [&](int n, int k, cplx v) { out.at(n, k, r, t) = v; });
        }
    }
}

// Lattice values of a conventional estimate; the starting point that
// denoised or data-aided values overwrite.
inline std::vector<cplx> lattice_from_map(const CfrEstimateMap& m, const SubCfrLayout& layout)
{
    const std::size_t block = static_cast<std::size_t>(m.n_rx) * static_cast<std::size_t>(m.n_tx);
    std::vector<cplx> lat(layout.times.size() * layout.freqs.size() * block);
    std::size_t idx = 0;
    for (int n : layout.times)
        for (int k : layout.freqs) {
            std::copy(m.re_block(n, k), m.re_block(n, k) + block, lat.begin() + static_cast<std::ptrdiff_t>(idx * block));
            ++idx;
        }
    return lat;
}

// Denoises every sub-CFR window of every antenna pair in `layout` and
// rebuilds the full map over [n_begin, n_end). Lattice points outside all
// windows keep the conventional value.
inline CfrEstimateMap denoise_and_reconstruct(const CfrEstimateMap& noisy_map, const SubCfrLayout& layout,
                                              const ModelState& model, int n_begin, int n_end)
{
    const int m_f = layout.m_f;
    const int m_t = layout.m_t;
    std::vector<cplx> lat = lattice_from_map(noisy_map, layout);
    const std::size_t nf = layout.freqs.size();
    const std::size_t block = static_cast<std::size_t>(noisy_map.n_rx) * static_cast<std::size_t>(noisy_map.n_tx);
    Workspace<float> ws;
    for (const WindowOrigin& w : layout.windows) {
        for (int r = 0; r < noisy_map.n_rx; ++r) {
            for (int t = 0; t < noisy_map.n_tx; ++t) {
                const auto noisy = gather_map(layout, w, [&](int n, int k) { return noisy_map.at(n, k, r, t); });
                const double scale = normalization_scale(noisy);
                const auto enc = encode_map(noisy, m_f, m_t, scale);
                const auto den = denoise<float>(model.spec, model.theta, enc, m_f, m_t, ws);
                const auto dec = decode_map(den, m_f, m_t, scale);
                const std::size_t e = static_cast<std::size_t>(r) * static_cast<std::size_t>(noisy_map.n_tx) + static_cast<std::size_t>(t);
                for (int j = 0; j < m_f; ++j)
                    for (int i = 0; i < m_t; ++i)
                        lat[(static_cast<std::size_t>(w.ti + i) * nf + static_cast<std::size_t>(w.fj + j)) * block + e] =
                            dec[static_cast<std::size_t>(j * m_t + i)];
            }
        }
    }
    CfrEstimateMap out = noisy_map;
    out.provenance = Provenance::Denoised;
    reconstruct_from_lattice(out, layout, lat, n_begin, n_end);
    return out;
}

inline SystemParams system_params(const GridConfig& g, double sigma2)
{
    return {g.n_tx, g.n_rx, 1.0, sigma2};
}

inline WindowOptimization choose_window(const ScenarioConfig& cfg, const ChannelParams& params, double sigma2,
                                        const DetectionResult* det)
{
    const GridConfig& g = cfg.grid;
    const ReliabilityProvider rel =
        cfg.window.detected_reliability && det
            ? detected_reliability(*det, g, {std::max(0, g.n_slots_train * g.n_ofdm / 2), g.K / 2})
            : uniform_reliability();
    return optimize_window(cfg.window.p, cfg.window.q, system_params(g, sigma2), channel_eps(params, g.delta_f), rel,
                           monte_carlo_gram(g.n_tx, g.constellation, cfg.window.gram_draws, cfg.window.gram_seed));
}

inline std::uint64_t trial_seed(const ScenarioConfig& cfg, std::size_t snr_index, int trial)
{
    return derive_seed(cfg.seed, 0x747269616CULL, snr_index, static_cast<std::uint64_t>(trial));
}

// Algorithm flow for one (SNR, trial): fine-tuning period detection and
// window choice, online labels, adaptation, then inference-period
// estimation, detection and metrics for every configured method. All
// methods share the same link realization.
inline std::vector<TrialMetrics> run_trial(const ScenarioConfig& cfg, std::size_t snr_index, int trial,
                                           const PretrainedModels& models, int jobs = 1)
{
    using clock = std::chrono::steady_clock;
    const GridConfig& g = cfg.grid;
    const double snr = cfg.snr_db[snr_index];
    const std::uint64_t seed = trial_seed(cfg, snr_index, trial);
    const ChannelParams params = make_channel_params(cfg.test, g, cfg.carrier_hz, derive_seed(seed, 20), cfg.n_oscillators);
    const auto t_link = clock::now();
    const LinkRealization link = simulate_link(g, params, snr, derive_seed(seed, 21), jobs);
    const double link_s = std::chrono::duration<double>(clock::now() - t_link).count();
    const int n_train = g.n_slots_train * g.n_ofdm;
    const int n_total = g.n_symbols();

    // Fine-tuning period: conventional estimate and detection.
    const DetectionResult det_train = detect_grid(link.received, link.interpolated, link.grid, link.sigma2, 0, n_train);
    const WindowOptimization win = choose_window(cfg, params, link.sigma2, &det_train);

    const SubCfrLayout infer_layout = subsample_grid(n_train, n_total, g.K, cfg.sub);
    const Constellation qam(g.constellation);
    const auto bps = static_cast<std::size_t>(qam.bits_per_symbol());
    const std::size_t bits_per_re = static_cast<std::size_t>(g.n_tx) * bps;

    // Inference-period bit range in data_index_set order.
    std::size_t first_data = link.grid.data_index_set.size();
    for (std::size_t i = 0; i < link.grid.data_index_set.size(); ++i)
        if (link.grid.data_index_set[i].n >= n_train) {
            first_data = i;
            break;
        }
    const std::size_t bit_begin = first_data * bits_per_re;
    const std::size_t slots_infer = static_cast<std::size_t>(g.n_slots_total - g.n_slots_train);
    const std::size_t frame_bits = slots_infer ? (link.grid.tx_bits.size() - bit_begin) / slots_infer : 0;

    std::optional<Dataset> online_da;
    std::optional<Dataset> online_truth;
    std::optional<CfrEstimateMap> conventional_det_map;

    std::vector<TrialMetrics> out;
    for (Method m : cfg.methods) {
        const auto t0 = clock::now();
        TrialMetrics tm;
        tm.method = m;
        tm.snr_db = snr;
        tm.trial = trial;
        tm.window = win.best;

        CfrEstimateMap est;
        switch (m) {
        case Method::PerfectCsir:
            est = CfrEstimateMap::from_truth(link.channel);
            break;
        case Method::ConventionalCe:
            est = link.interpolated;
            break;
        case Method::DataAidedCe: {
            const DetectionResult det0 = detect_grid(link.received, link.interpolated, link.grid, link.sigma2, n_train, n_total);
            const LatticeEstimates da =
                data_aided_lattice(link.received, det0, g, infer_layout, win.best, n_train, n_total, jobs);
            std::vector<cplx> lat = lattice_from_map(link.interpolated, infer_layout);
            const std::size_t block = static_cast<std::size_t>(g.n_rx) * static_cast<std::size_t>(g.n_tx);
            for (std::size_t i = 0; i < da.h.size(); ++i) {
                if (!da.valid[i])
                    continue;
                for (int r = 0; r < g.n_rx; ++r)
                    for (int t = 0; t < g.n_tx; ++t)
                        lat[i * block + static_cast<std::size_t>(r * g.n_tx + t)] = da.h[i](r, t);
            }
            est = link.interpolated;
            est.provenance = Provenance::DataAided;
            reconstruct_from_lattice(est, infer_layout, lat, n_train, n_total);
            break;
        }
        default: {
            const std::optional<ModelState>& base = uses_transfer_model(m) ? models.transfer : models.meta;
            if (!base)
                throw PreconditionError("method " + to_string(m) + " needs a pretrained " +
                                        (uses_transfer_model(m) ? "transfer" : "meta") + " checkpoint");
            ModelState model = *base;
            if (adapts_online(m)) {
                const AdaptationConfig& ac = uses_transfer_model(m) ? cfg.transfer : cfg.meta;
                std::optional<Dataset>& cache = truth_labels(m) ? online_truth : online_da;
                if (!cache) {
                    OnlineDatasetConfig oc;
                    oc.sub = cfg.sub;
                    oc.window = win.best;
                    oc.truth_targets = truth_labels(m);
                    oc.sample_cap = 0;
                    oc.seed = derive_seed(seed, 30);
                    oc.jobs = jobs;
                    cache = build_online_dataset(link, det_train, n_train, oc);
                }
                const auto keep = capped_indices(cache->size(), ac.samples, derive_seed(seed, 31));
                const Dataset online = cache->subset(keep, DatasetKind::Online);
                tm.online_samples = online.size();
                FineTuneConfig fc;
                fc.steps = ac.steps;
                fc.lr = ac.lr;
                fc.full_batch_cap = cfg.full_batch_cap;
                fc.minibatch = cfg.minibatch;
                fc.reduction = cfg.reduction;
                fc.seed = derive_seed(seed, 32);
                fc.jobs = jobs;
                model = fine_tune(model, online, fc).model;
            }
            est = denoise_and_reconstruct(link.interpolated, infer_layout, model, n_train, n_total);
            break;
        }
        }

        tm.nmse_db = nmse_db(est, link.channel, n_train, n_total);
        const DetectionResult det = detect_grid(link.received, est, link.grid, link.sigma2, n_train, n_total);
        if (frame_bits > 0) {
            const auto span_det = std::span<const std::uint8_t>(det.hard_bits).subspan(bit_begin);
            const auto span_tx = std::span<const std::uint8_t>(link.grid.tx_bits).subspan(bit_begin);
            const ErrorRates er = frame_error_metrics(span_det, span_tx, frame_bits, qam.bits_per_symbol());
            tm.fer = er.fer;
            tm.ser = er.ser;
            tm.frames = er.frames;
            tm.symbols = er.symbols;
        }
        tm.runtime_s = std::chrono::duration<double>(clock::now() - t0).count() + link_s / static_cast<double>(cfg.methods.size());
        out.push_back(tm);
    }
    return out;
}

// Runs every (SNR, trial) unit; units run in parallel and are reported in
// (SNR, trial, method) order regardless of the worker count.
inline MetricsReport run_online_procedure(const ScenarioConfig& cfg, const PretrainedModels& models)
{
    cfg.validate();
    for (Method m : cfg.methods) {
        if (uses_transfer_model(m) && !models.transfer)
            throw PreconditionError("method " + to_string(m) + " needs a pretrained transfer checkpoint");
        if (uses_meta_model(m) && !models.meta)
            throw PreconditionError("method " + to_string(m) + " needs a pretrained meta checkpoint");
    }
    const std::size_t n_snr = cfg.snr_db.size();
    const std::size_t units = n_snr * static_cast<std::size_t>(cfg.trials);
    std::vector<std::vector<TrialMetrics>> per(units);
    parallel_for(units, [&](std::size_t u) {
        per[u] = run_trial(cfg, u / static_cast<std::size_t>(cfg.trials), static_cast<int>(u % static_cast<std::size_t>(cfg.trials)), models, 1);
    }, cfg.jobs);

    MetricsReport rep;
    for (auto& v : per)
        for (auto& r : v)
            rep.trials.push_back(r);
    rep.summary = summarize(rep.trials, cfg.methods, cfg.snr_db);
    for (std::size_t s = 0; s < n_snr; ++s) {
        const ChannelParams params = make_channel_params(cfg.test, cfg.grid, cfg.carrier_hz, 0, cfg.n_oscillators);
        rep.windows[cfg.snr_db[s]] = choose_window(cfg, params, noise_variance_for_snr(cfg.snr_db[s], cfg.grid.n_tx), nullptr);
    }
    return rep;
}

} // namespace chanden

#endif
