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

#ifndef CHANDEN_ADAPTATION_HPP
#define CHANDEN_ADAPTATION_HPP

#include <chanden/channel.hpp>
#include <chanden/common.hpp>
#include <chanden/data_aided.hpp>
#include <chanden/estimation.hpp>
#include <chanden/resource_grid.hpp>
#include <chanden/tensor_nn.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace chanden {

// ---------------------------------------------------------------------------
// Channel presets: a named power delay profile plus a terminal velocity.

struct ChannelPreset {
    std::string name;
    std::string pdp = "exp-300ns";
    double velocity_kmh = 120.0;
};

inline ChannelParams make_channel_params(const ChannelPreset& preset, const GridConfig& cfg, double carrier_hz,
                                         std::uint64_t seed, int n_oscillators = 32)
{
    ChannelParams p;
    p.pdp = pdp_preset(preset.pdp);
    p.doppler_hz = doppler_from_velocity(preset.velocity_kmh, carrier_hz);
    p.symbol_duration = cfg.symbol_duration();
    p.sigma_h2 = 1.0;
    p.seed = seed;
    p.n_oscillators = n_oscillators;
    return p;
}

// One simulated link: transmitted grid, channel, received samples and the
// conventional pilot-LS + interpolation estimate.
struct LinkRealization {
    ResourceGrid grid;
    ChannelRealization channel;
    ReceivedGrid received;
    double sigma2 = 1.0;
    double snr_db = 0.0;
    CfrEstimateMap pilot_ls;
    CfrEstimateMap interpolated;
};

inline LinkRealization simulate_link(const GridConfig& cfg, const ChannelParams& params, double snr_db,
                                     std::uint64_t seed, int jobs = 1)
{
    LinkRealization link;
    link.grid = build_grid(cfg, derive_seed(seed, 1));
    ChannelParams p = params;
    p.seed = derive_seed(seed, 2);
    link.channel = generate_channel(cfg, p, jobs);
    link.snr_db = snr_db;
    link.sigma2 = noise_variance_for_snr(snr_db, cfg.n_tx);
    link.received = apply_channel(link.grid, link.channel, {link.sigma2, derive_seed(seed, 3)});
    link.pilot_ls = ls_pilot_estimate(link.received, link.grid);
    link.interpolated = interpolate_2d(link.pilot_ls, cfg);
    return link;
}

// ---------------------------------------------------------------------------
// Sub-CFR lattice
//
// Lattice points are n_i = n_begin + i s_t and k_j = j s_f. A sub-CFR map
// covers M_t consecutive lattice times and M_f consecutive lattice
// frequencies; maps tile the lattice without overlap.

struct SubsampleSpec {
    int s_t = 1;
    int s_f = 8;
    int m_t = 8;
    int m_f = 58;

    void validate() const
    {
        if (s_t < 1 || s_f < 1)
            throw ConfigError("sub-sampling strides must be >= 1");
        if (m_t < 1 || m_f < 1)
            throw ConfigError("sub-CFR map dimensions must be >= 1");
    }
};

struct WindowOrigin {
    int ti = 0;  // first lattice time index
    int fj = 0;  // first lattice frequency index
};

struct SubCfrLayout {
    std::vector<int> times;
    std::vector<int> freqs;
    std::vector<WindowOrigin> windows;
    int m_t = 0;
    int m_f = 0;

    std::vector<RE> centers() const
    {
        std::vector<RE> out;
        out.reserve(times.size() * freqs.size());
        for (int n : times)
            for (int k : freqs)
                out.push_back({n, k});
        return out;
    }
};

inline SubCfrLayout subsample_grid(int n_begin, int n_end, int K, const SubsampleSpec& spec)
{
    spec.validate();
    if (n_end <= n_begin || K < 1)
        throw PreconditionError("empty grid range for sub-sampling");
    SubCfrLayout l;
    l.m_t = spec.m_t;
    l.m_f = spec.m_f;
    for (int n = n_begin; n < n_end; n += spec.s_t)
        l.times.push_back(n);
    for (int k = 0; k < K; k += spec.s_f)
        l.freqs.push_back(k);
    const int wt = static_cast<int>(l.times.size()) / spec.m_t;
    const int wf = static_cast<int>(l.freqs.size()) / spec.m_f;
    if (wt == 0 || wf == 0)
        throw PreconditionError("a " + std::to_string(spec.m_f) + "x" + std::to_string(spec.m_t) +
                                " sub-CFR map does not fit into the " + std::to_string(l.freqs.size()) + "x" +
                                std::to_string(l.times.size()) + " lattice");
    for (int i = 0; i < wt; ++i)
        for (int j = 0; j < wf; ++j)
            l.windows.push_back({i * spec.m_t, j * spec.m_f});
    return l;
}

// ---------------------------------------------------------------------------
// Samples and datasets
//
// A map is stored as (channel, frequency row, time column) with channel 0 the
// real part and channel 1 the imaginary part, so the network sees an
// M_f x M_t image. Values are divided by `scale`, the RMS of the noisy map.

enum class DatasetKind : std::uint32_t { Offline = 0, Online = 1, Support = 2, Query = 3 };

inline const char* to_string(DatasetKind k)
{
    switch (k) {
    case DatasetKind::Offline: return "offline";
    case DatasetKind::Online: return "online";
    case DatasetKind::Support: return "support";
    case DatasetKind::Query: return "query";
    }
    return "?";
}

// `target` is the training label (true CFR offline, data-aided estimate
// online). The denoiser output is a separate value and never stored here.
struct SubCfrSample {
    std::vector<float> noisy;
    std::vector<float> target;
    std::vector<float> reference;  // true map for label diagnostics, may be empty
    int r = 0;
    int t = 0;
    RE origin;                     // (n, k) of the first lattice point
    WindowOrigin window;
    double scale = 1.0;
    float snr_db = 0.0f;
    Provenance target_provenance = Provenance::Truth;
};

struct Dataset {
    DatasetKind kind = DatasetKind::Offline;
    int m_f = 58;
    int m_t = 8;
    std::vector<SubCfrSample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
    std::size_t map_size() const { return 2 * static_cast<std::size_t>(m_f) * static_cast<std::size_t>(m_t); }

    std::vector<SamplePair<float>> pairs() const
    {
        std::vector<SamplePair<float>> out;
        out.reserve(samples.size());
        for (const auto& s : samples)
            out.push_back({s.noisy, s.target});
        return out;
    }

    Dataset subset(std::span<const std::size_t> idx, DatasetKind k) const
    {
        Dataset d;
        d.kind = k;
        d.m_f = m_f;
        d.m_t = m_t;
        for (std::size_t i : idx)
            d.samples.push_back(samples.at(i));
        return d;
    }
};

inline std::size_t map_offset(int m_f, int m_t, int c, int j, int i)
{
    return (static_cast<std::size_t>(c) * static_cast<std::size_t>(m_f) + static_cast<std::size_t>(j)) *
               static_cast<std::size_t>(m_t) +
           static_cast<std::size_t>(i);
}

// Reads the complex map of one window from get(n, k) -> cplx.
template <typename Get>
std::vector<cplx> gather_map(const SubCfrLayout& l, WindowOrigin w, Get&& get)
{
    std::vector<cplx> out(static_cast<std::size_t>(l.m_f) * static_cast<std::size_t>(l.m_t));
    for (int j = 0; j < l.m_f; ++j)
        for (int i = 0; i < l.m_t; ++i)
            out[static_cast<std::size_t>(j * l.m_t + i)] =
                get(l.times[static_cast<std::size_t>(w.ti + i)], l.freqs[static_cast<std::size_t>(w.fj + j)]);
    return out;
}

inline double map_rms(std::span<const cplx> m)
{
    double e = 0.0;
    for (const cplx& v : m)
        e += std::norm(v);
    return std::sqrt(e / static_cast<double>(std::max<std::size_t>(m.size(), 1)));
}

inline std::vector<float> encode_map(std::span<const cplx> m, int m_f, int m_t, double scale)
{
    std::vector<float> out(2 * m.size());
    const double inv = 1.0 / scale;
    for (int j = 0; j < m_f; ++j) {
        for (int i = 0; i < m_t; ++i) {
            const cplx v = m[static_cast<std::size_t>(j * m_t + i)] * inv;
            out[map_offset(m_f, m_t, 0, j, i)] = static_cast<float>(v.real());
            out[map_offset(m_f, m_t, 1, j, i)] = static_cast<float>(v.imag());
        }
    }
    return out;
}

inline std::vector<cplx> decode_map(std::span<const float> m, int m_f, int m_t, double scale)
{
    std::vector<cplx> out(static_cast<std::size_t>(m_f) * static_cast<std::size_t>(m_t));
    for (int j = 0; j < m_f; ++j)
        for (int i = 0; i < m_t; ++i)
            out[static_cast<std::size_t>(j * m_t + i)] =
                scale * cplx(m[map_offset(m_f, m_t, 0, j, i)], m[map_offset(m_f, m_t, 1, j, i)]);
    return out;
}

inline double normalization_scale(std::span<const cplx> noisy)
{
    const double s = map_rms(noisy);
    return s > 0.0 && std::isfinite(s) ? s : 1.0;
}

// Squared error ratio ||a - ref||^2 / ||ref||^2 between two encoded maps.
inline double map_nmse(std::span<const float> a, std::span<const float> ref)
{
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(ref[i]);
        num += d * d;
        den += static_cast<double>(ref[i]) * static_cast<double>(ref[i]);
    }
    return den > 0.0 ? num / den : std::numeric_limits<double>::infinity();
}

struct LabelQuality {
    double input_nmse_db = 0.0;   // 10 log10 of the mean input NMSE
    double target_nmse_db = 0.0;  // 10 log10 of the mean target NMSE
    std::size_t samples = 0;
};

// Needs reference maps on every sample.
inline LabelQuality label_quality(const Dataset& d)
{
    LabelQuality q;
    double in = 0.0;
    double tg = 0.0;
    for (const auto& s : d.samples) {
        if (s.reference.empty())
            throw PreconditionError("label quality needs reference maps");
        in += map_nmse(s.noisy, s.reference);
        tg += map_nmse(s.target, s.reference);
    }
    q.samples = d.samples.size();
    if (q.samples == 0)
        throw PreconditionError("label quality of an empty dataset");
    q.input_nmse_db = 10.0 * std::log10(in / static_cast<double>(q.samples));
    q.target_nmse_db = 10.0 * std::log10(tg / static_cast<double>(q.samples));
    return q;
}

// Seeded subset of at most `cap` indices out of n, returned in ascending
// order. cap <= 0 keeps everything.
inline std::vector<std::size_t> capped_indices(std::size_t n, int cap, std::uint64_t seed)
{
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (cap <= 0 || static_cast<std::size_t>(cap) >= n)
        return idx;
    Rng rng(derive_seed(seed, 0x636170ULL));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(cap));
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---------------------------------------------------------------------------
// Online dataset

struct OnlineDatasetConfig {
    SubsampleSpec sub;
    WindowSize window{2, 3};
    int sample_cap = 0;            // 0 keeps every window and antenna pair
    bool truth_targets = false;    // true-CFR variant: label with the true CFR
    bool keep_reference = false;   // attach true maps for diagnostics
    std::uint64_t seed = 1;
    int jobs = 1;
};

// Data-aided estimates at every lattice point of [0, n_end). Entries whose
// window Gram matrix is ill-posed are flagged invalid.
struct LatticeEstimates {
    SubCfrLayout layout;
    std::vector<CMatrix> h;     // times x freqs, row-major over (ti, fj)
    std::vector<std::uint8_t> valid;

    const CMatrix& at(int ti, int fj) const { return h[static_cast<std::size_t>(ti) * layout.freqs.size() + static_cast<std::size_t>(fj)]; }
    bool ok(int ti, int fj) const { return valid[static_cast<std::size_t>(ti) * layout.freqs.size() + static_cast<std::size_t>(fj)] != 0; }
};

inline LatticeEstimates data_aided_lattice(const ReceivedGrid& y, const DetectionResult& det, const GridConfig& cfg,
                                           const SubCfrLayout& layout, WindowSize w, int n_begin, int n_end, int jobs)
{
    LatticeEstimates out;
    out.layout = layout;
    const std::size_t nf = layout.freqs.size();
    const std::size_t total = layout.times.size() * nf;
    out.h.assign(total, CMatrix::Zero(cfg.n_rx, cfg.n_tx));
    out.valid.assign(total, 0);
    parallel_for(total, [&](std::size_t idx) {
        const RE center{layout.times[idx / nf], layout.freqs[idx % nf]};
        try {
            const WindowSample s = collect_window(y, det, cfg, center, w, n_begin, n_end);
            out.h[idx] = da_ls_estimate(s);
            out.valid[idx] = 1;
        } catch (const IllPosedWindow&) {
            out.valid[idx] = 0;
        }
    }, jobs);
    return out;
}

// Pairs noisy pilot-LS maps with data-aided (or true) maps for every
// antenna pair and every sub-CFR window inside the first `n_train_symbols`
// symbols. `det` must hold detections for that period.
inline Dataset build_online_dataset(const LinkRealization& link, const DetectionResult& det, int n_train_symbols,
                                    const OnlineDatasetConfig& oc)
{
    const GridConfig& cfg = link.grid.cfg;
    if (n_train_symbols <= 0)
        throw PreconditionError("online dataset needs at least one training slot");
    const SubCfrLayout layout = subsample_grid(0, n_train_symbols, cfg.K, oc.sub);

    std::optional<LatticeEstimates> da;
    if (!oc.truth_targets)
        da = data_aided_lattice(link.received, det, cfg, layout, oc.window, 0, n_train_symbols, oc.jobs);

    Dataset d;
    d.kind = DatasetKind::Online;
    d.m_f = oc.sub.m_f;
    d.m_t = oc.sub.m_t;
    for (const WindowOrigin& w : layout.windows) {
        if (da) {
            bool ok = true;
            for (int i = 0; i < layout.m_t && ok; ++i)
                for (int j = 0; j < layout.m_f && ok; ++j)
                    ok = da->ok(w.ti + i, w.fj + j);
            if (!ok)
                continue;
        }
        for (int r = 0; r < cfg.n_rx; ++r) {
            for (int t = 0; t < cfg.n_tx; ++t) {
                const auto noisy = gather_map(layout, w, [&](int n, int k) { return link.interpolated.at(n, k, r, t); });
                const auto truth = gather_map(layout, w, [&](int n, int k) { return link.channel.at(n, k, r, t); });
                SubCfrSample s;
                s.r = r;
                s.t = t;
                s.window = w;
                s.origin = {layout.times[static_cast<std::size_t>(w.ti)], layout.freqs[static_cast<std::size_t>(w.fj)]};
                s.snr_db = static_cast<float>(link.snr_db);
                s.scale = normalization_scale(noisy);
                s.noisy = encode_map(noisy, d.m_f, d.m_t, s.scale);
                if (da) {
                    std::vector<cplx> target(noisy.size());
                    for (int j = 0; j < layout.m_f; ++j)
                        for (int i = 0; i < layout.m_t; ++i)
                            target[static_cast<std::size_t>(j * layout.m_t + i)] = da->at(w.ti + i, w.fj + j)(r, t);
                    s.target = encode_map(target, d.m_f, d.m_t, s.scale);
                    s.target_provenance = Provenance::DataAided;
                } else {
                    s.target = encode_map(truth, d.m_f, d.m_t, s.scale);
                    s.target_provenance = Provenance::Truth;
                }
                if (oc.keep_reference)
                    s.reference = encode_map(truth, d.m_f, d.m_t, s.scale);
                d.samples.push_back(std::move(s));
            }
        }
    }
    if (d.samples.empty())
        throw PreconditionError("online dataset is empty: every window was ill-posed");
    const auto keep = capped_indices(d.samples.size(), oc.sample_cap, oc.seed);
    if (keep.size() != d.samples.size())
        d = d.subset(keep, DatasetKind::Online);
    return d;
}

// ---------------------------------------------------------------------------
// Offline dataset and meta tasks
//
// Each episode simulates `episode_slots` slots under one (preset, SNR) draw
// and emits the sub-CFR windows of a random subset of antenna pairs with
// true-CFR targets.

struct OfflineDatasetConfig {
    GridConfig grid;
    std::vector<ChannelPreset> presets;
    std::vector<double> snr_db{-6.0, -3.0, 0.0, 6.0, 9.0};
    SubsampleSpec sub;
    double carrier_hz = 3.5e9;
    int episode_slots = 4;
    int pairs_per_episode = 8;     // 0 = every antenna pair
    int n_oscillators = 32;
    int jobs = 0;

    void validate() const
    {
        if (presets.empty())
            throw ConfigError("offline data needs at least one channel preset");
        if (snr_db.empty())
            throw ConfigError("offline data needs at least one SNR");
        if (episode_slots < 1)
            throw ConfigError("episode_slots must be >= 1");
        if (pairs_per_episode < 0)
            throw ConfigError("pairs_per_episode must be >= 0");
        sub.validate();
    }

    GridConfig episode_grid() const
    {
        GridConfig g = grid;
        g.n_slots_total = episode_slots;
        g.n_slots_train = 0;
        return g;
    }
};

struct EpisodeDraw {
    std::size_t preset = 0;
    double snr_db = 0.0;
};

inline EpisodeDraw draw_condition(const OfflineDatasetConfig& oc, Rng& rng)
{
    EpisodeDraw e;
    e.preset = std::uniform_int_distribution<std::size_t>(0, oc.presets.size() - 1)(rng);
    e.snr_db = oc.snr_db[std::uniform_int_distribution<std::size_t>(0, oc.snr_db.size() - 1)(rng)];
    return e;
}

// All true-target samples of one episode for the given condition.
inline std::vector<SubCfrSample> episode_samples(const OfflineDatasetConfig& oc, const EpisodeDraw& cond,
                                                 std::uint64_t seed, int pairs)
{
    const GridConfig g = oc.episode_grid();
    const ChannelParams params =
        make_channel_params(oc.presets[cond.preset], g, oc.carrier_hz, derive_seed(seed, 10), oc.n_oscillators);
    const LinkRealization link = simulate_link(g, params, cond.snr_db, derive_seed(seed, 11), 1);
    const SubCfrLayout layout = subsample_grid(0, g.n_symbols(), g.K, oc.sub);

    const int all_pairs = g.n_rx * g.n_tx;
    std::vector<int> pair_ids(static_cast<std::size_t>(all_pairs));
    std::iota(pair_ids.begin(), pair_ids.end(), 0);
    if (pairs > 0 && pairs < all_pairs) {
        Rng rng(derive_seed(seed, 12));
        std::shuffle(pair_ids.begin(), pair_ids.end(), rng);
        pair_ids.resize(static_cast<std::size_t>(pairs));
        std::sort(pair_ids.begin(), pair_ids.end());
    }

    std::vector<SubCfrSample> out;
    for (const WindowOrigin& w : layout.windows) {
        for (int pid : pair_ids) {
            const int r = pid / g.n_tx;
            const int t = pid % g.n_tx;
            const auto noisy = gather_map(layout, w, [&](int n, int k) { return link.interpolated.at(n, k, r, t); });
            const auto truth = gather_map(layout, w, [&](int n, int k) { return link.channel.at(n, k, r, t); });
            SubCfrSample s;
            s.r = r;
            s.t = t;
            s.window = w;
            s.origin = {layout.times[static_cast<std::size_t>(w.ti)], layout.freqs[static_cast<std::size_t>(w.fj)]};
            s.snr_db = static_cast<float>(cond.snr_db);
            s.scale = normalization_scale(noisy);
            s.noisy = encode_map(noisy, oc.sub.m_f, oc.sub.m_t, s.scale);
            s.target = encode_map(truth, oc.sub.m_f, oc.sub.m_t, s.scale);
            s.target_provenance = Provenance::Truth;
            out.push_back(std::move(s));
        }
    }
    return out;
}

inline std::size_t samples_per_episode(const OfflineDatasetConfig& oc, int pairs)
{
    const GridConfig g = oc.episode_grid();
    const SubCfrLayout layout = subsample_grid(0, g.n_symbols(), g.K, oc.sub);
    const int all_pairs = g.n_rx * g.n_tx;
    const int p = pairs > 0 && pairs < all_pairs ? pairs : all_pairs;
    return layout.windows.size() * static_cast<std::size_t>(p);
}

inline Dataset build_offline_dataset(const OfflineDatasetConfig& oc, std::size_t n_samples, std::uint64_t seed)
{
    oc.validate();
    Dataset d;
    d.kind = DatasetKind::Offline;
    d.m_f = oc.sub.m_f;
    d.m_t = oc.sub.m_t;
    if (n_samples == 0)
        return d;
    const std::size_t per = samples_per_episode(oc, oc.pairs_per_episode);
    const std::size_t episodes = (n_samples + per - 1) / per;
    std::vector<std::vector<SubCfrSample>> parts(episodes);
    parallel_for(episodes, [&](std::size_t e) {
        Rng rng(derive_seed(seed, 0x6F66666CULL, e));
        const EpisodeDraw cond = draw_condition(oc, rng);
        parts[e] = episode_samples(oc, cond, derive_seed(seed, 0x65706973ULL, e), oc.pairs_per_episode);
    }, oc.jobs);
    for (auto& p : parts)
        for (auto& s : p) {
            if (d.samples.size() == n_samples)
                break;
            d.samples.push_back(std::move(s));
        }
    return d;
}

// One meta-learning task: a single channel condition with disjoint support
// and query sets.
struct TaskSpec {
    ChannelPreset preset;
    double snr_db = 0.0;
    int n_sup = 16;
    int n_que = 32;
    std::uint64_t seed = 0;
};

struct MetaTask {
    TaskSpec spec;
    Dataset support;
    Dataset query;
};

inline std::vector<MetaTask> build_meta_tasks(const OfflineDatasetConfig& oc, std::size_t n_tasks, int n_sup, int n_que,
                                              std::uint64_t seed)
{
    oc.validate();
    if (n_sup < 1 || n_que < 1)
        throw ConfigError("support and query sizes must be >= 1");
    std::vector<MetaTask> tasks(n_tasks);
    parallel_for(n_tasks, [&](std::size_t i) {
        Rng rng(derive_seed(seed, 0x7461736BULL, i));
        const EpisodeDraw cond = draw_condition(oc, rng);
        MetaTask& task = tasks[i];
        task.spec.preset = oc.presets[cond.preset];
        task.spec.snr_db = cond.snr_db;
        task.spec.n_sup = n_sup;
        task.spec.n_que = n_que;
        task.spec.seed = derive_seed(seed, 0x65706973ULL, i);
        const std::size_t need = static_cast<std::size_t>(n_sup + n_que);
        std::vector<SubCfrSample> pool;
        for (std::uint64_t ep = 0; pool.size() < need; ++ep) {
            auto part = episode_samples(oc, cond, derive_seed(task.spec.seed, ep), 0);
            for (auto& s : part)
                pool.push_back(std::move(s));
        }
        std::vector<std::size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::shuffle(idx.begin(), idx.end(), rng);
        for (DatasetKind k : {DatasetKind::Support, DatasetKind::Query}) {
            Dataset& d = k == DatasetKind::Support ? task.support : task.query;
            d.kind = k;
            d.m_f = oc.sub.m_f;
            d.m_t = oc.sub.m_t;
        }
        for (std::size_t j = 0; j < need; ++j)
            (j < static_cast<std::size_t>(n_sup) ? task.support : task.query).samples.push_back(pool[idx[j]]);
    }, oc.jobs);
    return tasks;
}

// ---------------------------------------------------------------------------
// Training

// Reduction of the residual loss that optimizer step sizes refer to.
// Frobenius: the per-map squared Frobenius norm. PerElement: the same divided
// by the map element count 2 M_f M_t. Reported losses are always Frobenius.
enum class LossReduction { PerElement, Frobenius };

inline LossReduction loss_reduction_from_string(const std::string& s)
{
    if (s == "per-element")
        return LossReduction::PerElement;
    if (s == "frobenius")
        return LossReduction::Frobenius;
    throw ConfigError("unknown loss reduction '" + s + "' (expected per-element or frobenius)");
}

inline const char* to_string(LossReduction r) { return r == LossReduction::PerElement ? "per-element" : "frobenius"; }

inline float gradient_scale(LossReduction r, const Dataset& d)
{
    return r == LossReduction::PerElement ? 1.0f / static_cast<float>(d.map_size()) : 1.0f;
}

inline void scale_in_place(std::vector<float>& g, float s)
{
    if (s != 1.0f)
        for (float& v : g)
            v *= s;
}

struct TrainHistory {
    std::vector<double> train_loss;  // one entry per epoch / outer step
    std::vector<double> val_loss;    // NaN where no validation set exists
};

struct DivergenceError : Error {
    TrainHistory history;
    DivergenceError(const std::string& what, TrainHistory h) : Error(what), history(std::move(h)) {}
};

struct PretrainConfig {
    int epochs = 100;
    int batch = 64;
    double lr = 1e-3;
    double val_fraction = 0.1;
    LossReduction reduction = LossReduction::PerElement;
    std::uint64_t seed = 1;
    int jobs = 0;
};

struct TrainResult {
    ModelState model;
    TrainHistory history;
};

inline double dataset_loss(const ModelState& m, const Dataset& d)
{
    const auto p = d.pairs();
    return static_cast<double>(batch_loss<float>(m.spec, m.theta, p, d.m_f, d.m_t));
}

// ADAM on the mean residual loss with a seeded per-epoch shuffle. A seeded
// `val_fraction` of the data is held out for the validation history.
inline TrainResult pretrain(const ModelState& init, const Dataset& data, const PretrainConfig& pc)
{
    if (data.empty())
        throw PreconditionError("pretraining needs a non-empty dataset");
    if (pc.epochs < 0 || pc.batch < 1 || pc.lr < 0.0)
        throw ConfigError("pretrain epochs >= 0, batch >= 1 and lr >= 0 are required");
    if (pc.val_fraction < 0.0 || pc.val_fraction >= 1.0)
        throw ConfigError("val_fraction must be in [0, 1)");

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng split_rng(derive_seed(pc.seed, 0x73706C74ULL));
    std::shuffle(order.begin(), order.end(), split_rng);
    std::size_t n_val = static_cast<std::size_t>(std::floor(pc.val_fraction * static_cast<double>(data.size())));
    if (n_val >= data.size())
        n_val = data.size() - 1;
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val_idx.begin(), val_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
    const Dataset val = data.subset(val_idx, data.kind);
    const auto val_pairs = val.pairs();

    TrainResult res;
    res.model = init;
    AdamState<float> adam(init.theta.size());
    Rng rng(derive_seed(pc.seed, 0x65706F63ULL));
    std::vector<SamplePair<float>> batch;
    for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        std::shuffle(train_idx.begin(), train_idx.end(), rng);
        double acc = 0.0;
        for (std::size_t b = 0; b < train_idx.size(); b += static_cast<std::size_t>(pc.batch)) {
            const std::size_t e = std::min(train_idx.size(), b + static_cast<std::size_t>(pc.batch));
            batch.clear();
            for (std::size_t i = b; i < e; ++i) {
                const auto& s = data.samples[train_idx[i]];
                batch.push_back({s.noisy, s.target});
            }
            auto g = batch_gradient<float>(res.model.spec, res.model.theta, batch, data.m_f, data.m_t, pc.jobs);
            if (!std::isfinite(g.loss) || !all_finite<float>(g.grad)) {
                res.history.train_loss.push_back(std::numeric_limits<double>::quiet_NaN());
                throw DivergenceError("pretraining diverged in epoch " + std::to_string(epoch), res.history);
            }
            acc += static_cast<double>(g.loss) * static_cast<double>(e - b);
            scale_in_place(g.grad, gradient_scale(pc.reduction, data));
            adam_step<float>(adam, res.model.theta, g.grad, pc.lr);
        }
        res.history.train_loss.push_back(acc / static_cast<double>(train_idx.size()));
        res.history.val_loss.push_back(val.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                   : static_cast<double>(batch_loss<float>(res.model.spec, res.model.theta, val_pairs, data.m_f, data.m_t)));
        if (!all_finite<float>(res.model.theta))
            throw DivergenceError("pretraining produced non-finite parameters", res.history);
    }
    return res;
}

struct FineTuneConfig {
    int steps = 30;
    double lr = 1e-3;
    int full_batch_cap = 64;  // datasets up to this size use full-batch steps
    int minibatch = 32;
    LossReduction reduction = LossReduction::PerElement;
    std::uint64_t seed = 1;
    int jobs = 0;
};

// Plain gradient descent, theta <- theta - lr grad, on every layer.
inline TrainResult fine_tune(const ModelState& init, const Dataset& data, const FineTuneConfig& fc)
{
    if (data.empty())
        throw PreconditionError("fine-tuning needs a non-empty dataset");
    if (fc.steps < 0 || fc.lr < 0.0 || fc.minibatch < 1)
        throw ConfigError("fine-tune steps >= 0, lr >= 0 and minibatch >= 1 are required");
    TrainResult res;
    res.model = init;
    const auto all = data.pairs();
    const bool full = data.size() <= static_cast<std::size_t>(std::max(fc.full_batch_cap, 0));
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(fc.seed, 0x66746E65ULL));
    std::size_t cursor = order.size();
    std::vector<SamplePair<float>> batch;
    for (int step = 0; step < fc.steps; ++step) {
        std::span<const SamplePair<float>> use = all;
        if (!full) {
            batch.clear();
            while (batch.size() < static_cast<std::size_t>(fc.minibatch)) {
                if (cursor == order.size()) {
                    std::shuffle(order.begin(), order.end(), rng);
                    cursor = 0;
                }
                batch.push_back(all[order[cursor++]]);
            }
            use = batch;
        }
        auto g = batch_gradient<float>(res.model.spec, res.model.theta, use, data.m_f, data.m_t, fc.jobs);
        res.history.train_loss.push_back(static_cast<double>(g.loss));
        if (!std::isfinite(g.loss) || !all_finite<float>(g.grad))
            throw DivergenceError("fine-tuning diverged at step " + std::to_string(step), res.history);
        scale_in_place(g.grad, gradient_scale(fc.reduction, data));
        sgd_step<float>(res.model.theta, g.grad, fc.lr);
    }
    if (!all_finite<float>(res.model.theta))
        throw DivergenceError("fine-tuning produced non-finite parameters", res.history);
    return res;
}

// Task adaptation theta' = theta - alpha grad L_sup(theta), repeated `steps`
// times. The incoming model is left untouched.
inline ModelState maml_inner(const ModelState& theta, const Dataset& support, double alpha, int steps = 1, int jobs = 1,
                             LossReduction reduction = LossReduction::PerElement)
{
    if (support.empty())
        throw PreconditionError("MAML inner step needs a non-empty support set");
    ModelState out = theta;
    const auto pairs = support.pairs();
    for (int s = 0; s < steps; ++s) {
        auto g = batch_gradient<float>(out.spec, out.theta, pairs, support.m_f, support.m_t, jobs);
        scale_in_place(g.grad, gradient_scale(reduction, support));
        sgd_step<float>(out.theta, g.grad, alpha);
    }
    return out;
}

struct MamlConfig {
    double alpha = 1e-3;
    double beta = 1e-3;
    int epochs = 10;
    int task_batch = 16;
    int inner_steps = 1;
    bool second_order = false;
    LossReduction reduction = LossReduction::PerElement;
    std::uint64_t seed = 1;
    int jobs = 0;
};

// Outer gradient for one task. First order uses grad L_que(theta'); second
// order applies (I - alpha H_sup(theta)) to it, exact for one inner step.
// Gradients are returned under the configured reduction.
inline BatchGradient<float> maml_task_gradient(const ModelState& theta, const MetaTask& task, const MamlConfig& mc)
{
    const ModelState adapted = maml_inner(theta, task.support, mc.alpha, mc.inner_steps, 1, mc.reduction);
    const auto q = task.query.pairs();
    auto g = batch_gradient<float>(adapted.spec, adapted.theta, q, task.query.m_f, task.query.m_t, 1);
    scale_in_place(g.grad, gradient_scale(mc.reduction, task.query));
    if (mc.second_order) {
        const auto s = task.support.pairs();
        const double hs = gradient_scale(mc.reduction, task.support);
        const auto hv = hessian_vector_product<float>(theta.spec, theta.theta, g.grad, s, task.support.m_f, task.support.m_t);
        for (std::size_t j = 0; j < g.grad.size(); ++j)
            g.grad[j] = static_cast<float>(static_cast<double>(g.grad[j]) - mc.alpha * hs * static_cast<double>(hv[j]));
    }
    return g;
}

// Each epoch visits every task once in seeded random order, in batches of
// `task_batch`. The outer ADAM step uses the mean adapted query gradient;
// the history holds the mean adapted query loss per outer step.
inline TrainResult maml_train(const ModelState& init, const std::vector<MetaTask>& tasks, const MamlConfig& mc)
{
    if (tasks.empty())
        throw PreconditionError("meta-training needs at least one task");
    if (mc.task_batch < 1 || mc.epochs < 0 || mc.inner_steps < 0)
        throw ConfigError("task_batch >= 1, epochs >= 0 and inner_steps >= 0 are required");
    if (mc.second_order && mc.inner_steps != 1)
        throw ConfigError("second-order MAML supports exactly one inner step");
    TrainResult res;
    res.model = init;
    AdamState<float> adam(init.theta.size());
    std::vector<std::size_t> order(tasks.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(mc.seed, 0x6D616D6CULL));
    for (int epoch = 0; epoch < mc.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(mc.task_batch)) {
            const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(mc.task_batch));
            std::vector<BatchGradient<float>> per(e - b);
            parallel_for(e - b, [&](std::size_t i) { per[i] = maml_task_gradient(res.model, tasks[order[b + i]], mc); }, mc.jobs);
            std::vector<float> grad(res.model.theta.size(), 0.0f);
            double loss = 0.0;
            for (const auto& g : per) {
                loss += static_cast<double>(g.loss);
                for (std::size_t j = 0; j < grad.size(); ++j)
                    grad[j] += g.grad[j];
            }
            const float inv = 1.0f / static_cast<float>(per.size());
            for (float& v : grad)
                v *= inv;
            res.history.train_loss.push_back(loss / static_cast<double>(per.size()));
            res.history.val_loss.push_back(std::numeric_limits<double>::quiet_NaN());
            if (!std::isfinite(loss) || !all_finite<float>(grad))
                throw DivergenceError("meta-training diverged in epoch " + std::to_string(epoch), res.history);
            adam_step<float>(adam, res.model.theta, grad, mc.beta);
        }
    }
    return res;
}

inline void write_history_csv(std::ostream& os, const TrainHistory& h, const char* step_name = "epoch")
{
    os << step_name << ",train_loss,val_loss\n";
    char buf[128];
    for (std::size_t i = 0; i < h.train_loss.size(); ++i) {
        const double v = i < h.val_loss.size() ? h.val_loss[i] : std::numeric_limits<double>::quiet_NaN();
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i, h.train_loss[i], v);
        os << buf;
    }
}

// ---------------------------------------------------------------------------
// Dataset file
//
//   offset  size  field
//   0       8     magic "CHDNDSET"
//   8       4     format version (1)
//   12      4     kind (0 offline, 1 online, 2 support, 3 query)
//   16      4     M_f
//   20      4     M_t
//   24      8     sample count S
//   32      4     metadata length L, then L bytes of JSON text
//   then S records:
//     u32 r, u32 t, i32 origin n, i32 origin k, u32 window ti, u32 window fj,
//     f64 scale, f32 snr_db, u32 target provenance, u32 has_reference,
//     noisy[2 M_f M_t] f32, target[2 M_f M_t] f32, reference f32 if present
//
// Little-endian throughout. Records follow the CSV manifest row order.

inline constexpr std::array<char, 8> kDatasetMagic{'C', 'H', 'D', 'N', 'D', 'S', 'E', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_dataset(std::ostream& os, const Dataset& d, const std::string& metadata)
{
    os.write(kDatasetMagic.data(), 8);
    le::put_u32(os, kDatasetVersion);
    le::put_u32(os, static_cast<std::uint32_t>(d.kind));
    le::put_u32(os, static_cast<std::uint32_t>(d.m_f));
    le::put_u32(os, static_cast<std::uint32_t>(d.m_t));
    le::put_u64(os, d.samples.size());
    le::put_string(os, metadata);
    const std::size_t ms = d.map_size();
    for (const auto& s : d.samples) {
        if (s.noisy.size() != ms || s.target.size() != ms || (!s.reference.empty() && s.reference.size() != ms))
            throw ShapeError("sample map size does not match the dataset shape");
        le::put_u32(os, static_cast<std::uint32_t>(s.r));
        le::put_u32(os, static_cast<std::uint32_t>(s.t));
        le::put_u32(os, static_cast<std::uint32_t>(s.origin.n));
        le::put_u32(os, static_cast<std::uint32_t>(s.origin.k));
        le::put_u32(os, static_cast<std::uint32_t>(s.window.ti));
        le::put_u32(os, static_cast<std::uint32_t>(s.window.fj));
        std::uint64_t bits;
        std::memcpy(&bits, &s.scale, 8);
        le::put_u64(os, bits);
        le::put_f32(os, s.snr_db);
        le::put_u32(os, static_cast<std::uint32_t>(s.target_provenance));
        le::put_u32(os, s.reference.empty() ? 0u : 1u);
        for (float f : s.noisy)
            le::put_f32(os, f);
        for (float f : s.target)
            le::put_f32(os, f);
        for (float f : s.reference)
            le::put_f32(os, f);
    }
    if (!os)
        throw IoError("failed writing dataset");
}

struct DatasetFile {
    Dataset data;
    std::string metadata;
};

inline DatasetFile read_dataset(std::istream& is)
{
    std::array<char, 8> magic{};
    if (!is.read(magic.data(), 8) || magic != kDatasetMagic)
        throw IoError("not a dataset file (bad magic)");
    const std::uint32_t version = le::get_u32(is);
    if (version != kDatasetVersion)
        throw IoError("unsupported dataset version " + std::to_string(version));
    DatasetFile f;
    const std::uint32_t kind = le::get_u32(is);
    if (kind > 3)
        throw IoError("unknown dataset kind " + std::to_string(kind));
    f.data.kind = static_cast<DatasetKind>(kind);
    f.data.m_f = static_cast<int>(le::get_u32(is));
    f.data.m_t = static_cast<int>(le::get_u32(is));
    if (f.data.m_f < 1 || f.data.m_t < 1 || f.data.m_f > 1 << 16 || f.data.m_t > 1 << 16)
        throw IoError("corrupt dataset map shape");
    const std::uint64_t count = le::get_u64(is);
    f.metadata = le::get_string(is);
    const std::size_t ms = f.data.map_size();
    for (std::uint64_t i = 0; i < count; ++i) {
        SubCfrSample s;
        s.r = static_cast<int>(le::get_u32(is));
        s.t = static_cast<int>(le::get_u32(is));
        s.origin.n = static_cast<int>(le::get_u32(is));
        s.origin.k = static_cast<int>(le::get_u32(is));
        s.window.ti = static_cast<int>(le::get_u32(is));
        s.window.fj = static_cast<int>(le::get_u32(is));
        const std::uint64_t bits = le::get_u64(is);
        std::memcpy(&s.scale, &bits, 8);
        s.snr_db = le::get_f32(is);
        const std::uint32_t prov = le::get_u32(is);
        if (prov > static_cast<std::uint32_t>(Provenance::Truth))
            throw IoError("unknown target provenance tag");
        s.target_provenance = static_cast<Provenance>(prov);
        const bool has_ref = le::get_u32(is) != 0;
        s.noisy.resize(ms);
        s.target.resize(ms);
        for (float& v : s.noisy)
            v = le::get_f32(is);
        for (float& v : s.target)
            v = le::get_f32(is);
        if (has_ref) {
            s.reference.resize(ms);
            for (float& v : s.reference)
                v = le::get_f32(is);
        }
        f.data.samples.push_back(std::move(s));
    }
    return f;
}

inline void write_manifest_csv(std::ostream& os, const Dataset& d)
{
    os << "index,kind,r,t,origin_n,origin_k,window_ti,window_fj,scale,snr_db,target\n";
    char buf[256];
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        const auto& s = d.samples[i];
        std::snprintf(buf, sizeof buf, "%zu,%s,%d,%d,%d,%d,%d,%d,%.9g,%.3f,%s\n", i, to_string(d.kind), s.r, s.t,
                      s.origin.n, s.origin.k, s.window.ti, s.window.fj, s.scale, static_cast<double>(s.snr_db),
                      to_string(s.target_provenance));
        os << buf;
    }
}

inline void save_dataset(const std::string& path, const Dataset& d, const std::string& metadata)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot open '" + path + "' for writing");
    write_dataset(os, d, metadata);
}

inline DatasetFile load_dataset(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open '" + path + "'");
    return read_dataset(is);
}

} // namespace chanden

#endif
