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

#include <chanden/data_aided.hpp>

#include <gtest/gtest.h>

using namespace chanden;

namespace {

GridConfig small_grid(int K, int nr, int nt)
{
    GridConfig c;
    c.K = K;
    c.n_slots_total = 1;
    c.n_slots_train = 0;
    c.n_rx = nr;
    c.n_tx = nt;
    return c;
}

// Detections equal to the transmitted symbols, fully reliable.
DetectionResult oracle_detections(const ResourceGrid& grid)
{
    DetectionResult d;
    d.n_tx = grid.cfg.n_tx;
    d.hard_symbols = grid.tx_symbols;
    d.soft_estimates.assign(grid.tx_symbols.size(), cplx{});
    d.app.assign(grid.cfg.n_re(), 1.0);
    d.detected.assign(grid.cfg.n_re(), 1);
    return d;
}

ChannelRealization static_flat(const GridConfig& g, std::uint64_t seed)
{
    ChannelParams p;
    p.seed = seed;
    return generate_channel(g, p, 1);
}

ReceivedGrid noiseless(const ResourceGrid& grid, const ChannelRealization& ch)
{
    const GridConfig& g = grid.cfg;
    ReceivedGrid y;
    y.n_symbols = g.n_symbols();
    y.K = g.K;
    y.n_rx = g.n_rx;
    y.y.assign(g.n_re() * static_cast<std::size_t>(g.n_rx), cplx{});
    for (int n = 0; n < g.n_symbols(); ++n)
        for (int k = 0; k < g.K; ++k)
            for (int r = 0; r < g.n_rx; ++r) {
                cplx acc{};
                for (int t = 0; t < g.n_tx; ++t)
                    acc += ch.at(n, k, r, t) * grid.symbol(n, k, t);
                y.y[y.index(n, k, r)] = acc;
            }
    return y;
}

EpsProvider ones()
{
    return [](int, int) { return cplx{1.0, 0.0}; };
}

ChannelParams jakes(double fd_t)
{
    ChannelParams p;
    p.symbol_duration = 1e-3 / 14.0;
    p.doppler_hz = fd_t / p.symbol_duration;
    return p;
}

} // namespace

TEST(CollectWindow, DegenerateWindowAtPilot)
{
    const GridConfig g = small_grid(32, 4, 1);
    const auto grid = build_grid(g, 1);
    const auto y = noiseless(grid, static_flat(g, 2));
    const auto det = oracle_detections(grid);
    const RE pilot = grid.pilot_index_set[5];
    const auto w = collect_window(y, det, g, pilot, {0, 0}, 0, g.n_symbols());
    ASSERT_EQ(w.columns(), 1);
    EXPECT_EQ(w.x_mat(0, 0), grid.symbol(pilot.n, pilot.k, 0));
    for (int r = 0; r < g.n_rx; ++r)
        EXPECT_EQ(w.y_mat(r, 0), y.at(pilot.n, pilot.k, r));
}

TEST(CollectWindow, InteriorAndCornerColumnCounts)
{
    const GridConfig g = small_grid(32, 2, 2);
    const auto grid = build_grid(g, 1);
    const auto y = noiseless(grid, static_flat(g, 2));
    const auto det = oracle_detections(grid);
    EXPECT_EQ(collect_window(y, det, g, {6, 10}, {1, 1}, 0, g.n_symbols()).columns(), 9);
    EXPECT_EQ(collect_window(y, det, g, {0, 0}, {1, 1}, 0, g.n_symbols()).columns(), 4);
    EXPECT_EQ(collect_window(y, det, g, {6, 10}, {2, 3}, 0, g.n_symbols()).columns(), 35);
    // Rows outside [n_begin, n_end) are dropped as well.
    EXPECT_EQ(collect_window(y, det, g, {5, 10}, {2, 1}, 0, 6).columns(), 9);
}

TEST(CollectWindow, PilotColumnsCarryKnownPilots)
{
    const GridConfig g = small_grid(32, 2, 2);
    const auto grid = build_grid(g, 3);
    const auto y = noiseless(grid, static_flat(g, 2));
    auto det = oracle_detections(grid);
    // Corrupt every data decision; pilot columns must be untouched.
    for (const RE& re : grid.data_index_set)
        for (int t = 0; t < 2; ++t)
            det.hard_symbols[grid.re_index(re.n, re.k) * 2 + static_cast<std::size_t>(t)] = cplx{9.0, 9.0};
    const RE c{2, 12};
    const auto w = collect_window(y, det, g, c, {1, 2}, 0, g.n_symbols());
    for (Eigen::Index m = 0; m < w.columns(); ++m) {
        const RE off = w.offsets[static_cast<std::size_t>(m)];
        const int n = c.n + off.n;
        const int k = c.k + off.k;
        if (grid.pilot(n, k))
            for (int t = 0; t < 2; ++t)
                EXPECT_EQ(w.x_mat(t, m), grid.symbol(n, k, t));
        else
            EXPECT_EQ(w.x_mat(0, m), cplx(9.0, 9.0));
    }
}

TEST(CollectWindow, TooFewColumnsIsIllPosed)
{
    const GridConfig g = small_grid(32, 2, 2);
    const auto grid = build_grid(g, 1);
    const auto y = noiseless(grid, static_flat(g, 2));
    const auto det = oracle_detections(grid);
    EXPECT_THROW(collect_window(y, det, g, {6, 10}, {0, 0}, 0, g.n_symbols()), IllPosedWindow);
    EXPECT_THROW(collect_window(y, det, g, {99, 0}, {1, 1}, 0, g.n_symbols()), PreconditionError);
}

TEST(DaLs, NoiselessConstantChannelIsExact)
{
    const GridConfig g = small_grid(64, 8, 2);
    const auto grid = build_grid(g, 4);
    const auto ch = static_flat(g, 5);
    const auto y = noiseless(grid, ch);
    const auto det = oracle_detections(grid);
    const auto w = collect_window(y, det, g, {6, 30}, {2, 3}, 0, g.n_symbols());
    const CMatrix h = da_ls_estimate(w);
    for (int r = 0; r < g.n_rx; ++r)
        for (int t = 0; t < g.n_tx; ++t)
            EXPECT_NEAR(std::abs(h(r, t) - ch.at(6, 30, r, t)), 0.0, 1e-10);
}

TEST(DaLs, ZeroObservationsGiveZeroEstimate)
{
    Rng rng(1);
    const Constellation q(4);
    WindowSample w;
    w.x_mat.resize(2, 9);
    for (int t = 0; t < 2; ++t)
        for (int m = 0; m < 9; ++m)
            w.x_mat(t, m) = q.point(static_cast<int>(rng() % 4));
    w.x_mat(0, 0) = q.point(0);
    w.x_mat(1, 0) = q.point(1);
    w.y_mat = CMatrix::Zero(4, 9);
    const CMatrix h = da_ls_estimate(w);
    EXPECT_EQ(h.rows(), 4);
    EXPECT_EQ(h.cols(), 2);
    EXPECT_EQ(h.norm(), 0.0);
}

TEST(DaLs, RankDeficientPilotsAreRejectedWithCondition)
{
    WindowSample w;
    w.x_mat = CMatrix::Ones(2, 9);  // identical rows
    w.y_mat = CMatrix::Ones(4, 9);
    try {
        da_ls_estimate(w);
        FAIL() << "expected an ill-posed window";
    } catch (const IllPosedWindow& e) {
        EXPECT_GE(e.condition, kMaxGramCondition);
    }
}

TEST(DaLs, SinglePilotWindowMatchesPilotLs)
{
    const GridConfig g = small_grid(32, 4, 1);
    const auto grid = build_grid(g, 1);
    ChannelParams p;
    p.pdp = pdp_preset("exp-300ns");
    p.doppler_hz = 300.0;
    p.seed = 3;
    const auto ch = generate_channel(g, p, 1);
    const auto y = apply_channel(grid, ch, {0.3, 4});
    const auto ls = ls_pilot_estimate(y, grid);
    const auto det = oracle_detections(grid);
    for (std::size_t i = 0; i < grid.pilot_index_set.size(); i += 3) {
        const RE re = grid.pilot_index_set[i];
        const CMatrix h = da_ls_estimate(collect_window(y, det, g, re, {0, 0}, 0, g.n_symbols()));
        for (int r = 0; r < g.n_rx; ++r)
            ASSERT_NEAR(std::abs(h(r, 0) - ls.at(re.n, re.k, r, 0)), 0.0, 1e-12);
    }
}

// 35 virtual pilots against the single pilot at the window centre, same
// port column, SNR 0 dB on a static channel.
TEST(DaLs, WindowBeatsSinglePilotAtZeroDb)
{
    const GridConfig g = small_grid(64, 16, 2);
    const double s2 = noise_variance_for_snr(0.0, g.n_tx);
    const RE centre{2, 20};
    int wins = 0;
    const int trials = 1000;
    for (int i = 0; i < trials; ++i) {
        const auto grid = build_grid(g, derive_seed(1, i));
        ASSERT_EQ(grid.pilot_port[grid.re_index(centre.n, centre.k)], 0);
        const auto ch = static_flat(g, derive_seed(2, i));
        const auto y = apply_channel(grid, ch, {s2, derive_seed(3, i)});
        const auto det = oracle_detections(grid);
        const CMatrix h = da_ls_estimate(collect_window(y, det, g, centre, {2, 3}, 0, g.n_symbols()));
        const cplx xp = grid.symbol(centre.n, centre.k, 0);
        double e_da = 0.0;
        double e_ls = 0.0;
        for (int r = 0; r < g.n_rx; ++r) {
            const cplx truth = ch.at(centre.n, centre.k, r, 0);
            e_da += std::norm(h(r, 0) - truth);
            e_ls += std::norm(y.at(centre.n, centre.k, r) / xp - truth);
        }
        wins += e_da < e_ls;
    }
    EXPECT_GE(wins, 950);
}

TEST(Xi, ClosedForms)
{
    EXPECT_NEAR(std::abs(xi({3, 2}, ones(), uniform_reliability()) - cplx(1.0, 0.0)), 0.0, 1e-15);
    const auto r07 = [](int, int) { return 0.7; };
    const auto eps = [](int p, int q) { return p == 0 && q == 0 ? cplx(1.0, 0.0) : cplx(0.2, 0.1); };
    EXPECT_NEAR(std::abs(xi({0, 0}, eps, r07) - cplx(0.7, 0.0)), 0.0, 1e-15);
}

TEST(Xi, JakesTimeWindowMatchesDirectSum)
{
    const ChannelParams p = jakes(0.05);
    double direct = 0.0;
    for (int k = -2; k <= 2; ++k)
        direct += std::cyl_bessel_j(0.0, 2.0 * kPi * 0.05 * std::abs(k));
    direct /= 5.0;
    const cplx v = xi({2, 0}, channel_eps(p, 15e3), uniform_reliability());
    EXPECT_NEAR(v.real(), direct, 1e-12);
    EXPECT_NEAR(v.imag(), 0.0, 1e-12);
}

TEST(Xi, MagnitudeBoundedByLargestReliability)
{
    Rng rng(6);
    ChannelParams p = jakes(0.03);
    p.pdp = pdp_preset("exp-300ns");
    const auto eps = channel_eps(p, 15e3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> rel(15 * 13);
        double rmax = 0.0;
        for (auto& v : rel) {
            v = 0.001 + 0.999 * uniform01(rng);
            rmax = std::max(rmax, v);
        }
        const auto r = [&](int a, int b) { return rel[static_cast<std::size_t>((a + 7) * 13 + b + 6)]; };
        const int P = static_cast<int>(rng() % 8);
        const int Q = static_cast<int>(rng() % 7);
        const cplx v = xi({P, Q}, eps, r);
        EXPECT_LE(std::abs(v), rmax + 1e-12);
        EXPECT_LE(rmax, 1.0);
    }
}

TEST(Objective, UnbiasedWindowLeavesTraceTermOnly)
{
    const SystemParams sys{2, 16, 1.0, 0.5};
    const auto t = mse_objective({2, 3}, sys, ones(), uniform_reliability(), orthogonal_gram(2));
    EXPECT_EQ(t.term1, 0.0);
    EXPECT_NEAR(t.term2, 2.0 / 35.0, 1e-15);
    EXPECT_EQ(t.total, t.term2);
    EXPECT_NEAR(analytic_mse(t, sys), 16 * 0.5 * 2.0 / 35.0, 1e-15);
}

TEST(Objective, OrthogonalTraceIdentity)
{
    EXPECT_NEAR(orthogonal_gram(2)({2, 3}), 2.0 / 35.0, 1e-15);
    EXPECT_NEAR(orthogonal_gram(2)({2, 3}), 0.0571, 1e-4);
    EXPECT_THROW(orthogonal_gram(2)({0, 0}), IllPosedWindow);
}

TEST(Objective, TermSignsAndNoiseDependence)
{
    ChannelParams p = jakes(0.04);
    p.pdp = pdp_preset("exp-300ns");
    const auto eps = channel_eps(p, 15e3);
    const auto gram = monte_carlo_gram(2, 4, 100, 3);
    double prev_term1 = std::numeric_limits<double>::infinity();
    for (double s2 : {0.1, 0.5, 2.0, 8.0}) {
        const SystemParams sys{2, 16, 1.0, s2};
        const auto t = mse_objective({4, 3}, sys, eps, uniform_reliability(), gram);
        EXPECT_GE(t.term1, 0.0);
        EXPECT_GT(t.term2, 0.0);
        EXPECT_LT(t.term1, prev_term1);
        prev_term1 = t.term1;
    }
}

TEST(Objective, MonteCarloTraceIsSeededAndAboveOrthogonal)
{
    const auto a = monte_carlo_gram(2, 4, 200, 7);
    const auto b = monte_carlo_gram(2, 4, 200, 7);
    for (WindowSize w : {WindowSize{1, 1}, WindowSize{2, 3}, WindowSize{7, 6}}) {
        EXPECT_EQ(a(w), b(w));
        // Jensen: E[Tr(G^-1)] >= Tr(E[G]^-1) = N_t / M.
        EXPECT_GE(a(w), 2.0 / w.area());
        EXPECT_LT(a(w), 4.0 / w.area());
    }
}

TEST(OptimizeWindow, SingletonIsReturned)
{
    const SystemParams sys{2, 16, 1.0, 1.0};
    const auto o = optimize_window({4}, {2}, sys, channel_eps(jakes(0.05), 15e3), uniform_reliability(),
                                   monte_carlo_gram(2, 4, 50, 1));
    EXPECT_EQ(o.best, (WindowSize{4, 2}));
    EXPECT_EQ(o.table.size(), 1u);
}

TEST(OptimizeWindow, StaticChannelPicksLargestWindow)
{
    const SystemParams sys{2, 16, 1.0, 1.0};
    const auto o = optimize_window({1, 2, 4, 7}, {1, 2, 3, 6}, sys, ones(), uniform_reliability(),
                                   monte_carlo_gram(2, 4, 50, 1));
    EXPECT_EQ(o.best, (WindowSize{7, 6}));
    EXPECT_EQ(o.table.size(), 16u);
}

TEST(OptimizeWindow, TiesPreferSmallerAreaThenSmallerP)
{
    const SystemParams sys{2, 16, 1.0, 1.0};
    const GramEstimator flat = [](WindowSize w) {
        if (w.area() == 9)
            throw IllPosedWindow("excluded", 1e20);
        return 1.0;
    };
    const auto o = optimize_window({2, 1}, {1, 2}, sys, ones(), uniform_reliability(), flat);
    EXPECT_EQ(o.best, (WindowSize{1, 2}));  // (2,1) and (1,2) both have M = 15
    int invalid = 0;
    for (const auto& row : o.table)
        invalid += !row.valid;
    EXPECT_EQ(invalid, 1);
}

TEST(OptimizeWindow, AllCandidatesIllPosed)
{
    const SystemParams sys{4, 16, 1.0, 1.0};
    EXPECT_THROW(optimize_window({0}, {0}, sys, ones(), uniform_reliability(), orthogonal_gram(4)), PreconditionError);
    EXPECT_THROW(optimize_window({}, {1}, sys, ones(), uniform_reliability(), orthogonal_gram(4)), PreconditionError);
}

TEST(OptimizeWindow, LowSnrSelectsNoSmallerWindow)
{
    ChannelParams p;
    p.pdp = pdp_preset("exp-300ns");
    p.doppler_hz = doppler_from_velocity(120.0, 3.5e9);
    const auto eps = channel_eps(p, 15e3);
    const auto gram = monte_carlo_gram(2, 4, 200, 7);
    const auto at = [&](double snr_db) {
        const SystemParams sys{2, 16, 1.0, noise_variance_for_snr(snr_db, 2)};
        return optimize_window({1, 2, 4, 7}, {1, 2, 3, 6}, sys, eps, uniform_reliability(), gram).best;
    };
    EXPECT_GE(at(0.0).area(), at(9.0).area());
}

TEST(OptimizeWindow, ObjectiveCsvHasOneRowPerCandidate)
{
    const SystemParams sys{2, 16, 1.0, 1.0};
    const auto o = optimize_window({1, 2, 4, 7}, {1, 2, 3, 6}, sys, ones(), uniform_reliability(), orthogonal_gram(2));
    std::ostringstream os;
    write_objective_csv(os, o.table);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "P,Q,term1,term2,total");
    int rows = 0;
    while (std::getline(is, line))
        ++rows;
    EXPECT_EQ(rows, 16);
}

TEST(Reliability, DetectedProviderReadsAppsAndDefaultsOutside)
{
    const GridConfig g = small_grid(16, 2, 2);
    DetectionResult d;
    d.n_tx = 2;
    d.app.assign(g.n_re(), 0.25);
    d.app[static_cast<std::size_t>(3 * g.K + 4)] = 0.5;
    const auto r = detected_reliability(d, g, {3, 4});
    EXPECT_EQ(r(0, 0), 0.5);
    EXPECT_EQ(r(1, 1), 0.25);
    EXPECT_EQ(r(-10, 0), 1.0);
}
