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

#include <chanden/pipeline.hpp>

#include <gtest/gtest.h>

#include <sstream>

using namespace chanden;

namespace {

// Quarter-size scenario: 256 subcarriers, 8 receive antennas, 2 + 2 slots,
// stride-4 lattice in frequency (64 points, one 58-wide window).
ScenarioConfig small_scenario()
{
    ScenarioConfig c;
    c.grid.K = 256;
    c.grid.n_rx = 8;
    c.grid.n_slots_total = 4;
    c.grid.n_slots_train = 2;
    c.sub = {1, 4, 8, 58};
    c.window.gram_draws = 50;
    c.snr_db = {0.0};
    c.jobs = 1;
    return c;
}

// Independent symbol decisions with perfect CSI: per-RE regularized
// zero-forcing solve and quadrant decisions (QPSK only).
double oracle_ser(const ScenarioConfig& cfg, std::size_t snr_index, int trial)
{
    const GridConfig& g = cfg.grid;
    const std::uint64_t seed = trial_seed(cfg, snr_index, trial);
    const ChannelParams params = make_channel_params(cfg.test, g, cfg.carrier_hz, derive_seed(seed, 20), cfg.n_oscillators);
    const LinkRealization link = simulate_link(g, params, cfg.snr_db[snr_index], derive_seed(seed, 21), 1);
    const int n_train = g.n_slots_train * g.n_ofdm;
    std::size_t errors = 0;
    std::size_t total = 0;
    for (const RE& re : link.grid.data_index_set) {
        if (re.n < n_train)
            continue;
        Eigen::MatrixXcd H(g.n_rx, g.n_tx);
        Eigen::VectorXcd y(g.n_rx);
        for (int r = 0; r < g.n_rx; ++r) {
            y(r) = link.received.at(re.n, re.k, r);
            for (int t = 0; t < g.n_tx; ++t)
                H(r, t) = link.channel.at(re.n, re.k, r, t);
        }
        const Eigen::MatrixXcd A = H.adjoint() * H + link.sigma2 * Eigen::MatrixXcd::Identity(g.n_tx, g.n_tx);
        const Eigen::VectorXcd x = A.ldlt().solve(H.adjoint() * y);
        for (int t = 0; t < g.n_tx; ++t) {
            const cplx tx = link.grid.symbol(re.n, re.k, t);
            const bool same = (x(t).real() > 0) == (tx.real() > 0) && (x(t).imag() > 0) == (tx.imag() > 0);
            errors += same ? 0 : 1;
            ++total;
        }
    }
    return static_cast<double>(errors) / static_cast<double>(total);
}

} // namespace

TEST(Methods, NamesRoundTrip)
{
    for (const auto& [m, name] : kMethodNames)
        EXPECT_EQ(method_from_string(name), m);
    EXPECT_EQ(to_string(Method::MetaProposed), "meta-proposed");
    EXPECT_THROW(method_from_string("magic-ce"), ConfigError);
    EXPECT_TRUE(adapts_online(Method::TransferTrueCfr));
    EXPECT_FALSE(adapts_online(Method::MetaPretrained));
    EXPECT_TRUE(uses_denoiser(Method::MetaPretrained));
    EXPECT_FALSE(uses_denoiser(Method::DataAidedCe));
}

TEST(Metrics, NmseClosedForms)
{
    Rng rng(1);
    std::vector<cplx> h(200);
    for (auto& v : h)
        v = complex_gaussian(rng, 1.0);
    std::vector<cplx> est(h);
    EXPECT_EQ(nmse_db(est, h), kNmseFloorDb);
    for (std::size_t i = 0; i < h.size(); ++i)
        est[i] = 1.1 * h[i];
    EXPECT_NEAR(nmse_db(est, h), -20.0, 1e-9);
    std::fill(est.begin(), est.end(), cplx{});
    EXPECT_NEAR(nmse_db(est, h), 0.0, 1e-12);
    EXPECT_THROW(nmse_db(h, std::vector<cplx>(200)), PreconditionError);
    EXPECT_THROW(nmse_db(h, std::vector<cplx>(3, cplx{1.0, 0.0})), ShapeError);
}

TEST(Metrics, FrameAndSymbolErrorCounting)
{
    std::vector<std::uint8_t> tx(40, 0);  // 4 frames of 10 bits, 5 QPSK symbols each
    auto rx = tx;
    auto e = frame_error_metrics(rx, tx, 10, 2);
    EXPECT_EQ(e.fer, 0.0);
    EXPECT_EQ(e.ser, 0.0);
    EXPECT_EQ(e.frames, 4u);
    EXPECT_EQ(e.symbols, 20u);
    rx[12] = 1;
    rx[13] = 1;  // both bits of one symbol in frame 1
    e = frame_error_metrics(rx, tx, 10, 2);
    EXPECT_DOUBLE_EQ(e.fer, 0.25);
    EXPECT_DOUBLE_EQ(e.ser, 1.0 / 20.0);
    rx[39] = 1;
    e = frame_error_metrics(rx, tx, 10, 2);
    EXPECT_DOUBLE_EQ(e.fer, 0.5);
    EXPECT_DOUBLE_EQ(e.ser, 2.0 / 20.0);
    EXPECT_THROW(frame_error_metrics(rx, tx, 7, 2), ShapeError);
    EXPECT_THROW(frame_error_metrics(rx, std::vector<std::uint8_t>(38), 10, 2), ShapeError);
}

TEST(Metrics, BinomialBitFlipsMatchClosedForms)
{
    const double p = 0.002;
    const std::size_t frame_bits = 200;
    const std::size_t frames = 2000;
    Rng rng(5);
    std::bernoulli_distribution flip(p);
    std::vector<std::uint8_t> tx(frame_bits * frames);
    for (auto& b : tx)
        b = static_cast<std::uint8_t>(rng() & 1);
    auto rx = tx;
    for (auto& b : rx)
        if (flip(rng))
            b ^= 1;
    const auto e = frame_error_metrics(rx, tx, frame_bits, 2);
    const double ser = 1.0 - (1.0 - p) * (1.0 - p);
    const double fer = 1.0 - std::pow(1.0 - p, static_cast<double>(frame_bits));
    EXPECT_NEAR(e.ser, ser, 4.0 * std::sqrt(ser * (1 - ser) / static_cast<double>(e.symbols)));
    EXPECT_NEAR(e.fer, fer, 4.0 * std::sqrt(fer * (1 - fer) / static_cast<double>(frames)));
}

TEST(Metrics, MedianAndPooledSummary)
{
    EXPECT_EQ(median_of({3.0, 1.0, 2.0}), 2.0);
    EXPECT_EQ(median_of({4.0, 1.0, 2.0, 3.0}), 2.5);
    EXPECT_TRUE(std::isnan(median_of({})));

    std::vector<TrialMetrics> rows(3);
    rows[0] = {Method::ConventionalCe, 0.0, 0, -5.0, 0.5, 0.1, 10, 100, {}};
    rows[1] = {Method::ConventionalCe, 0.0, 1, -7.0, 0.0, 0.0, 30, 300, {}};
    rows[2] = {Method::PerfectCsir, 0.0, 0, -100.0, 0.0, 0.0, 10, 100, {}};
    const auto s = summarize(rows, {Method::ConventionalCe, Method::PerfectCsir}, {0.0, 3.0});
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0].trials, 2);
    EXPECT_DOUBLE_EQ(s[0].nmse_db_mean, -6.0);
    EXPECT_DOUBLE_EQ(s[0].fer, 5.0 / 40.0);
    EXPECT_DOUBLE_EQ(s[0].ser, 10.0 / 400.0);
    EXPECT_EQ(s[1].method, Method::PerfectCsir);

    std::ostringstream os;
    write_summary_csv(os, s);
    EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "method,snr_db,trials,nmse_db_mean,nmse_db_median,fer,ser,frames,symbols,P,Q");
    EXPECT_NE(os.str().find("conventional-ce,0,2,-6.000000,-6.000000,0.125000,0.025000,40,400"), std::string::npos);
}

TEST(Lattice, UnitStrideRoundTripIsExact)
{
    GridConfig g;
    g.K = 16;
    g.n_rx = 2;
    g.n_slots_total = 1;
    g.n_slots_train = 0;
    CfrEstimateMap m(14, 16, 2, 2, Provenance::Interpolated);
    Rng rng(2);
    for (auto& v : m.est)
        v = complex_gaussian(rng, 1.0);
    const auto layout = subsample_grid(0, 14, 16, {1, 1, 14, 16});
    CfrEstimateMap out(14, 16, 2, 2, Provenance::Interpolated);
    reconstruct_from_lattice(out, layout, lattice_from_map(m, layout), 0, 14);
    EXPECT_EQ(out.est, m.est);
}

TEST(Lattice, AffineFieldSurvivesSubsampling)
{
    CfrEstimateMap m(14, 32, 1, 1, Provenance::Interpolated);
    for (int n = 0; n < 14; ++n)
        for (int k = 0; k < 32; ++k)
            m.at(n, k, 0, 0) = cplx(0.5 + 0.1 * n - 0.02 * k, 0.03 * k);
    const auto layout = subsample_grid(0, 14, 32, {2, 4, 7, 8});
    CfrEstimateMap out(14, 32, 1, 1, Provenance::Interpolated);
    reconstruct_from_lattice(out, layout, lattice_from_map(m, layout), 0, 14);
    // Inside the lattice hull: times 0..12, freqs 0..28.
    for (int n = 0; n <= 12; ++n)
        for (int k = 0; k <= 28; ++k)
            ASSERT_NEAR(std::abs(out.at(n, k, 0, 0) - m.at(n, k, 0, 0)), 0.0, 1e-12);
}

TEST(Lattice, IdentityDenoiserKeepsTheMap)
{
    CfrEstimateMap m(14, 16, 2, 2, Provenance::Interpolated);
    Rng rng(3);
    for (auto& v : m.est)
        v = complex_gaussian(rng, 1.0);
    ModelState zero;
    zero.spec = ModelSpec{};
    zero.theta.assign(zero.spec.parameter_count(), 0.0f);
    const auto layout = subsample_grid(0, 14, 16, {1, 1, 14, 16});
    const auto out = denoise_and_reconstruct(m, layout, zero, 0, 14);
    EXPECT_EQ(out.provenance, Provenance::Denoised);
    for (std::size_t i = 0; i < m.est.size(); ++i)
        ASSERT_NEAR(std::abs(out.est[i] - m.est[i]), 0.0, 1e-6 * std::abs(m.est[i]) + 1e-7);
}

TEST(Trial, PerfectCsirFloorsNmseAndMatchesOracleSer)
{
    auto cfg = small_scenario();
    cfg.methods = {Method::PerfectCsir};
    cfg.snr_db = {0.0, 6.0};
    for (std::size_t s = 0; s < 2; ++s) {
        const auto rows = run_trial(cfg, s, 0, {});
        ASSERT_EQ(rows.size(), 1u);
        EXPECT_EQ(rows[0].nmse_db, kNmseFloorDb);
        EXPECT_EQ(rows[0].frames, 2u);  // one frame per inference slot
        EXPECT_NEAR(rows[0].ser, oracle_ser(cfg, s, 0), 1e-12);
    }
}

TEST(Trial, ConventionalIsAccurateOnStaticFlatChannel)
{
    auto cfg = small_scenario();
    cfg.methods = {Method::ConventionalCe};
    cfg.test = {"flat", "flat", 0.0};
    cfg.snr_db = {60.0};
    const auto rows = run_trial(cfg, 0, 0, {});
    EXPECT_LT(rows[0].nmse_db, -40.0);
    EXPECT_EQ(rows[0].ser, 0.0);
}

TEST(Trial, DataAidedBeatsConventionalAtZeroDb)
{
    auto cfg = small_scenario();
    cfg.methods = {Method::ConventionalCe, Method::DataAidedCe};
    cfg.test = {"v60", "exp-300ns", 60.0};
    cfg.trials = 20;
    const auto rep = run_online_procedure(cfg, {});
    ASSERT_EQ(rep.trials.size(), 40u);
    int wins = 0;
    for (std::size_t i = 0; i < rep.trials.size(); i += 2) {
        ASSERT_EQ(rep.trials[i].method, Method::ConventionalCe);
        wins += rep.trials[i + 1].nmse_db < rep.trials[i].nmse_db;
    }
    EXPECT_GE(wins, 15);
    EXPECT_LT(rep.summary[1].nmse_db_mean, rep.summary[0].nmse_db_mean);
}

TEST(Trial, ZeroStepAdaptationEqualsPretrained)
{
    auto cfg = small_scenario();
    cfg.methods = {Method::TransferPretrained, Method::TransferProposed, Method::TransferTrueCfr};
    cfg.transfer.steps = 0;
    cfg.transfer.samples = 7;
    PretrainedModels models;
    models.transfer = init_model(ModelSpec{}, 4);
    const auto rows = run_trial(cfg, 0, 0, models);
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[1].nmse_db, rows[0].nmse_db);
    EXPECT_EQ(rows[2].nmse_db, rows[0].nmse_db);
    EXPECT_EQ(rows[0].online_samples, 0u);
    EXPECT_EQ(rows[1].online_samples, 7u);
}

TEST(Procedure, MissingCheckpointsAndBadConfigs)
{
    auto cfg = small_scenario();
    cfg.methods = {Method::MetaProposed};
    EXPECT_THROW(run_online_procedure(cfg, {}), PreconditionError);
    cfg.methods = {Method::PerfectCsir};
    cfg.trials = 0;
    EXPECT_THROW(run_online_procedure(cfg, {}), ConfigError);
    cfg = small_scenario();
    cfg.methods = {Method::TransferProposed};
    cfg.grid.n_slots_train = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Procedure, ReproducibleAcrossWorkerCounts)
{
    auto cfg = small_scenario();
    cfg.methods = {Method::ConventionalCe, Method::DataAidedCe, Method::TransferProposed};
    cfg.snr_db = {0.0, 9.0};
    cfg.trials = 2;
    cfg.transfer.steps = 2;
    PretrainedModels models;
    models.transfer = init_model(ModelSpec{}, 6);
    const auto a = run_online_procedure(cfg, models);
    cfg.jobs = 3;
    const auto b = run_online_procedure(cfg, models);
    std::ostringstream sa;
    std::ostringstream sb;
    write_trials_csv(sa, a.trials);
    write_trials_csv(sb, b.trials);
    EXPECT_EQ(sa.str(), sb.str());
    EXPECT_EQ(a.trials.size(), 12u);
    EXPECT_EQ(a.windows.size(), 2u);
    // Window table: larger or equal area at the lower SNR.
    EXPECT_GE(a.windows.at(0.0).best.area(), a.windows.at(9.0).best.area());
}
