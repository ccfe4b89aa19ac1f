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

#include <chanden/channel.hpp>

#include <gtest/gtest.h>

using namespace chanden;

namespace {

GridConfig small_grid(int K, int slots, int nr, int nt)
{
    GridConfig c;
    c.K = K;
    c.n_slots_total = slots;
    c.n_slots_train = 0;
    c.n_rx = nr;
    c.n_tx = nt;
    return c;
}

ChannelParams params(const std::string& pdp, double fd, std::uint64_t seed)
{
    ChannelParams p;
    p.pdp = pdp_preset(pdp);
    p.doppler_hz = fd;
    p.seed = seed;
    return p;
}

} // namespace

TEST(Pdp, PresetsAreNormalizedAndOrdered)
{
    for (const char* name : {"flat", "two-tap", "exp-100ns", "exp-300ns", "exp-1000ns"}) {
        const auto taps = pdp_preset(name);
        double total = 0.0;
        for (std::size_t l = 0; l < taps.size(); ++l) {
            total += taps[l].power;
            if (l > 0) {
                EXPECT_GT(taps[l].delay, taps[l - 1].delay);
            }
        }
        EXPECT_NEAR(total, 1.0, 1e-9) << name;
        ChannelParams p;
        p.pdp = taps;
        EXPECT_NO_THROW(p.validate());
    }
    EXPECT_THROW(pdp_preset("cdl-x"), ConfigError);
    EXPECT_THROW(pdp_preset("exp-abcns"), ConfigError);
}

TEST(Pdp, InvalidParametersAreRejected)
{
    ChannelParams p;
    p.pdp = {{0.0, 0.5}, {1e-7, 0.4}};
    EXPECT_THROW(p.validate(), ConfigError);
    p.pdp = {{1e-7, 0.5}, {0.0, 0.5}};
    EXPECT_THROW(p.validate(), ConfigError);
    p = ChannelParams{};
    p.doppler_hz = -1.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = ChannelParams{};
    p.n_oscillators = 8;
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(Doppler, VelocityConversion)
{
    // 120 km/h at 3.5 GHz: 33.33 m/s * 11.6747 cycles/m.
    EXPECT_NEAR(doppler_from_velocity(120.0, 3.5e9), 389.158, 1e-3);
    EXPECT_EQ(doppler_from_velocity(0.0, 3.5e9), 0.0);
}

TEST(Channel, StaticSingleTapIsConstant)
{
    const GridConfig g = small_grid(64, 2, 4, 2);
    const auto ch = generate_channel(g, params("flat", 0.0, 3));
    for (int r = 0; r < g.n_rx; ++r)
        for (int t = 0; t < g.n_tx; ++t) {
            const cplx ref = ch.at(0, 0, r, t);
            for (int n = 0; n < ch.n_symbols; ++n)
                for (int k = 0; k < ch.K; ++k)
                    ASSERT_NEAR(std::abs(ch.at(n, k, r, t) - ref), 0.0, 1e-12);
        }
}

TEST(Channel, StaticMultipathVariesOnlyInFrequency)
{
    const GridConfig g = small_grid(64, 1, 2, 2);
    const auto ch = generate_channel(g, params("exp-300ns", 0.0, 4));
    double spread = 0.0;
    for (int r = 0; r < g.n_rx; ++r)
        for (int t = 0; t < g.n_tx; ++t)
            for (int k = 0; k < ch.K; ++k) {
                for (int n = 1; n < ch.n_symbols; ++n)
                    ASSERT_NEAR(std::abs(ch.at(n, k, r, t) - ch.at(0, k, r, t)), 0.0, 1e-12);
                spread = std::max(spread, std::abs(ch.at(0, k, r, t) - ch.at(0, 0, r, t)));
            }
    EXPECT_GT(spread, 1e-3);
}

TEST(Channel, PerElementVarianceMatchesSigmaH2)
{
    double acc = 0.0;
    std::size_t count = 0;
    for (std::uint64_t seed = 1; seed <= 4; ++seed) {
        ChannelParams p = params("exp-300ns", 389.0, seed);
        p.sigma_h2 = 2.0;
        const auto ch = generate_channel(small_grid(512, 2, 16, 2), p);
        for (const cplx& h : ch.cfr) {
            ASSERT_TRUE(std::isfinite(h.real()) && std::isfinite(h.imag()));
            acc += std::norm(h);
        }
        count += ch.cfr.size();
    }
    ASSERT_GE(count, 100000u);
    EXPECT_NEAR(acc / static_cast<double>(count), 2.0, 0.2);
}

TEST(Channel, DeterministicAndIndependentOfWorkerCount)
{
    const GridConfig g = small_grid(64, 2, 4, 2);
    const auto p = params("exp-300ns", 389.0, 9);
    const auto a = generate_channel(g, p, 1);
    const auto b = generate_channel(g, p, 3);
    EXPECT_EQ(a.cfr, b.cfr);
    const auto c = generate_channel(g, params("exp-300ns", 389.0, 10), 1);
    EXPECT_NE(a.cfr, c.cfr);
}

// Empirical E[H[n+p,k+q] H*[n,k]] over many realizations against the
// closed-form separable correlation.
TEST(Channel, EmpiricalCorrelationMatchesModel)
{
    const GridConfig g = small_grid(16, 1, 4, 2);
    constexpr int kP = 7;
    constexpr int kQ = 6;
    const int realizations = 1250;  // x 8 antenna pairs = 10^4 channel draws
    const ChannelParams base = params("exp-300ns", 389.0, 0);
    std::vector<cplx> acc((2 * kP + 1) * (2 * kQ + 1));
    std::vector<double> cnt(acc.size(), 0.0);
    for (int s = 0; s < realizations; ++s) {
        ChannelParams p = base;
        p.seed = derive_seed(77, s);
        const auto ch = generate_channel(g, p, 1);
        for (int r = 0; r < g.n_rx; ++r)
            for (int t = 0; t < g.n_tx; ++t)
                for (int dp = -kP; dp <= kP; ++dp)
                    for (int dq = -kQ; dq <= kQ; ++dq) {
                        const std::size_t i = static_cast<std::size_t>((dp + kP) * (2 * kQ + 1) + dq + kQ);
                        // A few anchors per realization keep the run short.
                        for (int n : {7, 3}) {
                            for (int k : {6, 9}) {
                                const int n2 = n + dp;
                                const int k2 = k + dq;
                                if (n2 < 0 || n2 >= ch.n_symbols || k2 < 0 || k2 >= ch.K)
                                    continue;
                                acc[i] += ch.at(n2, k2, r, t) * std::conj(ch.at(n, k, r, t));
                                cnt[i] += 1.0;
                            }
                        }
                    }
    }
    double worst = 0.0;
    for (int dp = -kP; dp <= kP; ++dp)
        for (int dq = -kQ; dq <= kQ; ++dq) {
            const std::size_t i = static_cast<std::size_t>((dp + kP) * (2 * kQ + 1) + dq + kQ);
            ASSERT_GT(cnt[i], 0.0);
            const cplx emp = acc[i] / cnt[i];
            const cplx model = correlation_coeff(dp, dq, base, g.delta_f);
            worst = std::max(worst, std::abs(emp - model));
        }
    EXPECT_LT(worst, 0.05);
}

TEST(Correlation, ClosedFormProperties)
{
    const ChannelParams p = params("exp-300ns", 389.0, 1);
    EXPECT_NEAR(std::abs(correlation_coeff(0, 0, p, 15e3) - cplx(1.0, 0.0)), 0.0, 1e-12);
    for (int dp = -7; dp <= 7; ++dp)
        for (int dq = -6; dq <= 6; ++dq) {
            const cplx e = correlation_coeff(dp, dq, p, 15e3);
            EXPECT_LE(std::abs(e), 1.0 + 1e-12);
            const cplx mirrored = correlation_coeff(-dp, -dq, p, 15e3);
            EXPECT_NEAR(std::abs(mirrored - std::conj(e)), 0.0, 1e-12);
        }
    const ChannelParams still = params("two-tap", 0.0, 1);
    for (int dp = -10; dp <= 10; ++dp)
        EXPECT_NEAR(std::abs(correlation_coeff(dp, 0, still, 15e3)), 1.0, 1e-12);
}

TEST(ApplyChannel, NoiselessLimitIsHx)
{
    const GridConfig g = small_grid(128, 1, 4, 2);
    const auto grid = build_grid(g, 1);
    const auto ch = generate_channel(g, params("exp-300ns", 389.0, 2));
    const auto y = apply_channel(grid, ch, {1e-12, 5});
    for (int n = 0; n < g.n_symbols(); ++n)
        for (int k = 0; k < g.K; ++k)
            for (int r = 0; r < g.n_rx; ++r) {
                cplx hx{};
                for (int t = 0; t < g.n_tx; ++t)
                    hx += ch.at(n, k, r, t) * grid.symbol(n, k, t);
                ASSERT_NEAR(std::abs(y.at(n, k, r) - hx), 0.0, 1e-5);
            }
}

TEST(ApplyChannel, NoiseOnlyPowerAndWhiteness)
{
    const GridConfig g = small_grid(512, 14, 2, 1);
    auto grid = build_grid(g, 1);
    std::fill(grid.tx_symbols.begin(), grid.tx_symbols.end(), cplx{});
    const auto ch = generate_channel(g, params("flat", 0.0, 2));
    const double s2 = 0.37;
    const auto y = apply_channel(grid, ch, {s2, 8});
    ASSERT_GE(g.n_re(), 100000u);

    double power = 0.0;
    cplx c_k{}, c_n{}, c_r{};
    std::size_t nk = 0, nn = 0;
    for (int n = 0; n < g.n_symbols(); ++n)
        for (int k = 0; k < g.K; ++k) {
            for (int r = 0; r < g.n_rx; ++r)
                power += std::norm(y.at(n, k, r));
            c_r += y.at(n, k, 0) * std::conj(y.at(n, k, 1));
            if (k + 1 < g.K) {
                c_k += y.at(n, k + 1, 0) * std::conj(y.at(n, k, 0));
                ++nk;
            }
            if (n + 1 < g.n_symbols()) {
                c_n += y.at(n + 1, k, 0) * std::conj(y.at(n, k, 0));
                ++nn;
            }
        }
    const double per_re = power / static_cast<double>(g.n_re()) / g.n_rx;
    EXPECT_GE(per_re, 0.98 * s2);
    EXPECT_LE(per_re, 1.02 * s2);
    EXPECT_LT(std::abs(c_k) / static_cast<double>(nk) / s2, 0.02);
    EXPECT_LT(std::abs(c_n) / static_cast<double>(nn) / s2, 0.02);
    EXPECT_LT(std::abs(c_r) / static_cast<double>(g.n_re()) / s2, 0.02);
}

TEST(ApplyChannel, SeededOutputIsBitIdentical)
{
    const GridConfig g = small_grid(64, 2, 4, 2);
    const auto grid = build_grid(g, 3);
    const auto ch = generate_channel(g, params("exp-300ns", 100.0, 4));
    const auto a = apply_channel(grid, ch, {0.5, 6});
    const auto b = apply_channel(grid, ch, {0.5, 6});
    EXPECT_EQ(a.y, b.y);
}

TEST(ApplyChannel, ErrorsOnShapeMismatchAndBadNoise)
{
    const GridConfig g = small_grid(64, 1, 4, 2);
    const auto grid = build_grid(g, 3);
    const auto other = generate_channel(small_grid(64, 1, 2, 2), params("flat", 0.0, 1));
    EXPECT_THROW(apply_channel(grid, other, {1.0, 1}), ShapeError);
    const auto ch = generate_channel(g, params("flat", 0.0, 1));
    EXPECT_THROW(apply_channel(grid, ch, {0.0, 1}), ConfigError);
}
