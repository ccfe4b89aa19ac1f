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

#include <chanden/resource_grid.hpp>

#include <gtest/gtest.h>

#include <bitset>
#include <set>

using namespace chanden;

namespace {

GridConfig one_slot()
{
    GridConfig c;
    c.n_slots_total = 1;
    c.n_slots_train = 0;
    return c;
}

} // namespace

TEST(Constellation, QpskPointsHaveUnitModulus)
{
    const Constellation q(4);
    for (const cplx& p : q.points()) {
        EXPECT_NEAR(std::abs(p), 1.0, 1e-15);
        EXPECT_NEAR(std::abs(p.real()), 1.0 / std::sqrt(2.0), 1e-15);
        EXPECT_NEAR(std::abs(p.imag()), 1.0 / std::sqrt(2.0), 1e-15);
    }
}

TEST(Constellation, QpskBitPairsMapToDistinctGrayNeighbours)
{
    const std::uint8_t pairs[4][2] = {{0, 0}, {0, 1}, {1, 1}, {1, 0}};
    std::vector<cplx> pts;
    for (const auto& b : pairs) {
        const auto s = qam_modulate(std::span<const std::uint8_t>(b, 2), 4);
        ASSERT_EQ(s.size(), 1u);
        pts.push_back(s[0]);
    }
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = i + 1; j < 4; ++j)
            EXPECT_GT(std::abs(pts[i] - pts[j]), 1.0);
    // Consecutive entries of the Gray cycle are adjacent (distance sqrt2).
    for (std::size_t i = 0; i < 4; ++i)
        EXPECT_NEAR(std::abs(pts[i] - pts[(i + 1) % 4]), std::sqrt(2.0), 1e-12);
}

TEST(Constellation, NearestNeighboursDifferInOneBit)
{
    for (int order : {4, 16, 64}) {
        const Constellation c(order);
        double dmin = std::numeric_limits<double>::infinity();
        for (int i = 0; i < order; ++i)
            for (int j = i + 1; j < order; ++j)
                dmin = std::min(dmin, std::abs(c.point(i) - c.point(j)));
        int checked = 0;
        for (int i = 0; i < order; ++i)
            for (int j = i + 1; j < order; ++j)
                if (std::abs(c.point(i) - c.point(j)) < dmin * 1.0001) {
                    EXPECT_EQ(std::bitset<8>(static_cast<unsigned>(i ^ j)).count(), 1u) << order << ": " << i << "," << j;
                    ++checked;
                }
        EXPECT_GT(checked, 0);
    }
}

TEST(Constellation, UnitAverageEnergy)
{
    for (int order : {4, 16, 64}) {
        const Constellation c(order);
        double e = 0.0;
        for (const cplx& p : c.points())
            e += std::norm(p);
        EXPECT_NEAR(e / order, 1.0, 1e-12) << order;
    }
}

TEST(Constellation, UnsupportedOrderThrows)
{
    EXPECT_THROW(Constellation(8), ConfigError);
    const std::vector<std::uint8_t> bits(6, 0);
    EXPECT_THROW(qam_modulate(bits, 32), ConfigError);
}

TEST(Constellation, ModulateDemodulateRoundTrip)
{
    Rng rng(5);
    for (int order : {4, 16, 64}) {
        const int bps = Constellation(order).bits_per_symbol();
        std::vector<std::uint8_t> bits(static_cast<std::size_t>(bps) * 500);
        for (auto& b : bits)
            b = static_cast<std::uint8_t>(rng() & 1);
        const auto s = qam_modulate(bits, order);
        const auto hd = qam_demodulate_hard(s, order);
        EXPECT_EQ(hd.bits, bits);
        for (std::size_t i = 0; i < s.size(); ++i)
            EXPECT_EQ(hd.symbols[i], s[i]);
    }
}

TEST(Constellation, ExactPointDecodesToItself)
{
    const Constellation c(16);
    for (int i = 0; i < 16; ++i)
        EXPECT_EQ(c.nearest(c.point(i)), i);
}

TEST(Constellation, OriginTieGoesToLowestIndex)
{
    const std::vector<cplx> z{cplx{0.0, 0.0}};
    const auto hd = qam_demodulate_hard(z, 4);
    EXPECT_EQ(hd.indices[0], 0);
    EXPECT_EQ(hd.symbols[0], Constellation(4).point(0));
}

TEST(Constellation, VanishingNoiseGivesNoErrors)
{
    Rng rng(11);
    const Constellation c(16);
    std::uniform_int_distribution<int> pick(0, 15);
    int errors = 0;
    for (int i = 0; i < 10000; ++i) {
        const int idx = pick(rng);
        const cplx z = c.point(idx) + complex_gaussian(rng, 1e-8);
        errors += c.nearest(z) != idx;
    }
    EXPECT_EQ(errors, 0);
}

TEST(Grid, CombPilotCountOnOneSymbol)
{
    GridConfig c = one_slot();
    c.K = 512;
    c.n_tx = 1;
    c.dmrs_symbol_indices = {2};
    c.dmrs_comb_stride = 2;
    const auto g = build_grid(c, 1);
    std::size_t on_symbol = 0;
    for (const RE& re : g.pilot_index_set)
        on_symbol += re.n == 2;
    EXPECT_EQ(on_symbol, 256u);
    EXPECT_EQ(g.pilot_index_set.size(), 256u);
}

TEST(Grid, PilotAndDataSetsPartitionEachSlot)
{
    GridConfig c = one_slot();
    c.n_slots_total = 3;
    c.n_slots_train = 1;
    const auto g = build_grid(c, 3);
    const std::size_t per_slot = 512u * 14u;
    EXPECT_EQ(g.pilot_index_set.size() + g.data_index_set.size(), per_slot * 3);
    std::vector<int> hits(c.n_re(), 0);
    for (const RE& re : g.pilot_index_set) {
        ++hits[g.re_index(re.n, re.k)];
        EXPECT_TRUE(g.pilot(re.n, re.k));
        EXPECT_TRUE(is_dmrs_symbol(c, re.n));
    }
    for (std::size_t i = 0; i < g.data_index_set.size(); ++i) {
        const RE& re = g.data_index_set[i];
        ++hits[g.re_index(re.n, re.k)];
        EXPECT_FALSE(g.pilot(re.n, re.k));
        EXPECT_EQ(g.data_slot[g.re_index(re.n, re.k)], static_cast<int>(i));
    }
    for (int h : hits)
        ASSERT_EQ(h, 1);
}

TEST(Grid, CombPortsAndSilentSubcarriers)
{
    const auto g = build_grid(one_slot(), 2);
    for (const RE& re : g.pilot_index_set) {
        const int port = g.pilot_port[g.re_index(re.n, re.k)];
        ASSERT_EQ(port, re.k % 2);
        EXPECT_NEAR(std::abs(g.symbol(re.n, re.k, port)), 1.0, 1e-15);
        EXPECT_EQ(g.symbol(re.n, re.k, 1 - port), cplx{});
        EXPECT_EQ(g.symbol(re.n, re.k, port), dmrs_value(0, re.n, re.k));
    }
}

TEST(Grid, TransmittedSymbolPowerIsUnit)
{
    GridConfig c = one_slot();
    c.n_slots_total = 2;
    c.n_slots_train = 1;
    c.constellation = 16;
    c.K = 2048;
    const auto g = build_grid(c, 9);
    for (int slot = 0; slot < 2; ++slot) {
        double e = 0.0;
        std::size_t count = 0;
        for (int s = 0; s < c.n_ofdm; ++s)
            for (int k = 0; k < c.K; ++k)
                for (int t = 0; t < c.n_tx; ++t) {
                    const cplx x = g.symbol(slot * c.n_ofdm + s, k, t);
                    if (x == cplx{})
                        continue;
                    e += std::norm(x);
                    ++count;
                }
        ASSERT_GE(count, 10000u);
        const double mean = e / static_cast<double>(count);
        EXPECT_GE(mean, 0.99);
        EXPECT_LE(mean, 1.01);
    }
}

TEST(Grid, SameSeedSameGridOtherSeedDifferentData)
{
    const GridConfig c = one_slot();
    const auto a = build_grid(c, 42);
    const auto b = build_grid(c, 42);
    const auto d = build_grid(c, 43);
    EXPECT_EQ(a.tx_symbols, b.tx_symbols);
    EXPECT_EQ(a.tx_bits, b.tx_bits);
    EXPECT_NE(a.tx_bits, d.tx_bits);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < a.tx_symbols.size(); ++i)
        differing += a.tx_symbols[i] != d.tx_symbols[i];
    EXPECT_GE(differing, 1u);
}

TEST(Grid, DataBitsModulateToDataSymbols)
{
    const GridConfig c = one_slot();
    const auto g = build_grid(c, 4);
    const auto sym = qam_modulate(g.tx_bits, c.constellation);
    ASSERT_EQ(sym.size(), g.data_index_set.size() * static_cast<std::size_t>(c.n_tx));
    for (std::size_t i = 0; i < g.data_index_set.size(); ++i)
        for (int t = 0; t < c.n_tx; ++t)
            EXPECT_EQ(sym[i * 2 + static_cast<std::size_t>(t)], g.symbol(g.data_index_set[i].n, g.data_index_set[i].k, t));
}

TEST(Grid, InvalidConfigurationsAreRejected)
{
    GridConfig c;
    c.dmrs_comb_stride = 3;  // 512 % 3 != 0
    EXPECT_THROW(build_grid(c, 1), ConfigError);
    c = GridConfig{};
    c.dmrs_symbol_indices = {2, 14};
    EXPECT_THROW(build_grid(c, 1), ConfigError);
    c = GridConfig{};
    c.n_slots_train = 5;  // more than the inference period
    EXPECT_THROW(build_grid(c, 1), ConfigError);
    c = GridConfig{};
    c.K = 0;
    EXPECT_THROW(build_grid(c, 1), ConfigError);
    c = GridConfig{};
    c.n_tx = 3;  // comb 2 has two offsets
    EXPECT_THROW(build_grid(c, 1), ConfigError);
}
