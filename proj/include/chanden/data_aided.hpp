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

#ifndef CHANDEN_DATA_AIDED_HPP
#define CHANDEN_DATA_AIDED_HPP

#include <chanden/channel.hpp>
#include <chanden/common.hpp>
#include <chanden/estimation.hpp>
#include <chanden/resource_grid.hpp>

#include <Eigen/Dense>

#include <cstdio>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace chanden {

// Half-ranges of the virtual-pilot window: time [-p, p], frequency [-q, q].
struct WindowSize {
    int p = 0;
    int q = 0;

    int area() const { return (2 * p + 1) * (2 * q + 1); }
    friend bool operator==(const WindowSize&, const WindowSize&) = default;
};

inline constexpr double kMaxGramCondition = 1e12;

struct IllPosedWindow : PreconditionError {
    double condition;
    IllPosedWindow(const std::string& what, double cond) : PreconditionError(what), condition(cond) {}
};

// Received signals and virtual pilots gathered around one center RE.
// Columns follow (p, q) in row-major order over [-P,P] x [-Q,Q] with
// out-of-range coordinates dropped.
struct WindowSample {
    CMatrix y_mat;                     // N_r x M
    CMatrix x_mat;                     // N_t x M
    std::vector<double> reliabilities; // M
    std::vector<cplx> eps;             // M, empty unless a provider was given
    std::vector<RE> offsets;           // (p, q) per column

    Eigen::Index columns() const { return x_mat.cols(); }
};

using EpsProvider = std::function<cplx(int p, int q)>;
using ReliabilityProvider = std::function<double(int p, int q)>;

// Symbol rows outside [n_begin, n_end) are treated as unavailable; the
// online generator uses this to keep label windows inside the training
// period.
inline WindowSample collect_window(const ReceivedGrid& y, const DetectionResult& det, const GridConfig& cfg, RE center,
                                   WindowSize w, int n_begin, int n_end, const EpsProvider& eps = {})
{
    if (center.n < 0 || center.n >= cfg.n_symbols() || center.k < 0 || center.k >= cfg.K)
        throw PreconditionError("window center outside the grid");
    if (w.p < 0 || w.q < 0)
        throw PreconditionError("window half-ranges must be non-negative");
    n_begin = std::max(n_begin, 0);
    n_end = std::min(n_end, cfg.n_symbols());
    std::vector<RE> cols;
    cols.reserve(static_cast<std::size_t>(w.area()));
    for (int p = -w.p; p <= w.p; ++p) {
        const int n = center.n + p;
        if (n < n_begin || n >= n_end)
            continue;
        for (int q = -w.q; q <= w.q; ++q) {
            const int k = center.k + q;
            if (k < 0 || k >= cfg.K)
                continue;
            cols.push_back({p, q});
        }
    }
    const auto m = static_cast<Eigen::Index>(cols.size());
    if (m < cfg.n_tx)
        throw IllPosedWindow("window holds " + std::to_string(m) + " columns, fewer than N_t",
                             std::numeric_limits<double>::infinity());
    WindowSample s;
    s.y_mat.resize(cfg.n_rx, m);
    s.x_mat.resize(cfg.n_tx, m);
    s.reliabilities.resize(cols.size());
    s.offsets = cols;
    if (eps)
        s.eps.resize(cols.size());
    for (Eigen::Index c = 0; c < m; ++c) {
        const RE off = cols[static_cast<std::size_t>(c)];
        const int n = center.n + off.n;
        const int k = center.k + off.k;
        const std::size_t re = static_cast<std::size_t>(n) * static_cast<std::size_t>(cfg.K) + static_cast<std::size_t>(k);
        const cplx* yv = y.re_vector(n, k);
        for (int r = 0; r < cfg.n_rx; ++r)
            s.y_mat(r, c) = yv[r];
        const auto xs = det.symbols_at(re);
        for (int t = 0; t < cfg.n_tx; ++t)
            s.x_mat(t, c) = xs[static_cast<std::size_t>(t)];
        s.reliabilities[static_cast<std::size_t>(c)] = det.app[re];
        if (eps)
            s.eps[static_cast<std::size_t>(c)] = eps(off.n, off.k);
    }
    return s;
}

inline double hermitian_condition(const CMatrix& gram)
{
    const Eigen::SelfAdjointEigenSolver<CMatrix> es(gram, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    if (!(lo > 0.0))
        return std::numeric_limits<double>::infinity();
    return hi / lo;
}

// H~ = Y X^H (X X^H)^-1. Gram matrices with condition number >= 1e12 are
// rejected.
inline CMatrix da_ls_estimate(const WindowSample& w)
{
    const CMatrix gram = w.x_mat * w.x_mat.adjoint();
    const double cond = hermitian_condition(gram);
    if (!(cond < kMaxGramCondition))
        throw IllPosedWindow("virtual-pilot Gram matrix is ill-conditioned (cond " + std::to_string(cond) + ")", cond);
    const CMatrix rhs = w.y_mat * w.x_mat.adjoint();
    // Solve gram^T Z^T = rhs^T, i.e. Z = rhs gram^-1.
    const Eigen::LDLT<CMatrix> solver(gram);
    return solver.solve(rhs.adjoint()).adjoint();
}

// Window average of eps_{p,q} r_{n+p,k+q} over the full (unclipped) window.
inline cplx xi(WindowSize w, const EpsProvider& eps, const ReliabilityProvider& r)
{
    cplx acc{};
    for (int p = -w.p; p <= w.p; ++p)
        for (int q = -w.q; q <= w.q; ++q)
            acc += eps(p, q) * r(p, q);
    return acc / static_cast<double>(w.area());
}

struct SystemParams {
    int n_tx = 2;
    int n_rx = 16;
    double sigma_h2 = 1.0;
    double sigma2 = 1.0;
};

// Estimator of E[Tr((X X^H)^-1)] for a window size.
using GramEstimator = std::function<double(WindowSize)>;

// X X^H = M I_{N_t}: the orthogonal-column idealization, Tr = N_t / M.
inline GramEstimator orthogonal_gram(int n_tx)
{
    return [n_tx](WindowSize w) {
        if (w.area() < n_tx)
            throw IllPosedWindow("window smaller than N_t", std::numeric_limits<double>::infinity());
        return static_cast<double>(n_tx) / static_cast<double>(w.area());
    };
}

inline double trace_gram_inverse(const CMatrix& x)
{
    const CMatrix gram = x * x.adjoint();
    const double cond = hermitian_condition(gram);
    if (!(cond < kMaxGramCondition))
        throw IllPosedWindow("ill-conditioned Gram matrix", cond);
    const Eigen::LDLT<CMatrix> solver(gram);
    return solver.solve(CMatrix::Identity(gram.rows(), gram.cols())).trace().real();
}

// Monte Carlo average over `draws` virtual-pilot matrices with i.i.d. unit
// power QAM entries. Draws with an ill-conditioned Gram matrix are redrawn;
// the random stream depends only on (seed, window size).
inline GramEstimator monte_carlo_gram(int n_tx, int order, int draws = 200, std::uint64_t seed = 7)
{
    return [=](WindowSize w) {
        const int m = w.area();
        if (m < n_tx)
            throw IllPosedWindow("window smaller than N_t", std::numeric_limits<double>::infinity());
        const Constellation qam(order);
        Rng rng(derive_seed(seed, w.p, w.q, n_tx));
        std::uniform_int_distribution<int> pick(0, order - 1);
        CMatrix x(n_tx, m);
        double acc = 0.0;
        int done = 0;
        int rejected = 0;
        while (done < draws) {
            for (int t = 0; t < n_tx; ++t)
                for (int c = 0; c < m; ++c)
                    x(t, c) = qam.point(pick(rng));
            const CMatrix gram = x * x.adjoint();
            if (!(hermitian_condition(gram) < kMaxGramCondition)) {
                if (++rejected > 100 * draws)
                    throw IllPosedWindow("no well-conditioned virtual-pilot draw", std::numeric_limits<double>::infinity());
                continue;
            }
            const Eigen::LDLT<CMatrix> solver(gram);
            acc += solver.solve(CMatrix::Identity(n_tx, n_tx)).trace().real();
            ++done;
        }
        return acc / draws;
    };
}

struct ObjectiveTerms {
    double term1 = 0.0;  // |1 - xi|^2 N_t sigma_h^2 / sigma^2
    double term2 = 0.0;  // E[Tr((X X^H)^-1)]
    double total = 0.0;
};

// Window objective |1 - xi|^2 N_t sigma_h^2 / sigma^2 + E[Tr((X X^H)^-1)].
// Only Re(xi) enters the bias term; over a symmetric window with real
// reliabilities xi is real anyway.
inline ObjectiveTerms mse_objective(WindowSize w, const SystemParams& sys, const EpsProvider& eps,
                                    const ReliabilityProvider& r, const GramEstimator& gram)
{
    if (w.area() < sys.n_tx)
        throw IllPosedWindow("window smaller than N_t", std::numeric_limits<double>::infinity());
    if (!(sys.sigma2 > 0.0))
        throw PreconditionError("sigma^2 must be positive");
    const double x = xi(w, eps, r).real();
    ObjectiveTerms t;
    t.term1 = (1.0 - x) * (1.0 - x) * sys.n_tx * sys.sigma_h2 / sys.sigma2;
    t.term2 = gram(w);
    t.total = t.term1 + t.term2;
    return t;
}

// Objective rescaled to an MSE: N_r sigma^2 times the window objective.
inline double analytic_mse(const ObjectiveTerms& t, const SystemParams& sys) { return sys.n_rx * sys.sigma2 * t.total; }

struct ObjectiveRow {
    WindowSize w;
    ObjectiveTerms terms;
    bool valid = true;
};

struct WindowOptimization {
    WindowSize best;
    ObjectiveTerms best_terms;
    std::vector<ObjectiveRow> table;
};

// Exhaustive search over the candidate product. Ties go to the smaller window
// area, then to the smaller P.
inline WindowOptimization optimize_window(const std::vector<int>& candidates_p, const std::vector<int>& candidates_q,
                                          const SystemParams& sys, const EpsProvider& eps,
                                          const ReliabilityProvider& r, const GramEstimator& gram)
{
    if (candidates_p.empty() || candidates_q.empty())
        throw PreconditionError("window candidate lists must be non-empty");
    WindowOptimization out;
    bool found = false;
    for (int p : candidates_p) {
        for (int q : candidates_q) {
            ObjectiveRow row;
            row.w = {p, q};
            try {
                row.terms = mse_objective(row.w, sys, eps, r, gram);
            } catch (const IllPosedWindow&) {
                row.valid = false;
            }
            out.table.push_back(row);
            if (!row.valid)
                continue;
            const bool better = !found || row.terms.total < out.best_terms.total ||
                                (row.terms.total == out.best_terms.total &&
                                 (row.w.area() < out.best.area() ||
                                  (row.w.area() == out.best.area() && row.w.p < out.best.p)));
            if (better) {
                out.best = row.w;
                out.best_terms = row.terms;
                found = true;
            }
        }
    }
    if (!found)
        throw PreconditionError("every window candidate is ill-posed");
    return out;
}

inline void write_objective_csv(std::ostream& os, const std::vector<ObjectiveRow>& rows)
{
    os << "P,Q,term1,term2,total\n";
    char buf[160];
    for (const auto& row : rows) {
        if (!row.valid) {
            std::snprintf(buf, sizeof buf, "%d,%d,nan,nan,nan\n", row.w.p, row.w.q);
        } else {
            std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g\n", row.w.p, row.w.q, row.terms.term1,
                          row.terms.term2, row.terms.total);
        }
        os << buf;
    }
}

inline EpsProvider channel_eps(const ChannelParams& params, double delta_f)
{
    return [params, delta_f](int p, int q) { return correlation_coeff(p, q, params, delta_f); };
}

inline ReliabilityProvider uniform_reliability()
{
    return [](int, int) { return 1.0; };
}

// Reliabilities read from detections around a representative position;
// positions outside the grid count as fully reliable.
inline ReliabilityProvider detected_reliability(const DetectionResult& det, const GridConfig& cfg, RE center)
{
    return [&det, cfg, center](int p, int q) {
        const int n = center.n + p;
        const int k = center.k + q;
        if (n < 0 || n >= cfg.n_symbols() || k < 0 || k >= cfg.K)
            return 1.0;
        return det.app[static_cast<std::size_t>(n) * static_cast<std::size_t>(cfg.K) + static_cast<std::size_t>(k)];
    };
}

} // namespace chanden

#endif
