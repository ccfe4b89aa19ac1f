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

#ifndef CHANDEN_COMMON_HPP
#define CHANDEN_COMMON_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace chanden {

using cplx = std::complex<double>;

inline constexpr double kPi = std::numbers::pi;

// ---------------------------------------------------------------------------
// Error types. Each maps onto a distinct CLI exit code (see tools/).

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct PreconditionError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Seed derivation. All random streams are derived from a root seed and a
// tuple of integer tags so that parallel workers never share a generator.

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

template <typename... Tags>
std::uint64_t derive_seed(std::uint64_t root, Tags... tags)
{
    std::uint64_t h = splitmix64(root);
    ((h = splitmix64(h ^ (static_cast<std::uint64_t>(tags) + 0x632BE59BD9B4E019ULL))), ...);
    return h;
}

using Rng = std::mt19937_64;

// Circularly symmetric complex Gaussian with total variance `var`.
inline cplx complex_gaussian(Rng& rng, double var)
{
    std::normal_distribution<double> n(0.0, std::sqrt(var / 2.0));
    const double re = n(rng);
    const double im = n(rng);
    return {re, im};
}

inline double uniform01(Rng& rng)
{
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

// ---------------------------------------------------------------------------
// Worker pool sizing. 0 means "all hardware threads".

inline std::atomic<int>& default_jobs_storage()
{
    static std::atomic<int> jobs{0};
    return jobs;
}

inline void set_default_jobs(int jobs) { default_jobs_storage() = jobs; }

inline int resolve_jobs(int jobs)
{
    if (jobs <= 0)
        jobs = default_jobs_storage();
    if (jobs <= 0)
        jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    return jobs;
}

// Runs fn(i) for i in [0, n) on a small thread pool. Results must be written
// to per-index slots so the outcome is independent of the worker count.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn, int jobs = 0)
{
    const int workers = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(resolve_jobs(jobs)), n));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n)
                    return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure)
                        failure = std::current_exception();
                    next = n;
                    return;
                }
            }
        });
    }
    for (auto& t : pool)
        t.join();
    if (failure)
        std::rethrow_exception(failure);
}

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

// SNR is defined as N_t / sigma^2.
inline double noise_variance_for_snr(double snr_db, int n_tx)
{
    return static_cast<double>(n_tx) / db_to_linear(snr_db);
}

} // namespace chanden

#endif
