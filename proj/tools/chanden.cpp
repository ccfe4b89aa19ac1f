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

// chanden: dataset generation, training and evaluation driver.
//
//   chanden gen-data  CONFIG [--seed N] [--out DIR] [--jobs N]
//   chanden pretrain  CONFIG ...
//   chanden metatrain CONFIG ...
//   chanden run       CONFIG ...
//   chanden inspect   FILE
//
// Exit codes: 0 success, 2 configuration, 3 I/O, 4 training divergence,
// 5 precondition, 1 anything else.

#include <chanden/experiment.hpp>

#include <CLI11.hpp>

#include <iostream>

namespace {

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kIo = 3, kDivergence = 4, kPrecondition = 5 };

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> jobs;
};

void add_common(CLI::App* sub, CommonArgs& a)
{
    sub->add_option("config", a.config, "experiment file (JSON)")->required();
    sub->add_option("--seed", a.seed, "override the root seed");
    sub->add_option("--out", a.out, "override the output directory");
    sub->add_option("--jobs", a.jobs, "worker threads, 0 = all cores");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Data-aided channel estimation with denoising networks"};
    app.require_subcommand(1);

    CommonArgs gen, pre, meta, run;
    std::string inspect_path;
    auto* c_gen = app.add_subcommand("gen-data", "generate offline, meta-task and online datasets");
    auto* c_pre = app.add_subcommand("pretrain", "pretrain the denoiser on the offline dataset");
    auto* c_meta = app.add_subcommand("metatrain", "meta-train the denoiser on the meta task sets");
    auto* c_run = app.add_subcommand("run", "run the online procedure and write metric CSVs");
    auto* c_inspect = app.add_subcommand("inspect", "print checkpoint or dataset metadata");
    add_common(c_gen, gen);
    add_common(c_pre, pre);
    add_common(c_meta, meta);
    add_common(c_run, run);
    c_inspect->add_option("file", inspect_path, "checkpoint or dataset file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    using namespace chanden;
    try {
        if (c_inspect->parsed()) {
            std::cout << inspect_file(inspect_path).dump(2) << "\n";
            return kOk;
        }
        const CommonArgs& a = c_gen->parsed() ? gen : c_pre->parsed() ? pre : c_meta->parsed() ? meta : run;
        const CommandContext ctx = make_context(load_experiment(a.config), a.seed, a.out, a.jobs, std::cout);
        if (c_gen->parsed())
            cmd_gen_data(ctx);
        else if (c_pre->parsed())
            cmd_pretrain(ctx);
        else if (c_meta->parsed())
            cmd_metatrain(ctx);
        else
            cmd_run(ctx);
        std::cout << "outputs in " << ctx.out.string() << "\n";
        return kOk;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kIo;
    } catch (const DivergenceError& e) {
        std::cerr << "training diverged: " << e.what() << " (history written)\n";
        return kDivergence;
    } catch (const PreconditionError& e) {
        std::cerr << "precondition failed: " << e.what() << "\n";
        return kPrecondition;
    } catch (const ShapeError& e) {
        std::cerr << "precondition failed: " << e.what() << "\n";
        return kPrecondition;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kOther;
    }
}
