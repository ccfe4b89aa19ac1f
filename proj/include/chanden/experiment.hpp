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

#ifndef CHANDEN_EXPERIMENT_HPP
#define CHANDEN_EXPERIMENT_HPP

// Experiment files and the command layer behind the command-line tool. One
// JSON document describes a whole experiment; every output is a function of
// that document and its seed.

#include <chanden/adaptation.hpp>
#include <chanden/pipeline.hpp>

#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace chanden {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct OfflineSection {
    std::size_t samples = 0;
    std::vector<double> snr_db{-3.0, 0.0, 6.0};
    int episode_slots = 4;
    int pairs_per_episode = 8;
};

struct MetaTaskSection {
    std::size_t tasks = 0;
    int n_sup = 16;
    int n_que = 32;
    std::vector<double> snr_db{-3.0, 0.0, 6.0};
};

struct OnlineSection {
    std::vector<double> snr_db;
    int sample_cap = 0;
    bool truth_targets = false;
};

struct PretrainSection {
    int epochs = 100;
    int batch = 64;
    double lr = 1e-3;
    double val_fraction = 0.1;
    LossReduction reduction = LossReduction::PerElement;
};

struct MetatrainSection {
    double alpha = 1e-3;
    double beta = 1e-3;
    int epochs = 10;
    int task_batch = 16;
    int inner_steps = 1;
    bool second_order = false;
    LossReduction reduction = LossReduction::PerElement;
};

struct RunSection {
    std::vector<double> snr_db{-6.0, -3.0, 0.0, 6.0, 9.0};
    std::vector<Method> methods{Method::PerfectCsir, Method::ConventionalCe};
    int trials = 1;
    WindowSearchConfig window;
    bool window_table = true;
    AdaptationConfig transfer{30, 1e-3, 32};
    AdaptationConfig meta{10, 1e-4, 32};
    int full_batch_cap = 64;
    int minibatch = 32;
    LossReduction reduction = LossReduction::PerElement;
    std::string transfer_checkpoint = "transfer.ckpt";
    std::string meta_checkpoint = "meta.ckpt";
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 1;
    std::string output_dir;
    int jobs = 0;
    GridConfig grid;
    double carrier_hz = 3.5e9;
    int n_oscillators = 32;
    std::map<std::string, ChannelPreset> presets;
    std::vector<std::string> train_presets;
    std::string test_preset;
    SubsampleSpec sub;
    ModelSpec model;
    OfflineSection offline;
    MetaTaskSection meta_tasks;
    OnlineSection online;
    PretrainSection pretrain;
    MetatrainSection metatrain;
    RunSection run;

    const ChannelPreset& preset(const std::string& key) const
    {
        const auto it = presets.find(key);
        if (it == presets.end())
            throw ConfigError("unknown channel preset '" + key + "'");
        return it->second;
    }

    std::vector<ChannelPreset> training_presets() const
    {
        std::vector<ChannelPreset> out;
        for (const auto& k : train_presets)
            out.push_back(preset(k));
        return out;
    }

    void validate() const
    {
        grid.validate();
        sub.validate();
        model.validate();
        if (model.in_channels != 2)
            throw ConfigError("model.in_channels must be 2 (real and imaginary part)");
        if (presets.empty())
            throw ConfigError("at least one channel preset is required");
        for (const auto& [k, p] : presets) {
            pdp_preset(p.pdp);
            if (p.velocity_kmh < 0.0)
                throw ConfigError("preset '" + k + "' has a negative velocity");
        }
        for (const auto& k : train_presets)
            preset(k);
        if (!test_preset.empty())
            preset(test_preset);
        if (carrier_hz <= 0.0)
            throw ConfigError("carrier_hz must be positive");
        if (n_oscillators < 1)
            throw ConfigError("n_oscillators must be >= 1");
        if (offline.episode_slots < 1 || offline.episode_slots > grid.n_slots_total)
            throw ConfigError("offline.episode_slots must lie in [1, n_slots_total]");
        if (meta_tasks.n_sup < 1 || meta_tasks.n_que < 1)
            throw ConfigError("meta_tasks.n_sup and n_que must be >= 1");
        if (pretrain.epochs < 0 || pretrain.batch < 1 || pretrain.lr < 0.0 || pretrain.val_fraction < 0.0 ||
            pretrain.val_fraction >= 1.0)
            throw ConfigError("pretrain needs epochs >= 0, batch >= 1, lr >= 0 and val_fraction in [0, 1)");
        if (metatrain.epochs < 0 || metatrain.task_batch < 1 || metatrain.inner_steps < 0 || metatrain.alpha < 0.0 ||
            metatrain.beta < 0.0)
            throw ConfigError("metatrain needs epochs >= 0, task_batch >= 1, inner_steps >= 0 and non-negative rates");
        if (metatrain.second_order && metatrain.inner_steps != 1)
            throw ConfigError("second-order meta-training supports exactly one inner step");
        if (online.sample_cap < 0)
            throw ConfigError("online.sample_cap must be >= 0");
        if (run.full_batch_cap < 1 || run.minibatch < 1)
            throw ConfigError("run.full_batch_cap and run.minibatch must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

inline void expect_object(const json& j, const std::string& path)
{
    if (!j.is_object())
        throw ConfigError(path + " must be an object");
}

inline void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> allowed)
{
    expect_object(j, path);
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k))
            throw ConfigError("unknown key '" + path + "." + k + "'");
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& path)
{
    if (!j.contains(key))
        return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError("bad type for '" + path + "." + key + "'");
    }
}

inline void read_reduction(const json& j, const char* key, LossReduction& out, const std::string& path)
{
    std::string s;
    read(j, key, s, path);
    if (!s.empty())
        out = loss_reduction_from_string(s);
}

inline void read_adaptation(const json& j, AdaptationConfig& a, const std::string& path)
{
    check_keys(j, path, {"steps", "lr", "samples"});
    read(j, "steps", a.steps, path);
    read(j, "lr", a.lr, path);
    read(j, "samples", a.samples, path);
}

inline json adaptation_json(const AdaptationConfig& a)
{
    return {{"steps", a.steps}, {"lr", a.lr}, {"samples", a.samples}};
}

} // namespace detail

inline ExperimentConfig parse_experiment(const json& j)
{
    using detail::check_keys;
    using detail::read;
    check_keys(j, "config",
               {"name", "seed", "output_dir", "jobs", "grid", "carrier_hz", "n_oscillators", "presets", "train_presets",
                "test_preset", "subsample", "model", "offline", "meta_tasks", "online", "pretrain", "metatrain", "run"});
    ExperimentConfig c;
    read(j, "name", c.name, "config");
    read(j, "seed", c.seed, "config");
    read(j, "output_dir", c.output_dir, "config");
    read(j, "jobs", c.jobs, "config");
    read(j, "carrier_hz", c.carrier_hz, "config");
    read(j, "n_oscillators", c.n_oscillators, "config");
    read(j, "train_presets", c.train_presets, "config");
    read(j, "test_preset", c.test_preset, "config");
    if (c.output_dir.empty())
        c.output_dir = c.name;

    if (j.contains("grid")) {
        const json& g = j["grid"];
        check_keys(g, "grid",
                   {"K", "n_ofdm", "n_slots_total", "n_slots_train", "n_tx", "n_rx", "delta_f_hz", "constellation",
                    "dmrs_symbols", "dmrs_comb_stride"});
        read(g, "K", c.grid.K, "grid");
        read(g, "n_ofdm", c.grid.n_ofdm, "grid");
        read(g, "n_slots_total", c.grid.n_slots_total, "grid");
        read(g, "n_slots_train", c.grid.n_slots_train, "grid");
        read(g, "n_tx", c.grid.n_tx, "grid");
        read(g, "n_rx", c.grid.n_rx, "grid");
        read(g, "delta_f_hz", c.grid.delta_f, "grid");
        read(g, "constellation", c.grid.constellation, "grid");
        read(g, "dmrs_symbols", c.grid.dmrs_symbol_indices, "grid");
        read(g, "dmrs_comb_stride", c.grid.dmrs_comb_stride, "grid");
    }

    if (!j.contains("presets"))
        throw ConfigError("config.presets is required");
    detail::expect_object(j["presets"], "presets");
    for (const auto& [key, p] : j["presets"].items()) {
        const std::string path = "presets." + key;
        check_keys(p, path, {"pdp", "velocity_kmh"});
        ChannelPreset cp{key, "exp-300ns", 120.0};
        read(p, "pdp", cp.pdp, path);
        read(p, "velocity_kmh", cp.velocity_kmh, path);
        c.presets[key] = cp;
    }
    if (c.train_presets.empty() && c.presets.size() == 1)
        c.train_presets = {c.presets.begin()->first};
    if (c.test_preset.empty() && c.presets.size() == 1)
        c.test_preset = c.presets.begin()->first;

    if (j.contains("subsample")) {
        const json& s = j["subsample"];
        check_keys(s, "subsample", {"s_t", "s_f", "m_t", "m_f"});
        read(s, "s_t", c.sub.s_t, "subsample");
        read(s, "s_f", c.sub.s_f, "subsample");
        read(s, "m_t", c.sub.m_t, "subsample");
        read(s, "m_f", c.sub.m_f, "subsample");
    }
    if (j.contains("model")) {
        const json& m = j["model"];
        check_keys(m, "model", {"width", "depth", "kernel"});
        read(m, "width", c.model.width, "model");
        read(m, "depth", c.model.depth, "model");
        read(m, "kernel", c.model.kernel, "model");
    }
    if (j.contains("offline")) {
        const json& o = j["offline"];
        check_keys(o, "offline", {"samples", "snr_db", "episode_slots", "pairs_per_episode"});
        read(o, "samples", c.offline.samples, "offline");
        read(o, "snr_db", c.offline.snr_db, "offline");
        read(o, "episode_slots", c.offline.episode_slots, "offline");
        read(o, "pairs_per_episode", c.offline.pairs_per_episode, "offline");
    }
    if (j.contains("meta_tasks")) {
        const json& o = j["meta_tasks"];
        check_keys(o, "meta_tasks", {"tasks", "n_sup", "n_que", "snr_db"});
        read(o, "tasks", c.meta_tasks.tasks, "meta_tasks");
        read(o, "n_sup", c.meta_tasks.n_sup, "meta_tasks");
        read(o, "n_que", c.meta_tasks.n_que, "meta_tasks");
        read(o, "snr_db", c.meta_tasks.snr_db, "meta_tasks");
    }
    if (j.contains("online")) {
        const json& o = j["online"];
        check_keys(o, "online", {"snr_db", "sample_cap", "truth_targets"});
        read(o, "snr_db", c.online.snr_db, "online");
        read(o, "sample_cap", c.online.sample_cap, "online");
        read(o, "truth_targets", c.online.truth_targets, "online");
    }
    if (j.contains("pretrain")) {
        const json& o = j["pretrain"];
        check_keys(o, "pretrain", {"epochs", "batch", "lr", "val_fraction", "loss_reduction"});
        read(o, "epochs", c.pretrain.epochs, "pretrain");
        read(o, "batch", c.pretrain.batch, "pretrain");
        read(o, "lr", c.pretrain.lr, "pretrain");
        read(o, "val_fraction", c.pretrain.val_fraction, "pretrain");
        detail::read_reduction(o, "loss_reduction", c.pretrain.reduction, "pretrain");
    }
    if (j.contains("metatrain")) {
        const json& o = j["metatrain"];
        check_keys(o, "metatrain",
                   {"alpha", "beta", "epochs", "task_batch", "inner_steps", "second_order", "loss_reduction"});
        read(o, "alpha", c.metatrain.alpha, "metatrain");
        read(o, "beta", c.metatrain.beta, "metatrain");
        read(o, "epochs", c.metatrain.epochs, "metatrain");
        read(o, "task_batch", c.metatrain.task_batch, "metatrain");
        read(o, "inner_steps", c.metatrain.inner_steps, "metatrain");
        read(o, "second_order", c.metatrain.second_order, "metatrain");
        detail::read_reduction(o, "loss_reduction", c.metatrain.reduction, "metatrain");
    }
    if (j.contains("run")) {
        const json& o = j["run"];
        check_keys(o, "run",
                   {"snr_db", "methods", "trials", "window", "transfer", "meta", "full_batch_cap", "minibatch",
                    "loss_reduction", "transfer_checkpoint", "meta_checkpoint"});
        read(o, "snr_db", c.run.snr_db, "run");
        if (o.contains("methods")) {
            std::vector<std::string> names;
            read(o, "methods", names, "run");
            c.run.methods.clear();
            for (const auto& n : names)
                c.run.methods.push_back(method_from_string(n));
        }
        read(o, "trials", c.run.trials, "run");
        if (o.contains("window")) {
            const json& w = o["window"];
            check_keys(w, "run.window", {"p", "q", "gram_draws", "gram_seed", "detected_reliability", "write_table"});
            read(w, "p", c.run.window.p, "run.window");
            read(w, "q", c.run.window.q, "run.window");
            read(w, "gram_draws", c.run.window.gram_draws, "run.window");
            read(w, "gram_seed", c.run.window.gram_seed, "run.window");
            read(w, "detected_reliability", c.run.window.detected_reliability, "run.window");
            read(w, "write_table", c.run.window_table, "run.window");
        }
        if (o.contains("transfer"))
            detail::read_adaptation(o["transfer"], c.run.transfer, "run.transfer");
        if (o.contains("meta"))
            detail::read_adaptation(o["meta"], c.run.meta, "run.meta");
        read(o, "full_batch_cap", c.run.full_batch_cap, "run");
        read(o, "minibatch", c.run.minibatch, "run");
        detail::read_reduction(o, "loss_reduction", c.run.reduction, "run");
        read(o, "transfer_checkpoint", c.run.transfer_checkpoint, "run");
        read(o, "meta_checkpoint", c.run.meta_checkpoint, "run");
    }
    c.validate();
    return c;
}

// Full document with every default filled in.
inline json to_json(const ExperimentConfig& c)
{
    json presets = json::object();
    for (const auto& [k, p] : c.presets)
        presets[k] = {{"pdp", p.pdp}, {"velocity_kmh", p.velocity_kmh}};
    std::vector<std::string> methods;
    for (Method m : c.run.methods)
        methods.push_back(to_string(m));
    json j;
    j["name"] = c.name;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["jobs"] = c.jobs;
    j["grid"] = {{"K", c.grid.K},
                 {"n_ofdm", c.grid.n_ofdm},
                 {"n_slots_total", c.grid.n_slots_total},
                 {"n_slots_train", c.grid.n_slots_train},
                 {"n_tx", c.grid.n_tx},
                 {"n_rx", c.grid.n_rx},
                 {"delta_f_hz", c.grid.delta_f},
                 {"constellation", c.grid.constellation},
                 {"dmrs_symbols", c.grid.dmrs_symbol_indices},
                 {"dmrs_comb_stride", c.grid.dmrs_comb_stride}};
    j["carrier_hz"] = c.carrier_hz;
    j["n_oscillators"] = c.n_oscillators;
    j["presets"] = presets;
    j["train_presets"] = c.train_presets;
    j["test_preset"] = c.test_preset;
    j["subsample"] = {{"s_t", c.sub.s_t}, {"s_f", c.sub.s_f}, {"m_t", c.sub.m_t}, {"m_f", c.sub.m_f}};
    j["model"] = {{"width", c.model.width}, {"depth", c.model.depth}, {"kernel", c.model.kernel}};
    j["offline"] = {{"samples", c.offline.samples},
                    {"snr_db", c.offline.snr_db},
                    {"episode_slots", c.offline.episode_slots},
                    {"pairs_per_episode", c.offline.pairs_per_episode}};
    j["meta_tasks"] = {{"tasks", c.meta_tasks.tasks},
                       {"n_sup", c.meta_tasks.n_sup},
                       {"n_que", c.meta_tasks.n_que},
                       {"snr_db", c.meta_tasks.snr_db}};
    j["online"] = {{"snr_db", c.online.snr_db},
                   {"sample_cap", c.online.sample_cap},
                   {"truth_targets", c.online.truth_targets}};
    j["pretrain"] = {{"epochs", c.pretrain.epochs},
                     {"batch", c.pretrain.batch},
                     {"lr", c.pretrain.lr},
                     {"val_fraction", c.pretrain.val_fraction},
                     {"loss_reduction", to_string(c.pretrain.reduction)}};
    j["metatrain"] = {{"alpha", c.metatrain.alpha},
                      {"beta", c.metatrain.beta},
                      {"epochs", c.metatrain.epochs},
                      {"task_batch", c.metatrain.task_batch},
                      {"inner_steps", c.metatrain.inner_steps},
                      {"second_order", c.metatrain.second_order},
                      {"loss_reduction", to_string(c.metatrain.reduction)}};
    j["run"] = {{"snr_db", c.run.snr_db},
                {"methods", methods},
                {"trials", c.run.trials},
                {"window",
                 {{"p", c.run.window.p},
                  {"q", c.run.window.q},
                  {"gram_draws", c.run.window.gram_draws},
                  {"gram_seed", c.run.window.gram_seed},
                  {"detected_reliability", c.run.window.detected_reliability},
                  {"write_table", c.run.window_table}}},
                {"transfer", detail::adaptation_json(c.run.transfer)},
                {"meta", detail::adaptation_json(c.run.meta)},
                {"full_batch_cap", c.run.full_batch_cap},
                {"minibatch", c.run.minibatch},
                {"loss_reduction", to_string(c.run.reduction)},
                {"transfer_checkpoint", c.run.transfer_checkpoint},
                {"meta_checkpoint", c.run.meta_checkpoint}};
    return j;
}

inline json parse_json_text(const std::string& text, const std::string& origin)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
}

inline std::string read_text_file(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_text_file(const fs::path& path, const std::string& text)
{
    std::ofstream os(path, std::ios::binary);
    if (!os || !(os << text))
        throw IoError("cannot write '" + path.string() + "'");
}

struct LoadedExperiment {
    ExperimentConfig config;
    std::string source_text;
};

inline LoadedExperiment load_experiment(const std::string& path)
{
    LoadedExperiment le;
    le.source_text = read_text_file(path);
    le.config = parse_experiment(parse_json_text(le.source_text, path));
    return le;
}

// ---------------------------------------------------------------------------
// Derived objects

inline ScenarioConfig scenario_from(const ExperimentConfig& c)
{
    ScenarioConfig s;
    s.name = c.name;
    s.grid = c.grid;
    if (c.test_preset.empty())
        throw ConfigError("config.test_preset is required when several presets are defined");
    s.test = c.preset(c.test_preset);
    s.train_presets = c.train_presets;
    s.carrier_hz = c.carrier_hz;
    s.n_oscillators = c.n_oscillators;
    s.snr_db = c.run.snr_db;
    s.methods = c.run.methods;
    s.window = c.run.window;
    s.sub = c.sub;
    s.transfer = c.run.transfer;
    s.meta = c.run.meta;
    s.full_batch_cap = c.run.full_batch_cap;
    s.minibatch = c.run.minibatch;
    s.reduction = c.run.reduction;
    s.trials = c.run.trials;
    s.seed = c.seed;
    s.jobs = c.jobs;
    return s;
}

inline OfflineDatasetConfig offline_config(const ExperimentConfig& c, const std::vector<double>& snrs)
{
    if (c.train_presets.empty())
        throw ConfigError("config.train_presets is required when several presets are defined");
    OfflineDatasetConfig oc;
    oc.grid = c.grid;
    oc.presets = c.training_presets();
    oc.snr_db = snrs;
    oc.sub = c.sub;
    oc.carrier_hz = c.carrier_hz;
    oc.episode_slots = c.offline.episode_slots;
    oc.pairs_per_episode = c.offline.pairs_per_episode;
    oc.n_oscillators = c.n_oscillators;
    oc.jobs = c.jobs;
    return oc;
}

inline json presets_json(const std::vector<ChannelPreset>& ps)
{
    json a = json::array();
    for (const auto& p : ps)
        a.push_back({{"name", p.name}, {"pdp", p.pdp}, {"velocity_kmh", p.velocity_kmh}});
    return a;
}

// Output directory: explicit override, else the config's output_dir. A
// relative path is resolved against CHANDEN_OUTPUT_ROOT when that is set.
inline fs::path resolve_output_dir(const ExperimentConfig& c, const std::optional<std::string>& override_dir)
{
    fs::path p = override_dir ? fs::path(*override_dir) : fs::path(c.output_dir);
    if (p.is_relative()) {
        if (const char* root = std::getenv("CHANDEN_OUTPUT_ROOT"); root && *root)
            p = fs::path(root) / p;
    }
    return p;
}

inline fs::path resolve_in(const fs::path& dir, const std::string& file)
{
    const fs::path f(file);
    return f.is_absolute() ? f : dir / f;
}

// Seed tags of the independent streams.
inline constexpr std::uint64_t kSeedOffline = 0x6F66666C;
inline constexpr std::uint64_t kSeedTasks = 0x7461736B;
inline constexpr std::uint64_t kSeedOnline = 0x6F6E6C6E;
inline constexpr std::uint64_t kSeedPretrain = 0x70726574;
inline constexpr std::uint64_t kSeedMeta = 0x6D657461;

// ---------------------------------------------------------------------------
// Commands

struct CommandContext {
    ExperimentConfig config;
    std::string source_text;  // original config text, copied verbatim
    fs::path out;
    std::ostream* log = nullptr;

    std::ostream& out_log() const { return *log; }
};

inline CommandContext make_context(LoadedExperiment le, const std::optional<std::uint64_t>& seed,
                                   const std::optional<std::string>& out_dir, const std::optional<int>& jobs,
                                   std::ostream& log)
{
    CommandContext ctx;
    ctx.config = std::move(le.config);
    ctx.source_text = std::move(le.source_text);
    if (seed)
        ctx.config.seed = *seed;
    if (jobs)
        ctx.config.jobs = *jobs;
    ctx.out = resolve_output_dir(ctx.config, out_dir);
    ctx.log = &log;
    set_default_jobs(ctx.config.jobs);
    return ctx;
}

inline void prepare_output(const CommandContext& ctx)
{
    std::error_code ec;
    fs::create_directories(ctx.out, ec);
    if (ec)
        throw IoError("cannot create output directory '" + ctx.out.string() + "': " + ec.message());
    write_text_file(ctx.out / "config.json", ctx.source_text);
    write_text_file(ctx.out / "config.resolved.json", to_json(ctx.config).dump(2) + "\n");
}

template <typename Fn>
void write_csv_file(const fs::path& path, Fn&& fn)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw IoError("cannot write '" + path.string() + "'");
    fn(os);
    if (!os)
        throw IoError("write to '" + path.string() + "' failed");
}

inline void write_dataset_with_manifest(const fs::path& dir, const std::string& stem, const Dataset& d,
                                        const json& meta)
{
    save_dataset((dir / (stem + ".ds")).string(), d, meta.dump());
    write_csv_file(dir / (stem + "_manifest.csv"), [&](std::ostream& os) { write_manifest_csv(os, d); });
}

inline std::string snr_tag(double snr)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%gdB", snr);
    return buf;
}

struct GenDataSummary {
    std::size_t offline = 0;
    std::size_t tasks = 0;
    std::vector<std::pair<double, LabelQuality>> online;
};

inline GenDataSummary cmd_gen_data(const CommandContext& ctx)
{
    const ExperimentConfig& c = ctx.config;
    std::ostream& log = ctx.out_log();
    prepare_output(ctx);
    GenDataSummary sum;

    if (c.offline.samples > 0) {
        const OfflineDatasetConfig oc = offline_config(c, c.offline.snr_db);
        const Dataset d = build_offline_dataset(oc, c.offline.samples, derive_seed(c.seed, kSeedOffline));
        const json meta{{"experiment", c.name}, {"seed", c.seed}, {"kind", "offline"},
                        {"train_presets", presets_json(oc.presets)}, {"snr_db", oc.snr_db}};
        write_dataset_with_manifest(ctx.out, "offline", d, meta);
        sum.offline = d.size();
        log << "offline: " << d.size() << " samples\n";
    }

    if (c.meta_tasks.tasks > 0) {
        const OfflineDatasetConfig oc = offline_config(c, c.meta_tasks.snr_db);
        const auto tasks = build_meta_tasks(oc, c.meta_tasks.tasks, c.meta_tasks.n_sup, c.meta_tasks.n_que,
                                            derive_seed(c.seed, kSeedTasks));
        Dataset sup;
        Dataset que;
        sup.kind = DatasetKind::Support;
        que.kind = DatasetKind::Query;
        sup.m_f = que.m_f = c.sub.m_f;
        sup.m_t = que.m_t = c.sub.m_t;
        json specs = json::array();
        for (const auto& t : tasks) {
            sup.samples.insert(sup.samples.end(), t.support.samples.begin(), t.support.samples.end());
            que.samples.insert(que.samples.end(), t.query.samples.begin(), t.query.samples.end());
            specs.push_back({{"preset", t.spec.preset.name}, {"snr_db", t.spec.snr_db}});
        }
        // Samples are task-major: task i owns rows [i n, (i + 1) n).
        json meta{{"experiment", c.name}, {"seed", c.seed}, {"tasks", tasks.size()},
                  {"n_sup", c.meta_tasks.n_sup}, {"n_que", c.meta_tasks.n_que},
                  {"train_presets", presets_json(oc.presets)}, {"task_specs", specs}};
        meta["kind"] = "support";
        write_dataset_with_manifest(ctx.out, "meta_support", sup, meta);
        meta["kind"] = "query";
        write_dataset_with_manifest(ctx.out, "meta_query", que, meta);
        sum.tasks = tasks.size();
        log << "meta tasks: " << tasks.size() << " (" << c.meta_tasks.n_sup << " support + " << c.meta_tasks.n_que
            << " query samples each)\n";
    }

    if (!c.online.snr_db.empty()) {
        const ScenarioConfig sc = scenario_from(c);
        const int n_train = c.grid.n_slots_train * c.grid.n_ofdm;
        if (n_train < 1)
            throw PreconditionError("online data needs n_slots_train >= 1");
        for (std::size_t i = 0; i < c.online.snr_db.size(); ++i) {
            const double snr = c.online.snr_db[i];
            const std::uint64_t seed = derive_seed(c.seed, kSeedOnline, i);
            const ChannelParams params =
                make_channel_params(sc.test, c.grid, c.carrier_hz, derive_seed(seed, 1), c.n_oscillators);
            const LinkRealization link = simulate_link(c.grid, params, snr, derive_seed(seed, 2), c.jobs);
            const DetectionResult det = detect_grid(link.received, link.interpolated, link.grid, link.sigma2, 0, n_train);
            const WindowOptimization win = choose_window(sc, params, link.sigma2, &det);
            OnlineDatasetConfig oc;
            oc.sub = c.sub;
            oc.window = win.best;
            oc.sample_cap = c.online.sample_cap;
            oc.truth_targets = c.online.truth_targets;
            oc.keep_reference = true;
            oc.seed = derive_seed(seed, 3);
            oc.jobs = c.jobs;
            const Dataset d = build_online_dataset(link, det, n_train, oc);
            const LabelQuality q = label_quality(d);
            const json meta{{"experiment", c.name}, {"seed", c.seed}, {"kind", "online"},
                            {"test_preset", presets_json({sc.test})}, {"snr_db", snr},
                            {"window", {{"P", win.best.p}, {"Q", win.best.q}}},
                            {"input_nmse_db", q.input_nmse_db}, {"target_nmse_db", q.target_nmse_db}};
            write_dataset_with_manifest(ctx.out, "online_" + snr_tag(snr), d, meta);
            sum.online.emplace_back(snr, q);
            char buf[256];
            std::snprintf(buf, sizeof buf,
                          "online %s: %zu samples, window P=%d Q=%d, input NMSE %.2f dB, target NMSE %.2f dB (%s)\n",
                          snr_tag(snr).c_str(), d.size(), win.best.p, win.best.q, q.input_nmse_db, q.target_nmse_db,
                          q.target_nmse_db < q.input_nmse_db ? "targets better than inputs"
                                                             : "targets NOT better than inputs");
            log << buf;
        }
    }
    if (sum.offline == 0 && sum.tasks == 0 && sum.online.empty())
        log << "nothing to generate (offline.samples, meta_tasks.tasks and online.snr_db are all empty)\n";
    return sum;
}

inline json checkpoint_metadata(const ExperimentConfig& c, const char* kind, const json& source_meta)
{
    json m{{"kind", kind}, {"experiment", c.name}, {"seed", c.seed}};
    if (source_meta.contains("train_presets"))
        m["train_presets"] = source_meta["train_presets"];
    return m;
}

inline json parse_metadata(const std::string& text)
{
    if (text.empty())
        return json::object();
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return json::object();
    }
}

inline void check_map_shape(const Dataset& d, const ExperimentConfig& c, const std::string& what)
{
    if (d.m_f != c.sub.m_f || d.m_t != c.sub.m_t)
        throw PreconditionError(what + " holds " + std::to_string(d.m_f) + "x" + std::to_string(d.m_t) +
                                " maps but the config expects " + std::to_string(c.sub.m_f) + "x" +
                                std::to_string(c.sub.m_t));
}

inline TrainResult cmd_pretrain(const CommandContext& ctx)
{
    const ExperimentConfig& c = ctx.config;
    const fs::path src = ctx.out / "offline.ds";
    if (!fs::exists(src))
        throw PreconditionError("offline dataset '" + src.string() + "' not found; run gen-data first");
    prepare_output(ctx);
    const DatasetFile f = load_dataset(src.string());
    check_map_shape(f.data, c, "offline dataset");
    PretrainConfig pc;
    pc.epochs = c.pretrain.epochs;
    pc.batch = c.pretrain.batch;
    pc.lr = c.pretrain.lr;
    pc.val_fraction = c.pretrain.val_fraction;
    pc.reduction = c.pretrain.reduction;
    pc.seed = derive_seed(c.seed, kSeedPretrain, 2);
    pc.jobs = c.jobs;
    const ModelState init = init_model(c.model, derive_seed(c.seed, kSeedPretrain, 1));
    const auto history_path = ctx.out / "pretrain_history.csv";
    try {
        TrainResult r = pretrain(init, f.data, pc);
        write_csv_file(history_path, [&](std::ostream& os) { write_history_csv(os, r.history); });
        json meta = checkpoint_metadata(c, "transfer", parse_metadata(f.metadata));
        meta["samples"] = f.data.size();
        meta["epochs"] = pc.epochs;
        save_checkpoint((ctx.out / "transfer.ckpt").string(), r.model, meta.dump());
        char buf[160];
        std::snprintf(buf, sizeof buf, "pretrain: %zu samples, %d epochs, final loss %.6g\n", f.data.size(), pc.epochs,
                      r.history.train_loss.empty() ? dataset_loss(r.model, f.data) : r.history.train_loss.back());
        ctx.out_log() << buf;
        return r;
    } catch (const DivergenceError& e) {
        write_csv_file(history_path, [&](std::ostream& os) { write_history_csv(os, e.history); });
        throw;
    }
}

inline std::vector<MetaTask> load_meta_tasks(const fs::path& dir)
{
    const fs::path sp = dir / "meta_support.ds";
    const fs::path qp = dir / "meta_query.ds";
    if (!fs::exists(sp) || !fs::exists(qp))
        throw PreconditionError("meta task files not found in '" + dir.string() + "'; run gen-data first");
    const DatasetFile s = load_dataset(sp.string());
    const DatasetFile q = load_dataset(qp.string());
    const json meta = parse_metadata(s.metadata);
    if (!meta.contains("tasks") || !meta.contains("n_sup") || !meta.contains("n_que"))
        throw PreconditionError("meta support file lacks task bookkeeping");
    const auto n = meta["tasks"].get<std::size_t>();
    const auto ns = meta["n_sup"].get<std::size_t>();
    const auto nq = meta["n_que"].get<std::size_t>();
    if (s.data.size() != n * ns || q.data.size() != n * nq)
        throw PreconditionError("meta task files disagree with their task counts");
    std::vector<MetaTask> tasks(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> a(ns);
        std::vector<std::size_t> b(nq);
        std::iota(a.begin(), a.end(), i * ns);
        std::iota(b.begin(), b.end(), i * nq);
        tasks[i].support = s.data.subset(a, DatasetKind::Support);
        tasks[i].query = q.data.subset(b, DatasetKind::Query);
        tasks[i].spec.n_sup = static_cast<int>(ns);
        tasks[i].spec.n_que = static_cast<int>(nq);
    }
    return tasks;
}

inline TrainResult cmd_metatrain(const CommandContext& ctx)
{
    const ExperimentConfig& c = ctx.config;
    const auto tasks = load_meta_tasks(ctx.out);
    if (tasks.empty())
        throw PreconditionError("meta-training needs at least one task");
    check_map_shape(tasks.front().support, c, "meta task set");
    prepare_output(ctx);
    MamlConfig mc;
    mc.alpha = c.metatrain.alpha;
    mc.beta = c.metatrain.beta;
    mc.epochs = c.metatrain.epochs;
    mc.task_batch = c.metatrain.task_batch;
    mc.inner_steps = c.metatrain.inner_steps;
    mc.second_order = c.metatrain.second_order;
    mc.reduction = c.metatrain.reduction;
    mc.seed = derive_seed(c.seed, kSeedMeta, 2);
    mc.jobs = c.jobs;
    const ModelState init = init_model(c.model, derive_seed(c.seed, kSeedMeta, 1));
    const auto history_path = ctx.out / "metatrain_history.csv";
    try {
        TrainResult r = maml_train(init, tasks, mc);
        write_csv_file(history_path, [&](std::ostream& os) { write_history_csv(os, r.history, "outer_step"); });
        json meta = checkpoint_metadata(c, "meta", parse_metadata(load_dataset((ctx.out / "meta_support.ds").string()).metadata));
        meta["tasks"] = tasks.size();
        meta["epochs"] = mc.epochs;
        meta["second_order"] = mc.second_order;
        save_checkpoint((ctx.out / "meta.ckpt").string(), r.model, meta.dump());
        ctx.out_log() << "metatrain: " << tasks.size() << " tasks, " << r.history.train_loss.size() << " outer steps\n";
        return r;
    } catch (const DivergenceError& e) {
        write_csv_file(history_path, [&](std::ostream& os) { write_history_csv(os, e.history, "outer_step"); });
        throw;
    }
}

inline void write_window_table(std::ostream& os, const std::map<double, WindowOptimization>& windows)
{
    os << "snr_db,P,Q,term1,term2,total,selected\n";
    char buf[200];
    for (const auto& [snr, w] : windows) {
        for (const auto& row : w.table) {
            const int sel = row.w == w.best ? 1 : 0;
            if (row.valid)
                std::snprintf(buf, sizeof buf, "%g,%d,%d,%.9g,%.9g,%.9g,%d\n", snr, row.w.p, row.w.q, row.terms.term1,
                              row.terms.term2, row.terms.total, sel);
            else
                std::snprintf(buf, sizeof buf, "%g,%d,%d,nan,nan,nan,%d\n", snr, row.w.p, row.w.q, sel);
            os << buf;
        }
    }
}

inline std::optional<std::pair<ModelState, json>> load_model_for(const CommandContext& ctx, const std::string& file,
                                                                 bool needed, const char* what)
{
    if (!needed)
        return std::nullopt;
    const fs::path p = resolve_in(ctx.out, file);
    if (!fs::exists(p))
        throw PreconditionError(std::string(what) + " checkpoint '" + p.string() + "' not found");
    Checkpoint ck = load_checkpoint(p.string());
    if (ck.model.spec.in_channels != 2)
        throw PreconditionError(std::string(what) + " checkpoint does not take two-channel maps");
    return std::make_pair(std::move(ck.model), parse_metadata(ck.metadata));
}

inline MetricsReport cmd_run(const CommandContext& ctx)
{
    const ExperimentConfig& c = ctx.config;
    std::ostream& log = ctx.out_log();
    ScenarioConfig sc = scenario_from(c);
    bool need_t = false;
    bool need_m = false;
    for (Method m : sc.methods) {
        need_t = need_t || uses_transfer_model(m);
        need_m = need_m || uses_meta_model(m);
    }
    const auto t = load_model_for(ctx, c.run.transfer_checkpoint, need_t, "transfer");
    const auto m = load_model_for(ctx, c.run.meta_checkpoint, need_m, "meta");
    prepare_output(ctx);

    PretrainedModels models;
    json info{{"experiment", c.name}, {"seed", c.seed}, {"test_preset", presets_json({sc.test})}};
    for (const auto& [slot, key] : {std::pair{&t, "transfer"}, std::pair{&m, "meta"}}) {
        if (!*slot)
            continue;
        const json& meta = (*slot)->second;
        const json trained = meta.contains("train_presets") ? meta["train_presets"] : json::array();
        bool in_dist = false;
        for (const auto& p : trained)
            in_dist = in_dist || (p.value("pdp", "") == sc.test.pdp && p.value("velocity_kmh", -1.0) == sc.test.velocity_kmh);
        info[key] = {{"train_presets", trained}, {"in_distribution", in_dist}};
        log << key << " model trained on " << trained.size() << " preset(s); test preset '" << sc.test.name << "' is "
            << (in_dist ? "in-distribution" : "out-of-distribution") << "\n";
        for (const auto& p : trained)
            sc.train_presets.push_back(p.value("name", std::string("?")));
    }
    if (t)
        models.transfer = t->first;
    if (m)
        models.meta = m->first;

    const MetricsReport rep = run_online_procedure(sc, models);
    write_csv_file(ctx.out / "trials.csv", [&](std::ostream& os) { write_trials_csv(os, rep.trials); });
    write_csv_file(ctx.out / "summary.csv", [&](std::ostream& os) { write_summary_csv(os, rep.summary); });
    write_csv_file(ctx.out / "timing.csv", [&](std::ostream& os) { write_timing_csv(os, rep.summary); });
    if (c.run.window_table)
        write_csv_file(ctx.out / "window_objective.csv", [&](std::ostream& os) { write_window_table(os, rep.windows); });
    write_text_file(ctx.out / "models.json", info.dump(2) + "\n");
    for (const auto& r : rep.summary) {
        char buf[200];
        std::snprintf(buf, sizeof buf, "%-20s %6g dB  NMSE %8.3f dB  FER %.4f  SER %.5f\n", to_string(r.method).c_str(),
                      r.snr_db, r.nmse_db_median, r.fer, r.ser);
        log << buf;
    }
    return rep;
}

// Describes a checkpoint or dataset file as JSON.
inline json inspect_file(const std::string& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw IoError("cannot open '" + path + "'");
    std::array<char, 8> magic{};
    is.read(magic.data(), 8);
    is.close();
    const std::string tag(magic.data(), 8);
    if (tag == "CHDNCKPT") {
        const Checkpoint ck = load_checkpoint(path);
        return {{"type", "checkpoint"},
                {"in_channels", ck.model.spec.in_channels},
                {"width", ck.model.spec.width},
                {"depth", ck.model.spec.depth},
                {"kernel", ck.model.spec.kernel},
                {"parameters", ck.model.theta.size()},
                {"metadata", parse_metadata(ck.metadata)}};
    }
    if (tag == "CHDNDSET") {
        const DatasetFile f = load_dataset(path);
        std::map<std::string, std::size_t> prov;
        for (const auto& s : f.data.samples)
            ++prov[to_string(s.target_provenance)];
        return {{"type", "dataset"},
                {"kind", to_string(f.data.kind)},
                {"samples", f.data.size()},
                {"m_f", f.data.m_f},
                {"m_t", f.data.m_t},
                {"target_provenance", prov},
                {"metadata", parse_metadata(f.metadata)}};
    }
    throw PreconditionError("'" + path + "' is neither a checkpoint nor a dataset file");
}

} // namespace chanden

#endif
