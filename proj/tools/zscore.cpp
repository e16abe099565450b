// zscore command-line front end. Each subcommand runs one pipeline stage
// against a workdir; `run` chains all of them.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "zscore/common.hpp"
#include "zscore/config_io.hpp"
#include "zscore/pipeline.hpp"
#include "zscore/quorum.hpp"
#include "zscore/store.hpp"
#include "zscore/synth.hpp"

namespace fs = std::filesystem;
using namespace zscore;

namespace {

constexpr int kValidationFailure = 1;
constexpr int kUsageError = 2;

struct Options {
    std::string config;
    std::string workdir;
    std::string events;
    std::string thresholds;
    std::string format;
    std::optional<std::uint64_t> seed;
    std::optional<std::uint64_t> epoch;
};

fs::path pick_workdir(const Options& opts, const fs::path& configured) {
    if (!opts.workdir.empty()) return opts.workdir;
    if (!configured.empty()) return configured;
    if (const char* env = std::getenv("ZSCORE_WORKDIR"); env != nullptr && *env != '\0') return env;
    return "zscore-work";
}

// --config wins; otherwise the run.json saved by `ingest`; otherwise defaults.
pipeline::RunConfig resolve_config(const Options& opts) {
    pipeline::RunConfig config;
    if (!opts.config.empty()) {
        config = pipeline::load_run_config(opts.config);
        config.workdir = pick_workdir(opts, config.workdir);
    } else {
        const auto workdir = pick_workdir(opts, {});
        const auto saved = workdir / pipeline::artifact::kConfig;
        if (fs::exists(saved)) config = pipeline::config_from_json(nlohmann::json::parse(read_file(saved)));
        config.workdir = workdir;
    }
    if (!opts.events.empty()) config.events = opts.events;
    if (!opts.thresholds.empty()) config.thresholds = opts.thresholds;
    if (!opts.format.empty()) config.format = ledger::parse_format(opts.format);
    if (opts.seed) config.seed = *opts.seed;
    if (opts.epoch) config.epoch = *opts.epoch;
    return config;
}

void print(const nlohmann::ordered_json& doc) { std::cout << doc.dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"zscore: behavioural reputation scores for lending-protocol wallets"};
    app.require_subcommand(1);
    app.fallthrough();
    Options opts;
    app.add_option("--config", opts.config, "Run configuration (.toml or .json)");
    app.add_option("--workdir", opts.workdir, "Artifact directory (default: $ZSCORE_WORKDIR, then ./zscore-work)");
    app.add_option("--events", opts.events, "Event log, overrides the config");
    app.add_option("--thresholds", opts.thresholds, "Liquidation threshold table, overrides the config");
    app.add_option("--format", opts.format, "Event log format")->check(CLI::IsMember({"jsonl", "csv"}));
    app.add_option("--seed", opts.seed, "Seed for every seeded stage");
    app.add_option("--epoch", opts.epoch, "Epoch id for attest, epoch and query");

    std::string synth_out;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic population");
    synth->add_option("--out", synth_out, "Output directory")->required();

    auto* ingest = app.add_subcommand("ingest", "Parse the event log and split cohorts");
    auto* features = app.add_subcommand("features", "Extract and scale per-wallet features");
    std::string cohort;
    auto* cluster = app.add_subcommand("cluster", "PSO-tuned clustering per cohort");
    cluster->add_option("--cohort", cohort, "Only this cohort")->check(CLI::IsMember({"liquidation", "non-liquidation"}));
    auto* label = app.add_subcommand("label", "Assign score intervals to clusters");
    auto* train = app.add_subcommand("train", "Train the scoring network");
    auto* score = app.add_subcommand("score", "Score every wallet");
    auto* attest = app.add_subcommand("attest", "Commit scores to the Merkle store");
    auto* epoch = app.add_subcommand("epoch", "Run a validator quorum round and publish the root");
    std::string wallet;
    bool as_json = false;
    auto* query = app.add_subcommand("query", "Look up a published score with its proof");
    query->add_option("wallet", wallet, "Wallet address")->required();
    query->add_flag("--json", as_json, "Print the full response as JSON");
    auto* serve = app.add_subcommand("serve", "Answer JSON queries on stdin, one per line");
    auto* report = app.add_subcommand("report", "Score histograms as CSV and SVG");
    auto* run = app.add_subcommand("run", "All stages from ingest to report");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }

    try {
        if (synth->parsed()) {
            auto spec = opts.config.empty() ? synth::PopulationSpec{} : synth::load_spec(opts.config);
            if (opts.seed) spec.seed = *opts.seed;
            const auto population = synth::generate(spec);
            synth::write_population(synth_out, population);
            print({{"out", synth_out}, {"wallets", population.roster.size()}, {"events", population.events.size()}});
            return 0;
        }

        const auto config = resolve_config(opts);
        if (query->parsed()) {
            const auto response = pipeline::query(config, wallet);
            if (as_json) {
                print(response);
            } else {
                std::cout << "wallet=" << wallet << " zscore=" << response["zscore"] << " epoch=" << config.epoch
                          << " root=" << response["root"].get<std::string>()
                          << " verified=" << (response["verified"].get<bool>() ? "true" : "false") << '\n';
            }
            return response["verified"].get<bool>() ? 0 : kValidationFailure;
        }
        if (serve->parsed()) {
            const attest::ScoreStore store(config.workdir / pipeline::artifact::kStore);
            const auto chain = quorum::ChainStub::load(config.workdir / pipeline::artifact::kChain);
            quorum::serve_stdio(store, chain, std::cin, std::cout);
            return 0;
        }

        pipeline::WorkdirLock lock(config.workdir);
        if (ingest->parsed()) print(pipeline::ingest(config));
        if (features->parsed()) print(pipeline::extract(config));
        if (cluster->parsed()) {
            print(pipeline::cluster_stage(config, cohort.empty() ? std::nullopt
                                                                 : std::optional(pipeline::parse_cohort(cohort))));
        }
        if (label->parsed()) print(pipeline::label(config));
        if (train->parsed()) print(pipeline::train(config));
        if (score->parsed()) print(pipeline::score(config));
        if (attest->parsed()) print(pipeline::attest(config));
        if (report->parsed()) print(pipeline::report(config));
        if (epoch->parsed()) {
            const auto result = pipeline::epoch(config);
            print(result);
            return result["published"].get<bool>() ? 0 : kValidationFailure;
        }
        if (run->parsed()) {
            const auto result = pipeline::run_all(config);
            print(result);
            return result["epoch"]["published"].get<bool>() ? 0 : kValidationFailure;
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidationFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidationFailure;
    }
}
