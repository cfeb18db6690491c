#pragma once

#include "optrisk/dynamics.hpp"
#include "optrisk/factor_model.hpp"
#include "optrisk/market_data.hpp"
#include "optrisk/scenario.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace optrisk {

inline constexpr int artifact_schema_version = 1;

// Effective run configuration after the config file and --set overrides.
struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path data_root;  // OPTRISK_DATA_ROOT or the working directory; not hashed
    std::string run_dir = "run";      // artifacts, relative to the data root
    std::string raw_quotes;           // external raw quotes for ingest; empty uses the synth output

    struct Synth {
        std::size_t days = 600;
        double spot = 100.0;
        double initial_var = 0.04;
        double long_run_var = 0.04;
        double reversion = 3.0;
        double vol_of_vol = 0.3;
        double rho = -0.7;
        double long_run_vol = 0.5;
        double price_noise = 0.0;
        std::vector<int> tau_days{30, 60, 91, 182, 365};
        std::vector<double> quote_deltas;  // empty: 0.05 to 0.95 in steps of 0.05
        std::string label = "SYN";
        std::string start_date = "2015-01-01";
    } synth;

    LatticeOptions lattice;  // empty deltas: the standard 13 labels

    DecodeOptions decode;
    int secondary = 13;

    ModelFitOptions train;

    struct Simulate {
        int horizon_days = 10;
        std::size_t scenarios = 1000;
        std::size_t paths = 20;  // scenarios whose full path and VIX series are written
        InnovationMode mode = InnovationMode::bootstrap;
        long start_row = -1;     // -1 starts from the last panel row
    } simulate;

    struct Backtest {
        std::string engine = "nsde";  // nsde or fhs
        std::vector<int> horizons{1, 2, 5, 10};
        std::vector<double> alphas{0.99, 0.95};
        std::size_t scenarios = 5000;
        std::size_t test_days = 250;  // final rows held out of decode and train
        double fhs_decay = 0.95;
    } backtest;

    unsigned threads = 1;  // not hashed; results do not depend on it

    std::filesystem::path run_path() const { return data_root / run_dir; }
};

// Reads a YAML config and applies "dotted.key=value" overrides (values parsed
// as YAML). Unknown keys and a missing seed throw UsageError.
RunConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);
RunConfig parse_config(const std::string& yaml_text, const std::vector<std::string>& overrides);

// Canonical JSON of the settings a stage and its upstream stages depend on,
// and its SHA-256. Locations and thread counts are not part of it.
std::string canonical_config(const RunConfig& config, const std::string& stage);
std::string config_hash(const RunConfig& config, const std::string& stage);

struct ArtifactHeader {
    int schema = artifact_schema_version;
    std::string stage;
    std::string config;
    std::map<std::string, std::string> inputs;  // upstream artifact name -> SHA-256 of its bytes
};

// Text artifacts start with "# optrisk-artifact <header json>"; .json
// artifacts wrap the payload as {"artifact": ..., "payload": ...}; .jsonl
// artifacts put {"artifact": ...} on the first line.
void write_artifact(const std::filesystem::path& path, const ArtifactHeader& header, const std::string& payload);
std::pair<ArtifactHeader, std::string> read_artifact(const std::filesystem::path& path);
ArtifactHeader read_artifact_header(const std::filesystem::path& path);

inline const std::vector<std::string> stage_names = {"synth", "ingest", "decode", "train", "simulate", "backtest"};

struct StageResult {
    std::string stage;
    bool skipped = false;  // outputs already current for this config
    std::vector<std::string> artifacts;
    std::vector<std::string> messages;  // printed by the CLI
};

// Runs one stage in config.run_path(). A missing upstream artifact throws
// UsageError naming it and the stage that produces it.
StageResult run_stage(const std::string& stage, const RunConfig& config, bool force = false);

struct VerifyReport {
    std::vector<std::pair<std::string, std::string>> artifacts;  // name, SHA-256
    std::vector<std::string> problems;

    bool ok() const { return problems.empty(); }
};

// Checks schema, config hash and recorded upstream digests of every artifact
// in the run directory.
VerifyReport verify_run(const RunConfig& config);

// Artifact names per stage, in run-directory order.
std::vector<std::string> stage_outputs(const std::string& stage, const RunConfig& config);

}  // namespace optrisk
