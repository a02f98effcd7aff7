#pragma once

#include <string>
#include <vector>

#include "lilac/analysis.hpp"
#include "lilac/config.hpp"

namespace lilac::expctl {

// One (baseline, seed) training run. Serialized results are fully
// deterministic; the wall time is kept out of the result JSON and written to
// a timing sidecar so identical invocations produce identical result bytes.
struct RunResult {
    std::uint64_t config_hash = 0;
    std::string tool_version = kToolVersion;
    std::string baseline;
    std::uint64_t seed = 0;
    analysis::AccuracyMatrix matrix;
    double acc = 0.0;
    double cf = 0.0;  // NaN when the matrix is not full (MTL)
    double ft = 0.0;
    std::vector<trainer::EpochLog> logs;
    double wall_seconds = 0.0;  // not serialized by to_json
};

std::string to_json(const RunResult& r);
RunResult run_result_from_json(const std::string& text);

// All outputs for a config land in <out>/<config-hash-hex>/, so a mutated
// config can never overwrite a prior hash's files.
std::string run_dir(const ExperimentConfig& c);

// Task-stream content comes from data_seed; the run seed permutes the task
// order and drives model init and training.
data::TaskStream stream_for_seed(const ExperimentConfig& c, std::uint64_t seed);

// Runs one (baseline, seed) job in memory (no files). When traces is given
// the run records importance accumulators into it.
RunResult execute(const ExperimentConfig& c, const std::string& baseline, std::uint64_t seed,
                  std::map<std::string, analysis::ModuleTrace>* traces = nullptr);

// Commands; ConfigError → exit 2, anything else → exit 3.
void cmd_gen(const ExperimentConfig& c, bool force);
void cmd_run(const ExperimentConfig& c, bool force);
void cmd_sweep(const ExperimentConfig& c, bool force);
void cmd_importance(const ExperimentConfig& c, bool force);

}  // namespace lilac::expctl
