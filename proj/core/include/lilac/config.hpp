#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lilac/data.hpp"
#include "lilac/model.hpp"
#include "lilac/trainer.hpp"

namespace lilac::expctl {

inline constexpr const char* kToolVersion = "lilac 0.3.0";

// Maps to exit code 2 (bad config / usage); anything else during a command
// maps to exit code 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A fully resolved experiment description. Parsing fills every field: values
// absent from the JSON take the profile defaults for (dataset, arch, scale),
// so the canonical dump — and therefore the config hash — never depends on
// which defaults the author spelled out.
struct ExperimentConfig {
    std::string dataset = "2d";        // 2d | 3d
    std::string arch = "transformer";  // film | transformer
    std::string scale = "desk";        // desk | paper
    std::vector<std::string> baselines = {"SFT"};
    std::string strategy = "all-attn";
    // Explicit module selection ("transformer/L0/attn", ...); overrides the
    // named strategy for the strategy baselines when non-empty.
    std::vector<std::string> modules;
    std::vector<std::uint64_t> seeds = {0};
    std::uint64_t data_seed = 1;  // stream content; run seeds permute task order
    std::string out = "out";
    data::StreamCounts counts;
    trainer::TrainConfig train;
    model::ModelConfig model;
};

ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Canonical dump: sorted keys, no insignificant whitespace, shortest
// round-trip floats. The config hash is FNV-1a over these bytes.
std::string canonical_json(const ExperimentConfig& c);
std::uint64_t config_hash(const ExperimentConfig& c);
std::string config_hash_hex(const ExperimentConfig& c);

// Per-(baseline, seed) trainer configuration derived from the experiment.
trainer::RunConfig run_config(const ExperimentConfig& c, const std::string& baseline,
                              std::uint64_t seed);

}  // namespace lilac::expctl
