// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace diffaug {

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

// Fully resolved run configuration. Defaults here are the source of truth;
// a config file and --set overrides are merged on top (CLI > file > default)
// and unknown keys are rejected.
struct RunConfig {
    struct Data {
        std::string name = "shapes";  // shapes | gauss2d
        int num_classes = 6;
        int per_class = 100;
        int test_per_class = 32;
        int resolution = 16;
        uint64_t seed = 1;
    } data;

    struct Diffusion {
        int T = 1000;
        double beta_min = 1e-4;
        double beta_max = 0.02;
        int ddim_steps = 50;
        int invert_steps = 200;
        int epochs = 30;
        double lr = 1e-3;
        int batch = 32;
    } diffusion;

    struct Perturb {
        double sigma_h = 3.0;
        int n_variants = 10;
        std::string site = "bottleneck";
        uint64_t master_seed = 7;
    } perturb;

    struct Amst {
        double lambda = 0.001;
        double tau = 0.01;
        int K = 10;
        int epochs_stage1 = 30;
        int epochs_stage3 = 30;
        int batch = 64;
        double lr = 0.02;
    } amst;

    struct Eval {
        double bandwidth = 0.0;  // 0 = median heuristic
        int runs = 3;
        int sweep_seeds = 32;
        int sweep_variants = 8;
    } eval;
};

nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& doc);

// Loads a config file (or defaults when path is empty) and applies
// "section.key=value" overrides.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

uint64_t config_hash(const RunConfig& cfg);

}  // namespace diffaug
