// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "diffaug/config.hpp"
#include "diffaug/denoiser.hpp"
#include "diffaug/perturb.hpp"
#include "diffaug/sampler.hpp"
#include "diffaug/selftrain.hpp"

namespace diffaug {

// ---------------------------------------------------------------------------
// artifacts
// ---------------------------------------------------------------------------

void save_dataset(const std::string& dir, const Dataset& data, const std::string& name,
                  uint64_t seed);
Dataset load_dataset(const std::string& dir);

void save_denoiser(const std::string& dir, const Denoiser<float>& model);
Denoiser<float> load_denoiser(const std::string& dir);

void save_classifier(const std::string& dir, const MultiHeadModel<float>& model);
MultiHeadModel<float> load_classifier(const std::string& dir);

void write_json(const std::string& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::string& path);

// Run manifest: resolved config + hashes of every input and output artifact.
nlohmann::json make_manifest(const std::string& command, const RunConfig& cfg,
                             const std::vector<std::string>& input_paths,
                             const std::vector<std::string>& output_paths,
                             const nlohmann::json& extra = {});

// ---------------------------------------------------------------------------
// building blocks shared by the CLI and the acceptance suite
// ---------------------------------------------------------------------------

Dataset make_train_data(const RunConfig& cfg);
Dataset make_test_data(const RunConfig& cfg);

NoiseSchedule schedule_from(const RunConfig& cfg);
DenoiserConfig denoiser_config_from(const RunConfig& cfg);
MultiHeadConfig classifier_config_from(const RunConfig& cfg);

// Class-conditional samples from pure noise (the generation path with the
// perturbation machinery off).
Dataset sample_unconditional(const Denoiser<float>& model, int num_classes, int per_class,
                             const StepGrid& grid, const NoiseSchedule& sched,
                             uint64_t master_seed, int workers);

struct AblateCell {
    bool perturb = false;
    bool amst = false;
    double accuracy = 0.0;
};

struct AblateResult {
    std::vector<AblateCell> cells;            // averaged over runs, 4 cells
    std::vector<std::vector<double>> per_run; // per run accuracies, 4 per run
    std::vector<double> sweep_sigmas;
    std::vector<double> sweep_diversity;      // mean pairwise L2 per sigma
};

AblateResult run_ablate(const RunConfig& cfg, const Dataset& train, const Dataset& test,
                        int workers, const std::function<void(const std::string&)>& log = {});

// Mean pairwise L2 distance between variants, averaged over seeds.
double variant_diversity(const Denoiser<float>& model, const Dataset& seeds, double sigma_h,
                         int n_variants, const StepGrid& grid, const NoiseSchedule& sched,
                         uint64_t master_seed, int workers);

// ---------------------------------------------------------------------------
// CLI commands; throw ConfigError / DataError / NumericalError on failure
// ---------------------------------------------------------------------------

void cmd_make_data(const RunConfig& cfg, const std::string& out_dir);
void cmd_train_diffusion(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir);
void cmd_reconstruct(const RunConfig& cfg, const std::string& ckpt_dir,
                     const std::string& data_dir, const std::string& out_dir, int workers);
void cmd_generate(const RunConfig& cfg, const std::string& ckpt_dir, const std::string& data_dir,
                  const std::string& out_dir, int workers);
void cmd_perturb_study(const RunConfig& cfg, const std::string& ckpt_dir,
                       const std::string& data_dir, const std::string& test_dir,
                       const std::string& out_dir, int workers);
void cmd_train_amst(const RunConfig& cfg, const std::string& real_dir,
                    const std::string& synth_dir, const std::string& test_dir,
                    const std::string& out_dir, int workers);
void cmd_evaluate(const RunConfig& cfg, const std::string& classifier_dir,
                  const std::string& real_dir, const std::string& synth_dir,
                  const std::string& out_dir);
void cmd_ablate(const RunConfig& cfg, const std::string& out_dir, int workers);

}  // namespace diffaug
