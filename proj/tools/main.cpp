// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
//
// diffaug: diffusion-based data augmentation at desk scale.
//
//   make-data        render the procedural datasets
//   train-diffusion  fit the conditional noise predictor
//   reconstruct      invert + resample a dataset through the model
//   generate         expand a dataset with bottleneck-perturbed variants
//   perturb-study    compare injection sites by downstream accuracy
//   train-amst       three-stage multi-head self-training
//   evaluate         accuracy / MMD / feature-space Frechet report
//   ablate           2x2 perturbation x self-training grid + noise sweep

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffaug/pipeline.hpp"

using namespace diffaug;

int main(int argc, char** argv) {
    CLI::App app{"diffusion-based data augmentation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    int workers = 1;
    std::string out_root = ".";
    if (const char* env = std::getenv("DIFFAUG_OUT")) out_root = env;

    app.add_option("--config", config_path, "JSON config file");
    app.add_option("--set", overrides, "override as section.key=value (repeatable)");
    app.add_option("--workers", workers, "worker threads (results are worker-count independent)");
    app.add_option("--out", out_root, "output root (default $DIFFAUG_OUT or .)");

    std::string data_dir, test_dir, synth_dir, ckpt_dir, clf_dir;

    auto* c_make = app.add_subcommand("make-data", "render train/test datasets");
    auto* c_train = app.add_subcommand("train-diffusion", "train the noise predictor");
    c_train->add_option("--data", data_dir, "dataset directory")->required();
    auto* c_recon = app.add_subcommand("reconstruct", "invert and resample seeds");
    c_recon->add_option("--data", data_dir, "dataset directory")->required();
    c_recon->add_option("--ckpt", ckpt_dir, "denoiser checkpoint")->required();
    auto* c_gen = app.add_subcommand("generate", "expand a dataset with perturbed variants");
    c_gen->add_option("--data", data_dir, "seed dataset directory")->required();
    c_gen->add_option("--ckpt", ckpt_dir, "denoiser checkpoint")->required();
    auto* c_study = app.add_subcommand("perturb-study", "compare perturbation sites");
    c_study->add_option("--data", data_dir, "seed dataset directory")->required();
    c_study->add_option("--test", test_dir, "test dataset directory")->required();
    c_study->add_option("--ckpt", ckpt_dir, "denoiser checkpoint")->required();
    auto* c_amst = app.add_subcommand("train-amst", "three-stage self-training");
    c_amst->add_option("--data", data_dir, "real labeled dataset")->required();
    c_amst->add_option("--test", test_dir, "test dataset directory")->required();
    c_amst->add_option("--synth", synth_dir, "synthetic dataset (optional)");
    auto* c_eval = app.add_subcommand("evaluate", "accuracy and distribution metrics");
    c_eval->add_option("--classifier", clf_dir, "classifier checkpoint")->required();
    c_eval->add_option("--data", data_dir, "real dataset directory")->required();
    c_eval->add_option("--synth", synth_dir, "synthetic dataset directory")->required();
    auto* c_abl = app.add_subcommand("ablate", "2x2 grid and noise-scale sweep");

    for (auto* sub : app.get_subcommands({})) sub->fallthrough();
    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = load_config(config_path, overrides);
        if (c_make->parsed()) cmd_make_data(cfg, out_root);
        if (c_train->parsed()) cmd_train_diffusion(cfg, data_dir, out_root);
        if (c_recon->parsed()) cmd_reconstruct(cfg, ckpt_dir, data_dir, out_root, workers);
        if (c_gen->parsed()) cmd_generate(cfg, ckpt_dir, data_dir, out_root, workers);
        if (c_study->parsed())
            cmd_perturb_study(cfg, ckpt_dir, data_dir, test_dir, out_root, workers);
        if (c_amst->parsed()) cmd_train_amst(cfg, data_dir, synth_dir, test_dir, out_root, workers);
        if (c_eval->parsed()) cmd_evaluate(cfg, clf_dir, data_dir, synth_dir, out_root);
        if (c_abl->parsed()) cmd_ablate(cfg, out_root, workers);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
