// Copyright (c) 2026 diffaug authors
#include <optional>
// SPDX-License-Identifier: Apache-2.0
#include "diffaug/pipeline.hpp"

#include <filesystem>
#include <fstream>

#include "diffaug/ddat.hpp"
#include "diffaug/metrics.hpp"

namespace diffaug {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

void check_losses_finite(const std::vector<double>& losses, const std::string& what) {
    for (double l : losses)
        if (!std::isfinite(l)) throw NumericalError(what + ": non-finite training loss");
}

std::string tensor_file(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%03d.ddt", index);
    return buf;
}

void save_params(const std::string& dir, const ndgrad::NamedParams<float>& params,
                 json& manifest) {
    ensure_dir(dir + "/tensors");
    json tensors = json::array();
    int idx = 0;
    for (const auto& [name, p] : params) {
        const std::string file = tensor_file(idx++);
        write_ddat(dir + "/tensors/" + file, to_ddat(p));
        tensors.push_back({{"name", name},
                           {"file", "tensors/" + file},
                           {"hash", file_hash(dir + "/tensors/" + file)}});
    }
    manifest["tensors"] = tensors;
}

void load_params(const std::string& dir, const json& manifest,
                 ndgrad::NamedParams<float>& params) {
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params.size())
        throw DataError("checkpoint " + dir + ": expected " + std::to_string(params.size()) +
                        " tensors, found " + std::to_string(tensors.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string name = tensors[i].at("name").get<std::string>();
        if (name != params[i].first)
            throw DataError("checkpoint " + dir + ": tensor " + std::to_string(i) + " is '" +
                            name + "', expected '" + params[i].first + "'");
        auto t = from_ddat<float>(read_ddat(dir + "/" + tensors[i].at("file").get<std::string>()));
        if (t.shape() != params[i].second.shape())
            throw DataError("checkpoint " + dir + ": shape mismatch for " + name);
        params[i].second.data_mut() = t.data();
    }
}

}  // namespace

void write_json(const std::string& path, const json& doc) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f << doc.dump(2) << "\n";
}

json read_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read " + path);
    json doc;
    try {
        f >> doc;
    } catch (const json::exception& e) {
        throw DataError("bad json in " + path + ": " + e.what());
    }
    return doc;
}

json make_manifest(const std::string& command, const RunConfig& cfg,
                   const std::vector<std::string>& input_paths,
                   const std::vector<std::string>& output_paths, const json& extra) {
    json inputs = json::object();
    for (const auto& p : input_paths) inputs[p] = file_hash(p);
    json outputs = json::object();
    for (const auto& p : output_paths) outputs[p] = file_hash(p);
    json m{{"command", command},
           {"config", config_to_json(cfg)},
           {"config_hash", config_hash(cfg)},
           {"inputs", inputs},
           {"outputs", outputs}};
    if (!extra.is_null()) m["extra"] = extra;
    return m;
}

// ---------------------------------------------------------------------------
// datasets
// ---------------------------------------------------------------------------

void save_dataset(const std::string& dir, const Dataset& data, const std::string& name,
                  uint64_t seed) {
    ensure_dir(dir);
    write_ddat(dir + "/images.ddt", to_ddat(data.images));
    write_ddat(dir + "/labels.ddt", labels_to_ddat(data.labels));
    std::vector<int> counts(size_t(data.num_classes), 0);
    for (int l : data.labels) counts[size_t(l)]++;
    write_json(dir + "/manifest.json",
               json{{"name", name},
                    {"classes", data.num_classes},
                    {"counts", counts},
                    {"seed", seed},
                    {"files",
                     {{"images", "images.ddt"}, {"labels", "labels.ddt"}}},
                    {"hashes",
                     {{"images", file_hash(dir + "/images.ddt")},
                      {"labels", file_hash(dir + "/labels.ddt")}}}});
}

Dataset load_dataset(const std::string& dir) {
    if (!fs::exists(dir + "/images.ddt") || !fs::exists(dir + "/labels.ddt"))
        throw DataError("dataset directory " + dir + " is missing images.ddt/labels.ddt");
    Dataset d;
    d.images = from_ddat<float>(read_ddat(dir + "/images.ddt"));
    d.labels = labels_from_ddat(read_ddat(dir + "/labels.ddt"));
    if (d.images.dim(0) != int64_t(d.labels.size()))
        throw DataError("dataset " + dir + ": image/label count mismatch");
    if (fs::exists(dir + "/manifest.json"))
        d.num_classes = read_json(dir + "/manifest.json").at("classes").get<int>();
    else {
        int mx = 0;
        for (int l : d.labels) mx = std::max(mx, l);
        d.num_classes = mx + 1;
    }
    return d;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_denoiser(const std::string& dir, const Denoiser<float>& model) {
    ensure_dir(dir);
    const auto& c = model.config();
    json m{{"kind", "denoiser"},
           {"arch",
            {{"resolution", c.resolution},
             {"in_channels", c.in_channels},
             {"channels", {c.channels[0], c.channels[1], c.channels[2]}},
             {"num_classes", c.num_classes},
             {"emb_dim", c.emb_dim}}}};
    save_params(dir, model.params(), m);
    write_json(dir + "/manifest.json", m);
}

Denoiser<float> load_denoiser(const std::string& dir) {
    auto m = read_json(dir + "/manifest.json");
    if (m.at("kind") != "denoiser") throw DataError(dir + " is not a denoiser checkpoint");
    const auto& a = m.at("arch");
    DenoiserConfig cfg;
    cfg.resolution = a.at("resolution").get<int>();
    cfg.in_channels = a.at("in_channels").get<int>();
    cfg.channels = {a.at("channels")[0].get<int>(), a.at("channels")[1].get<int>(),
                    a.at("channels")[2].get<int>()};
    cfg.num_classes = a.at("num_classes").get<int>();
    cfg.emb_dim = a.at("emb_dim").get<int>();
    Rng rng(0);
    Denoiser<float> model(cfg, rng);
    load_params(dir, m, model.params());
    return model;
}

void save_classifier(const std::string& dir, const MultiHeadModel<float>& model) {
    ensure_dir(dir);
    const auto& c = model.config();
    json m{{"kind", "classifier"},
           {"arch",
            {{"resolution", c.resolution},
             {"in_channels", c.in_channels},
             {"num_classes", c.num_classes},
             {"channels", {c.channels[0], c.channels[1], c.channels[2], c.channels[3]}},
             {"dropout", c.dropout}}}};
    save_params(dir, model.params(), m);
    write_json(dir + "/manifest.json", m);
}

MultiHeadModel<float> load_classifier(const std::string& dir) {
    auto m = read_json(dir + "/manifest.json");
    if (m.at("kind") != "classifier") throw DataError(dir + " is not a classifier checkpoint");
    const auto& a = m.at("arch");
    MultiHeadConfig cfg;
    cfg.resolution = a.at("resolution").get<int>();
    cfg.in_channels = a.at("in_channels").get<int>();
    cfg.num_classes = a.at("num_classes").get<int>();
    cfg.channels = {a.at("channels")[0].get<int>(), a.at("channels")[1].get<int>(),
                    a.at("channels")[2].get<int>(), a.at("channels")[3].get<int>()};
    cfg.dropout = a.at("dropout").get<double>();
    Rng rng(0);
    MultiHeadModel<float> model(cfg, rng);
    load_params(dir, m, model.params());
    return model;
}

// ---------------------------------------------------------------------------
// building blocks
// ---------------------------------------------------------------------------

namespace {
Dataset build_data(const RunConfig& cfg, int per_class, uint64_t seed) {
    if (cfg.data.name == "gauss2d")
        return synth_gauss2d(cfg.data.num_classes, per_class, cfg.data.resolution, seed);
    ShapeSetSpec spec;
    spec.num_classes = cfg.data.num_classes;
    spec.per_class = per_class;
    spec.resolution = cfg.data.resolution;
    spec.seed = seed;
    return synth_shapes(spec);
}
}  // namespace

Dataset make_train_data(const RunConfig& cfg) {
    return build_data(cfg, cfg.data.per_class, cfg.data.seed);
}

Dataset make_test_data(const RunConfig& cfg) {
    return build_data(cfg, cfg.data.test_per_class, Rng::derive(cfg.data.seed, {0x7e57}));
}

NoiseSchedule schedule_from(const RunConfig& cfg) {
    return make_schedule(cfg.diffusion.T, cfg.diffusion.beta_min, cfg.diffusion.beta_max);
}

DenoiserConfig denoiser_config_from(const RunConfig& cfg) {
    DenoiserConfig d;
    d.resolution = cfg.data.resolution;
    d.num_classes = cfg.data.num_classes;
    return d;
}

MultiHeadConfig classifier_config_from(const RunConfig& cfg) {
    MultiHeadConfig c;
    c.resolution = cfg.data.resolution;
    c.num_classes = cfg.data.num_classes;
    return c;
}

Dataset sample_unconditional(const Denoiser<float>& model, int num_classes, int per_class,
                             const StepGrid& grid, const NoiseSchedule& sched,
                             uint64_t master_seed, int workers) {
    const int R = model.config().resolution;
    std::vector<std::vector<ndgrad::Tensor<float>>> slots(static_cast<size_t>(num_classes));
    parallel_for(num_classes, workers, [&](int64_t cls) {
        const int chunk = 16;
        for (int at = 0; at < per_class; at += chunk) {
            const int n = std::min(chunk, per_class - at);
            std::vector<float> xv(size_t(n) * R * R);
            for (int i = 0; i < n; ++i) {
                Rng rng(Rng::derive(master_seed, {0xa11, uint64_t(cls), uint64_t(at + i)}));
                for (int64_t k = 0; k < int64_t(R) * R; ++k)
                    xv[size_t(i * R * R + k)] = float(rng.normal());
            }
            auto xT = ndgrad::Tensor<float>::from_data({n, 1, R, R}, std::move(xv));
            auto res = ddim_sample<float>(model_noise_fn(model, int(cls)), xT, grid, sched,
                                          /*clip_predicted=*/true);
            for (int i = 0; i < n; ++i) {
                std::vector<float> img(size_t(R) * R);
                const float* p = res.last.data().data() + int64_t(i) * R * R;
                for (int64_t k = 0; k < int64_t(R) * R; ++k)
                    img[size_t(k)] = std::min(1.0f, std::max(-1.0f, p[k]));
                slots[size_t(cls)].push_back(
                    ndgrad::Tensor<float>::from_data({1, 1, R, R}, std::move(img)));
            }
        }
    });
    std::vector<ndgrad::Tensor<float>> imgs;
    std::vector<int> labels;
    for (int cls = 0; cls < num_classes; ++cls)
        for (auto& im : slots[size_t(cls)]) {
            imgs.push_back(std::move(im));
            labels.push_back(cls);
        }
    Dataset d;
    d.images = stack_images(imgs);
    d.labels = std::move(labels);
    d.num_classes = num_classes;
    return d;
}

double variant_diversity(const Denoiser<float>& model, const Dataset& seeds, double sigma_h,
                         int n_variants, const StepGrid& grid, const NoiseSchedule& sched,
                         uint64_t master_seed, int workers) {
    PerturbSpec spec;
    spec.sigma_h = sigma_h;
    spec.n_variants = n_variants;
    spec.grid = grid;
    std::vector<double> per_seed(size_t(seeds.size()), 0.0);
    parallel_for(seeds.size(), workers, [&](int64_t i) {
        auto recs = generate_variants(model, image_at(seeds, i), seeds.labels[size_t(i)], spec,
                                      sched, master_seed, i);
        double sum = 0.0;
        int64_t pairs = 0;
        for (size_t a = 0; a < recs.size(); ++a) {
            if (!recs[a].ok) continue;
            for (size_t b = a + 1; b < recs.size(); ++b) {
                if (!recs[b].ok) continue;
                double d2 = 0.0;
                const auto& va = recs[a].image.data();
                const auto& vb = recs[b].image.data();
                for (size_t k = 0; k < va.size(); ++k) {
                    const double d = double(va[k]) - double(vb[k]);
                    d2 += d * d;
                }
                sum += std::sqrt(d2);
                ++pairs;
            }
        }
        per_seed[size_t(i)] = pairs > 0 ? sum / double(pairs) : 0.0;
    });
    double acc = 0.0;
    for (double v : per_seed) acc += v;
    return seeds.size() > 0 ? acc / double(seeds.size()) : 0.0;
}

AblateResult run_ablate(const RunConfig& cfg, const Dataset& train, const Dataset& test,
                        int workers, const std::function<void(const std::string&)>& log) {
    const auto say = [&](const std::string& s) {
        if (log) log(s);
    };
    auto sched = schedule_from(cfg);
    auto grid = StepGrid::uniform(cfg.diffusion.T, cfg.diffusion.ddim_steps);

    AblateResult res;
    res.per_run.assign(size_t(cfg.eval.runs), std::vector<double>(4, 0.0));

    // One generative model and one synthetic set per configuration; the
    // averaged runs vary the classifier seeds.
    say("ablate: training diffusion model");
    const uint64_t ms0 = cfg.perturb.master_seed;
    Rng mrng(Rng::derive(ms0, {0xd100}));
    Denoiser<float> dmodel(denoiser_config_from(cfg), mrng);
    DiffusionTrainOpts topts;
    topts.epochs = cfg.diffusion.epochs;
    topts.batch_size = cfg.diffusion.batch;
    topts.lr = cfg.diffusion.lr;
    topts.seed = Rng::derive(ms0, {0xd101});
    check_losses_finite(train_diffusion(dmodel, train, sched, topts), "diffusion");

    say("ablate: generating synthetic sets");
    PerturbSpec spec;
    spec.sigma_h = cfg.perturb.sigma_h;
    spec.n_variants = cfg.perturb.n_variants;
    spec.grid = grid;
    auto recs = generate_variants_dataset(dmodel, train, spec, sched, ms0, workers);
    auto synth_perturb = variants_to_dataset(recs, train.num_classes);
    auto synth_uncond = sample_unconditional(dmodel, train.num_classes,
                                             cfg.data.per_class * cfg.perturb.n_variants, grid,
                                             sched, Rng::derive(ms0, {0xac}), workers);

    for (int run = 0; run < cfg.eval.runs; ++run) {
        const uint64_t rs = ms0 + uint64_t(run);
        for (int cell = 0; cell < 4; ++cell) {
            const bool with_perturb = cell >= 2;
            const bool with_amst = (cell % 2) == 1;
            const Dataset& synth = with_perturb ? synth_perturb : synth_uncond;
            say("ablate: run " + std::to_string(run) + ": cell perturb=" +
                std::to_string(with_perturb) + " amst=" + std::to_string(with_amst));
            Rng crng(Rng::derive(rs, {0xce11, uint64_t(cell)}));
            MultiHeadModel<float> clf(classifier_config_from(cfg), crng);
            double acc = 0.0;
            if (with_amst) {
                SelfTrainConfig sc;
                sc.lambda = cfg.amst.lambda;
                sc.tau = cfg.amst.tau;
                sc.mc_passes = cfg.amst.K;
                sc.epochs_stage1 = cfg.amst.epochs_stage1;
                sc.epochs_stage3 = cfg.amst.epochs_stage3;
                sc.batch = cfg.amst.batch;
                sc.lr = cfg.amst.lr;
                sc.seed = Rng::derive(rs, {0x57a9, uint64_t(cell)});
                sc.workers = workers;
                auto rep = run_self_training(clf, train, synth, test, sc);
                acc = rep.final_acc;
            } else {
                auto merged = concat_datasets(train, synth);
                check_losses_finite(
                    train_supervised(clf, merged, cfg.amst.epochs_stage1 + cfg.amst.epochs_stage3,
                                     cfg.amst.batch, cfg.amst.lr, 0.9,
                                     Rng::derive(rs, {0x50b, uint64_t(cell)})),
                    "supervised");
                acc = accuracy(clf, kMain, test);
            }
            res.per_run[size_t(run)][size_t(cell)] = acc;
        }
    }
    std::optional<Denoiser<float>> last_model;
    last_model.emplace(std::move(dmodel));

    res.cells.resize(4);
    for (int cell = 0; cell < 4; ++cell) {
        res.cells[size_t(cell)].perturb = cell >= 2;
        res.cells[size_t(cell)].amst = (cell % 2) == 1;
        double acc = 0.0;
        for (int run = 0; run < cfg.eval.runs; ++run) acc += res.per_run[size_t(run)][size_t(cell)];
        res.cells[size_t(cell)].accuracy = acc / double(cfg.eval.runs);
    }

    say("ablate: noise-scale sweep");
    Dataset sweep_seeds = train;
    if (train.size() > cfg.eval.sweep_seeds) {
        std::vector<ndgrad::Tensor<float>> imgs;
        std::vector<int> labels;
        for (int64_t i = 0; i < cfg.eval.sweep_seeds; ++i) {
            const int64_t pick = i * train.size() / cfg.eval.sweep_seeds;
            imgs.push_back(image_at(train, pick));
            labels.push_back(train.labels[size_t(pick)]);
        }
        sweep_seeds.images = stack_images(imgs);
        sweep_seeds.labels = labels;
    }
    for (double sigma : {0.0, 1.0, 3.0, 5.0}) {
        res.sweep_sigmas.push_back(sigma);
        res.sweep_diversity.push_back(variant_diversity(*last_model, sweep_seeds, sigma,
                                                        cfg.eval.sweep_variants, grid, sched,
                                                        cfg.perturb.master_seed, workers));
    }
    return res;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

void cmd_make_data(const RunConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    auto train = make_train_data(cfg);
    auto test = make_test_data(cfg);
    save_dataset(out_dir + "/train", train, cfg.data.name, cfg.data.seed);
    save_dataset(out_dir + "/test", test, cfg.data.name, Rng::derive(cfg.data.seed, {0x7e57}));
    write_json(out_dir + "/manifest.json",
               make_manifest("make-data", cfg, {},
                             {out_dir + "/train/images.ddt", out_dir + "/train/labels.ddt",
                              out_dir + "/test/images.ddt", out_dir + "/test/labels.ddt"}));
}

void cmd_train_diffusion(const RunConfig& cfg, const std::string& data_dir,
                         const std::string& out_dir) {
    auto train = load_dataset(data_dir);
    ensure_dir(out_dir);
    auto sched = schedule_from(cfg);
    Rng mrng(Rng::derive(cfg.data.seed, {0xd1f0}));
    Denoiser<float> model(denoiser_config_from(cfg), mrng);
    DiffusionTrainOpts opts;
    opts.epochs = cfg.diffusion.epochs;
    opts.batch_size = cfg.diffusion.batch;
    opts.lr = cfg.diffusion.lr;
    opts.seed = Rng::derive(cfg.data.seed, {0xd1f1});
    auto losses = train_diffusion(model, train, sched, opts);
    check_losses_finite(losses, "train-diffusion");
    save_denoiser(out_dir + "/ckpt", model);
    write_json(out_dir + "/losses.json", json{{"epoch_loss", losses}});
    write_json(out_dir + "/manifest.json",
               make_manifest("train-diffusion", cfg,
                             {data_dir + "/images.ddt", data_dir + "/labels.ddt"},
                             {out_dir + "/ckpt/manifest.json", out_dir + "/losses.json"}));
}

void cmd_reconstruct(const RunConfig& cfg, const std::string& ckpt_dir,
                     const std::string& data_dir, const std::string& out_dir, int workers) {
    auto model = load_denoiser(ckpt_dir);
    auto data = load_dataset(data_dir);
    ensure_dir(out_dir);
    auto sched = schedule_from(cfg);
    auto grid = StepGrid::uniform(cfg.diffusion.T, cfg.diffusion.invert_steps);

    const int64_t per = data.images.numel() / std::max<int64_t>(1, data.size());
    std::vector<float> recon(size_t(data.images.numel()));
    std::vector<double> errs(size_t(data.size()));
    parallel_for(data.size(), workers, [&](int64_t i) {
        auto seed = image_at(data, i);
        auto rec = reconstruct<float>(model_noise_fn(model, data.labels[size_t(i)]), seed, grid,
                                      sched);
        if (!rec.all_finite()) throw NumericalError("reconstruct: non-finite output");
        double err = 0.0;
        for (int64_t k = 0; k < per; ++k) {
            recon[size_t(i * per + k)] = rec.data()[size_t(k)];
            err += std::fabs(double(rec.data()[size_t(k)]) - double(seed.data()[size_t(k)]));
        }
        errs[size_t(i)] = err / double(per);
    });
    auto recon_t = ndgrad::Tensor<float>::from_data(data.images.shape(), std::move(recon));
    write_ddat(out_dir + "/recon.ddt", to_ddat(recon_t));
    double mean_err = 0.0;
    int64_t under = 0;
    for (double e : errs) {
        mean_err += e;
        if (e < 0.05) ++under;
    }
    mean_err /= double(std::max<int64_t>(1, data.size()));
    write_json(out_dir + "/report.json",
               json{{"per_seed_error", errs},
                    {"mean_error", mean_err},
                    {"fraction_under_0p05", double(under) / double(std::max<int64_t>(1, data.size()))}});
    write_json(out_dir + "/manifest.json",
               make_manifest("reconstruct", cfg,
                             {data_dir + "/images.ddt", ckpt_dir + "/manifest.json"},
                             {out_dir + "/recon.ddt", out_dir + "/report.json"}));
}

void cmd_generate(const RunConfig& cfg, const std::string& ckpt_dir, const std::string& data_dir,
                  const std::string& out_dir, int workers) {
    auto model = load_denoiser(ckpt_dir);
    auto data = load_dataset(data_dir);
    ensure_dir(out_dir);
    auto sched = schedule_from(cfg);
    PerturbSpec spec;
    spec.sigma_h = cfg.perturb.sigma_h;
    spec.n_variants = cfg.perturb.n_variants;
    spec.site = site_from_name(cfg.perturb.site);
    spec.grid = StepGrid::uniform(cfg.diffusion.T, cfg.diffusion.ddim_steps);

    std::vector<VariantRecord<float>> recs;
    if (spec.site == PerturbSite::bottleneck)
        recs = generate_variants_dataset(model, data, spec, sched, cfg.perturb.master_seed,
                                         workers);
    else
        recs = perturb_study(model, data, spec, sched, cfg.perturb.master_seed, workers);

    auto out = variants_to_dataset(recs, data.num_classes);
    write_ddat(out_dir + "/images.ddt", to_ddat(out.images));
    write_ddat(out_dir + "/provisional-labels.ddt", labels_to_ddat(out.labels));
    json provenance = json::array();
    int64_t aborted = 0;
    for (const auto& r : recs) {
        if (!r.ok) {
            ++aborted;
            continue;
        }
        provenance.push_back({{"seed_index", r.seed_index},
                              {"variant_index", r.variant_index},
                              {"seed_label", r.seed_label},
                              {"rng_stream", r.rng_stream}});
    }
    write_json(out_dir + "/manifest.json",
               make_manifest("generate", cfg,
                             {data_dir + "/images.ddt", ckpt_dir + "/manifest.json"},
                             {out_dir + "/images.ddt", out_dir + "/provisional-labels.ddt"},
                             json{{"sigma_h", cfg.perturb.sigma_h},
                                  {"site", cfg.perturb.site},
                                  {"grid", spec.grid.taus},
                                  {"master_seed", cfg.perturb.master_seed},
                                  {"aborted_variants", aborted},
                                  {"seed_provenance", provenance}}));
}

void cmd_perturb_study(const RunConfig& cfg, const std::string& ckpt_dir,
                       const std::string& data_dir, const std::string& test_dir,
                       const std::string& out_dir, int workers) {
    auto model = load_denoiser(ckpt_dir);
    auto data = load_dataset(data_dir);
    auto test = load_dataset(test_dir);
    ensure_dir(out_dir);
    auto sched = schedule_from(cfg);

    json table = json::array();
    for (PerturbSite site :
         {PerturbSite::latent_x0, PerturbSite::latent_xT, PerturbSite::latent_all_steps,
          PerturbSite::unet_encoder, PerturbSite::unet_decoder, PerturbSite::bottleneck}) {
        PerturbSpec spec;
        spec.sigma_h = cfg.perturb.sigma_h;
        spec.n_variants = cfg.perturb.n_variants;
        spec.site = site;
        spec.grid = StepGrid::uniform(cfg.diffusion.T, cfg.diffusion.ddim_steps);
        auto recs = perturb_study(model, data, spec, sched, cfg.perturb.master_seed, workers);
        auto synth = variants_to_dataset(recs, data.num_classes);
        save_dataset(out_dir + "/" + site_name(site), synth, cfg.data.name,
                     cfg.perturb.master_seed);

        Rng crng(Rng::derive(cfg.perturb.master_seed, {0x57d, uint64_t(site)}));
        MultiHeadModel<float> clf(classifier_config_from(cfg), crng);
        auto losses = train_supervised(clf, concat_datasets(data, synth),
                                       cfg.amst.epochs_stage1 + cfg.amst.epochs_stage3,
                                       cfg.amst.batch, cfg.amst.lr, 0.9,
                                       Rng::derive(cfg.perturb.master_seed, {0x57e, uint64_t(site)}));
        check_losses_finite(losses, "perturb-study");
        table.push_back({{"site", site_name(site)},
                         {"records", recs.size()},
                         {"accuracy", accuracy(clf, kMain, test)}});
    }
    write_json(out_dir + "/report.json", json{{"sites", table}});
    write_json(out_dir + "/manifest.json",
               make_manifest("perturb-study", cfg,
                             {data_dir + "/images.ddt", test_dir + "/images.ddt",
                              ckpt_dir + "/manifest.json"},
                             {out_dir + "/report.json"}));
}

void cmd_train_amst(const RunConfig& cfg, const std::string& real_dir,
                    const std::string& synth_dir, const std::string& test_dir,
                    const std::string& out_dir, int workers) {
    auto real_train = load_dataset(real_dir);
    auto test = load_dataset(test_dir);
    Dataset synth;
    if (!synth_dir.empty()) {
        synth.images = from_ddat<float>(read_ddat(synth_dir + "/images.ddt"));
        const std::string lab = fs::exists(synth_dir + "/provisional-labels.ddt")
                                    ? synth_dir + "/provisional-labels.ddt"
                                    : synth_dir + "/labels.ddt";
        synth.labels = labels_from_ddat(read_ddat(lab));
        synth.num_classes = real_train.num_classes;
    }
    ensure_dir(out_dir);

    SelfTrainConfig sc;
    sc.lambda = cfg.amst.lambda;
    sc.tau = cfg.amst.tau;
    sc.mc_passes = cfg.amst.K;
    sc.epochs_stage1 = cfg.amst.epochs_stage1;
    sc.epochs_stage3 = cfg.amst.epochs_stage3;
    sc.batch = cfg.amst.batch;
    sc.lr = cfg.amst.lr;
    sc.seed = Rng::derive(cfg.data.seed, {0xa3a7});
    sc.workers = workers;

    Rng crng(Rng::derive(cfg.data.seed, {0xa3a8}));
    MultiHeadModel<float> clf(classifier_config_from(cfg), crng);
    auto report = run_self_training(clf, real_train, synth, test, sc, &synth.labels);
    check_losses_finite(report.stage1_losses, "train-amst stage1");
    check_losses_finite(report.stage3_losses, "train-amst stage3");

    save_classifier(out_dir + "/ckpt", clf);
    write_json(out_dir + "/report.json",
               json{{"stage1_acc", report.stage1_acc},
                    {"acceptance_rate", report.acceptance_rate},
                    {"pseudo_precision", report.pseudo_precision},
                    {"final_acc", report.final_acc},
                    {"pool_labeled", report.pool_labeled},
                    {"pool_unlabeled", report.pool_unlabeled}});
    std::vector<std::string> inputs{real_dir + "/images.ddt", test_dir + "/images.ddt"};
    if (!synth_dir.empty()) inputs.push_back(synth_dir + "/images.ddt");
    write_json(out_dir + "/manifest.json",
               make_manifest("train-amst", cfg, inputs,
                             {out_dir + "/ckpt/manifest.json", out_dir + "/report.json"}));
}

void cmd_evaluate(const RunConfig& cfg, const std::string& classifier_dir,
                  const std::string& real_dir, const std::string& synth_dir,
                  const std::string& out_dir) {
    auto clf = load_classifier(classifier_dir);
    auto real = load_dataset(real_dir);
    Dataset synth;
    synth.images = from_ddat<float>(read_ddat(synth_dir + "/images.ddt"));
    const std::string lab = fs::exists(synth_dir + "/provisional-labels.ddt")
                                ? synth_dir + "/provisional-labels.ddt"
                                : synth_dir + "/labels.ddt";
    synth.labels = labels_from_ddat(read_ddat(lab));
    synth.num_classes = real.num_classes;
    ensure_dir(out_dir);

    auto freal = extract_features(clf, real);
    auto fsynth = extract_features(clf, synth);
    std::optional<double> bw;
    if (cfg.eval.bandwidth > 0.0) bw = cfg.eval.bandwidth;
    write_json(out_dir + "/report.json",
               json{{"accuracy", accuracy(clf, kMain, real)},
                    {"mmd2", mmd2(freal, fsynth, bw)},
                    {"desk_fid", frechet(fit_gaussian(freal), fit_gaussian(fsynth))},
                    {"n_real", real.size()},
                    {"n_synth", synth.size()}});
    write_json(out_dir + "/manifest.json",
               make_manifest("evaluate", cfg,
                             {classifier_dir + "/manifest.json", real_dir + "/images.ddt",
                              synth_dir + "/images.ddt"},
                             {out_dir + "/report.json"}));
}

void cmd_ablate(const RunConfig& cfg, const std::string& out_dir, int workers) {
    ensure_dir(out_dir);
    auto train = make_train_data(cfg);
    auto test = make_test_data(cfg);
    auto res = run_ablate(cfg, train, test, workers);

    json cells = json::array();
    for (const auto& c : res.cells)
        cells.push_back({{"perturb", c.perturb}, {"amst", c.amst}, {"accuracy", c.accuracy}});
    write_json(out_dir + "/table.json", json{{"cells", cells}, {"per_run", res.per_run}});
    write_json(out_dir + "/sweep.json",
               json{{"sigma", res.sweep_sigmas}, {"mean_pairwise_l2", res.sweep_diversity}});
    write_json(out_dir + "/manifest.json",
               make_manifest("ablate", cfg, {},
                             {out_dir + "/table.json", out_dir + "/sweep.json"}));
}

}  // namespace diffaug
