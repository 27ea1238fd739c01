// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "diffaug/config.hpp"
#include "diffaug/ddat.hpp"
#include "diffaug/pipeline.hpp"

using namespace diffaug;
namespace fs = std::filesystem;

#ifndef DIFFAUG_CLI
#define DIFFAUG_CLI "diffaug"
#endif

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

const std::string kMicro =
    " --set data.name=gauss2d --set data.num_classes=3 --set data.per_class=4"
    " --set data.test_per_class=3 --set diffusion.T=40 --set diffusion.ddim_steps=8"
    " --set diffusion.invert_steps=8 --set diffusion.epochs=1 --set diffusion.batch=6"
    " --set perturb.n_variants=1 --set amst.epochs_stage1=1 --set amst.epochs_stage3=1";

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DIFFAUG_CLI) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("defaults round trip through json") {
    RunConfig def;
    auto doc = config_to_json(def);
    auto back = config_from_json(doc);
    CHECK(config_to_json(back) == doc);
    CHECK(def.diffusion.T == 1000);
    CHECK(def.perturb.sigma_h == 3.0);
    CHECK(def.amst.lambda == 0.001);
    CHECK(def.amst.tau == 0.01);
    CHECK(def.amst.K == 10);
}

TEST_CASE("config file merge and unknown key rejection") {
    TempDir tmp("diffaug_cfg_test");
    const auto path = (tmp.path / "c.json").string();
    {
        std::ofstream f(path);
        f << R"({"diffusion": {"T": 500}, "perturb": {"sigma_h": 1.5}})";
    }
    auto cfg = load_config(path, {});
    CHECK(cfg.diffusion.T == 500);
    CHECK(cfg.perturb.sigma_h == 1.5);
    CHECK(cfg.amst.tau == 0.01);  // untouched default

    {
        std::ofstream f(path);
        f << R"({"perturb": {"sigmah": 2.0}})";
    }
    CHECK_THROWS_WITH_AS(load_config(path, {}), doctest::Contains("perturb.sigmah"), ConfigError);

    {
        std::ofstream f(path);
        f << R"({"bogus_section": {}})";
    }
    CHECK_THROWS_WITH_AS(load_config(path, {}), doctest::Contains("bogus_section"), ConfigError);
}

TEST_CASE("override precedence: cli over file over defaults") {
    TempDir tmp("diffaug_cfg_prec");
    const auto path = (tmp.path / "c.json").string();
    {
        std::ofstream f(path);
        f << R"({"diffusion": {"T": 500, "ddim_steps": 25}})";
    }
    auto cfg = load_config(path, {"diffusion.T=250", "amst.K=5"});
    CHECK(cfg.diffusion.T == 250);
    CHECK(cfg.diffusion.ddim_steps == 25);
    CHECK(cfg.amst.K == 5);

    CHECK_THROWS_AS(load_config("", {"diffusion-T=10"}), ConfigError);
    CHECK_THROWS_AS(load_config("", {"nothing.at=1"}), ConfigError);
    CHECK_THROWS_AS(load_config("", {"diffusion.T=hello"}), ConfigError);
    CHECK_THROWS_AS(load_config("", {"amst.tau=-0.5"}), ConfigError);
}

TEST_CASE("config hash is stable and sensitive") {
    auto a = load_config("", {});
    auto b = load_config("", {});
    auto c = load_config("", {"perturb.sigma_h=5"});
    CHECK(config_hash(a) == config_hash(b));
    CHECK(config_hash(a) != config_hash(c));
}

TEST_CASE("exit codes: success, config error, data error, numerical failure") {
    TempDir tmp("diffaug_cli_exit");
    const std::string out = tmp.str();

    CHECK(run_cli("make-data --out " + out + "/d" + kMicro) == 0);
    CHECK(run_cli("make-data --out " + out + "/d2 --set data.bogus=1") == 2);
    CHECK(run_cli("train-diffusion --data " + out + "/missing --out " + out + "/m" + kMicro) ==
          3);
    // exploding learning rate drives the loss non-finite
    CHECK(run_cli("train-diffusion --data " + out + "/d/train --out " + out + "/m" + kMicro +
                  " --set diffusion.lr=1e18") == 4);
}

TEST_CASE("generate with zero noise equals the reconstruct output") {
    TempDir tmp("diffaug_cli_zero");
    const std::string out = tmp.str();
    REQUIRE(run_cli("make-data --out " + out + "/d" + kMicro) == 0);
    REQUIRE(run_cli("train-diffusion --data " + out + "/d/train --out " + out + "/m" + kMicro) ==
            0);
    REQUIRE(run_cli("reconstruct --data " + out + "/d/train --ckpt " + out + "/m/ckpt --out " +
                    out + "/r" + kMicro) == 0);
    REQUIRE(run_cli("generate --data " + out + "/d/train --ckpt " + out + "/m/ckpt --out " + out +
                    "/g" + kMicro + " --set perturb.sigma_h=0") == 0);

    auto recon = from_ddat<float>(read_ddat(out + "/r/recon.ddt"));
    auto gen = from_ddat<float>(read_ddat(out + "/g/images.ddt"));
    REQUIRE(gen.shape() == recon.shape());
    for (size_t i = 0; i < gen.data().size(); ++i) {
        const float clamped = std::min(1.0f, std::max(-1.0f, recon.data()[i]));
        CHECK(gen.data()[i] == clamped);
    }
}

TEST_CASE("same config and seeds give identical artifact bytes") {
    TempDir tmp("diffaug_cli_det");
    const std::string out = tmp.str();
    REQUIRE(run_cli("make-data --out " + out + "/a" + kMicro) == 0);
    REQUIRE(run_cli("make-data --out " + out + "/b" + kMicro) == 0);
    CHECK(file_hash(out + "/a/train/images.ddt") == file_hash(out + "/b/train/images.ddt"));
    CHECK(file_hash(out + "/a/test/images.ddt") == file_hash(out + "/b/test/images.ddt"));

    REQUIRE(run_cli("train-diffusion --data " + out + "/a/train --out " + out + "/ma" + kMicro) ==
            0);
    REQUIRE(run_cli("train-diffusion --data " + out + "/a/train --out " + out + "/mb" + kMicro) ==
            0);
    CHECK(file_hash(out + "/ma/ckpt/tensors/p000.ddt") ==
          file_hash(out + "/mb/ckpt/tensors/p000.ddt"));
    CHECK(file_hash(out + "/ma/losses.json") == file_hash(out + "/mb/losses.json"));
}

TEST_CASE("dataset and checkpoint round trips") {
    TempDir tmp("diffaug_artifacts");
    auto data = synth_gauss2d(3, 4, 16, 9);
    save_dataset(tmp.str() + "/d", data, "gauss2d", 9);
    auto back = load_dataset(tmp.str() + "/d");
    CHECK(back.images.data() == data.images.data());
    CHECK(back.labels == data.labels);
    CHECK(back.num_classes == 3);

    RunConfig cfg = load_config("", {"data.num_classes=3", "data.per_class=4"});
    Rng rng(4);
    Denoiser<float> model(denoiser_config_from(cfg), rng);
    Rng wrng(5);
    for (auto& [name, p] : model.params()) wrng.fill_normal(p.data_mut(), 0.2);
    save_denoiser(tmp.str() + "/ck", model);
    auto loaded = load_denoiser(tmp.str() + "/ck");
    REQUIRE(loaded.params().size() == model.params().size());
    for (size_t i = 0; i < model.params().size(); ++i)
        CHECK(loaded.params()[i].second.data() == model.params()[i].second.data());

    MultiHeadModel<float> clf(classifier_config_from(cfg), rng);
    save_classifier(tmp.str() + "/cl", clf);
    auto clf2 = load_classifier(tmp.str() + "/cl");
    for (size_t i = 0; i < clf.params().size(); ++i)
        CHECK(clf2.params()[i].second.data() == clf.params()[i].second.data());

    CHECK_THROWS_AS(load_dataset(tmp.str() + "/nope"), DataError);
    CHECK_THROWS_AS(load_denoiser(tmp.str() + "/cl"), DataError);  // wrong kind
}
