// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#include "diffaug/config.hpp"

#include <fstream>

#include "diffaug/ddat.hpp"

namespace diffaug {

using nlohmann::json;

json config_to_json(const RunConfig& c) {
    return json{
        {"data",
         {{"name", c.data.name},
          {"num_classes", c.data.num_classes},
          {"per_class", c.data.per_class},
          {"test_per_class", c.data.test_per_class},
          {"resolution", c.data.resolution},
          {"seed", c.data.seed}}},
        {"diffusion",
         {{"T", c.diffusion.T},
          {"beta_min", c.diffusion.beta_min},
          {"beta_max", c.diffusion.beta_max},
          {"ddim_steps", c.diffusion.ddim_steps},
          {"invert_steps", c.diffusion.invert_steps},
          {"epochs", c.diffusion.epochs},
          {"lr", c.diffusion.lr},
          {"batch", c.diffusion.batch}}},
        {"perturb",
         {{"sigma_h", c.perturb.sigma_h},
          {"n_variants", c.perturb.n_variants},
          {"site", c.perturb.site},
          {"master_seed", c.perturb.master_seed}}},
        {"amst",
         {{"lambda", c.amst.lambda},
          {"tau", c.amst.tau},
          {"K", c.amst.K},
          {"epochs_stage1", c.amst.epochs_stage1},
          {"epochs_stage3", c.amst.epochs_stage3},
          {"batch", c.amst.batch},
          {"lr", c.amst.lr}}},
        {"eval",
         {{"bandwidth", c.eval.bandwidth},
          {"runs", c.eval.runs},
          {"sweep_seeds", c.eval.sweep_seeds},
          {"sweep_variants", c.eval.sweep_variants}}},
    };
}

namespace {

// Merges src into dst, rejecting keys that the defaults do not know.
void merge_checked(json& dst, const json& src, const std::string& prefix) {
    if (!src.is_object())
        throw ConfigError("config: expected an object at '" + (prefix.empty() ? "." : prefix) +
                          "'");
    for (auto it = src.begin(); it != src.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!dst.contains(it.key())) throw ConfigError("config: unknown key '" + path + "'");
        json& slot = dst[it.key()];
        if (slot.is_object()) {
            merge_checked(slot, it.value(), path);
        } else {
            if (slot.is_string() != it.value().is_string() ||
                (slot.is_number() && !it.value().is_number()))
                throw ConfigError("config: wrong type for key '" + path + "'");
            slot = it.value();
        }
    }
}

template <typename T>
T get(const json& doc, const char* section, const char* key) {
    try {
        return doc.at(section).at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad value for '") + section + "." + key +
                          "': " + e.what());
    }
}

}  // namespace

RunConfig config_from_json(const json& doc) {
    RunConfig c;
    c.data.name = get<std::string>(doc, "data", "name");
    c.data.num_classes = get<int>(doc, "data", "num_classes");
    c.data.per_class = get<int>(doc, "data", "per_class");
    c.data.test_per_class = get<int>(doc, "data", "test_per_class");
    c.data.resolution = get<int>(doc, "data", "resolution");
    c.data.seed = get<uint64_t>(doc, "data", "seed");

    c.diffusion.T = get<int>(doc, "diffusion", "T");
    c.diffusion.beta_min = get<double>(doc, "diffusion", "beta_min");
    c.diffusion.beta_max = get<double>(doc, "diffusion", "beta_max");
    c.diffusion.ddim_steps = get<int>(doc, "diffusion", "ddim_steps");
    c.diffusion.invert_steps = get<int>(doc, "diffusion", "invert_steps");
    c.diffusion.epochs = get<int>(doc, "diffusion", "epochs");
    c.diffusion.lr = get<double>(doc, "diffusion", "lr");
    c.diffusion.batch = get<int>(doc, "diffusion", "batch");

    c.perturb.sigma_h = get<double>(doc, "perturb", "sigma_h");
    c.perturb.n_variants = get<int>(doc, "perturb", "n_variants");
    c.perturb.site = get<std::string>(doc, "perturb", "site");
    c.perturb.master_seed = get<uint64_t>(doc, "perturb", "master_seed");

    c.amst.lambda = get<double>(doc, "amst", "lambda");
    c.amst.tau = get<double>(doc, "amst", "tau");
    c.amst.K = get<int>(doc, "amst", "K");
    c.amst.epochs_stage1 = get<int>(doc, "amst", "epochs_stage1");
    c.amst.epochs_stage3 = get<int>(doc, "amst", "epochs_stage3");
    c.amst.batch = get<int>(doc, "amst", "batch");
    c.amst.lr = get<double>(doc, "amst", "lr");

    c.eval.bandwidth = get<double>(doc, "eval", "bandwidth");
    c.eval.runs = get<int>(doc, "eval", "runs");
    c.eval.sweep_seeds = get<int>(doc, "eval", "sweep_seeds");
    c.eval.sweep_variants = get<int>(doc, "eval", "sweep_variants");

    if (c.data.name != "shapes" && c.data.name != "gauss2d")
        throw ConfigError("config: data.name must be 'shapes' or 'gauss2d'");
    if (c.data.per_class < 1 || c.data.test_per_class < 1)
        throw ConfigError("config: data.per_class and data.test_per_class must be >= 1");
    if (c.diffusion.T < 1 || c.diffusion.ddim_steps < 1 ||
        c.diffusion.ddim_steps > c.diffusion.T || c.diffusion.invert_steps < 1 ||
        c.diffusion.invert_steps > c.diffusion.T)
        throw ConfigError("config: diffusion step counts out of range");
    if (!(c.diffusion.beta_min > 0 && c.diffusion.beta_min <= c.diffusion.beta_max &&
          c.diffusion.beta_max < 1))
        throw ConfigError("config: diffusion.beta bounds invalid");
    if (c.perturb.sigma_h < 0) throw ConfigError("config: perturb.sigma_h must be >= 0");
    if (c.perturb.n_variants < 1) throw ConfigError("config: perturb.n_variants must be >= 1");
    if (c.amst.tau <= 0 || c.amst.lambda < 0 || c.amst.K < 2)
        throw ConfigError("config: amst gate parameters invalid");
    if (c.eval.runs < 1) throw ConfigError("config: eval.runs must be >= 1");
    return c;
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json doc = config_to_json(RunConfig{});
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ConfigError("config: cannot open " + path);
        json file_doc;
        try {
            f >> file_doc;
        } catch (const json::exception& e) {
            throw ConfigError("config: parse error in " + path + ": " + e.what());
        }
        merge_checked(doc, file_doc, "");
    }
    for (const std::string& ov : overrides) {
        const auto eq = ov.find('=');
        const auto dot = ov.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw ConfigError("config: override must be section.key=value, got '" + ov + "'");
        const std::string section = ov.substr(0, dot);
        const std::string key = ov.substr(dot + 1, eq - dot - 1);
        const std::string value = ov.substr(eq + 1);
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            parsed = value;  // plain string
        }
        json patch{{section, {{key, parsed}}}};
        merge_checked(doc, patch, "");
    }
    return config_from_json(doc);
}

uint64_t config_hash(const RunConfig& cfg) {
    const std::string s = config_to_json(cfg).dump();
    return fnv1a64(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

}  // namespace diffaug
