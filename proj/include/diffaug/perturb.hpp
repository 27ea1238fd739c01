// Copyright (c) 2026 diffaug authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "diffaug/datasets.hpp"
#include "diffaug/denoiser.hpp"
#include "diffaug/parallel.hpp"
#include "diffaug/sampler.hpp"

namespace diffaug {

enum class PerturbSite {
    bottleneck,
    latent_x0,
    latent_xT,
    latent_all_steps,
    unet_encoder,
    unet_decoder,
};

inline const char* site_name(PerturbSite s) {
    switch (s) {
        case PerturbSite::bottleneck: return "bottleneck";
        case PerturbSite::latent_x0: return "latent_x0";
        case PerturbSite::latent_xT: return "latent_xT";
        case PerturbSite::latent_all_steps: return "latent_all_steps";
        case PerturbSite::unet_encoder: return "unet_encoder";
        case PerturbSite::unet_decoder: return "unet_decoder";
    }
    return "?";
}

inline PerturbSite site_from_name(const std::string& s) {
    for (PerturbSite p :
         {PerturbSite::bottleneck, PerturbSite::latent_x0, PerturbSite::latent_xT,
          PerturbSite::latent_all_steps, PerturbSite::unet_encoder, PerturbSite::unet_decoder})
        if (s == site_name(p)) return p;
    throw std::invalid_argument("perturb: unknown site '" + s + "'");
}

struct PerturbSpec {
    double sigma_h = 3.0;
    int n_variants = 10;
    PerturbSite site = PerturbSite::bottleneck;
    StepGrid grid;

    void validate() const {
        if (sigma_h < 0.0) throw std::invalid_argument("perturb: sigma_h must be >= 0");
        if (n_variants < 1) throw std::invalid_argument("perturb: n_variants must be >= 1");
    }
};

template <typename T>
struct VariantRecord {
    int64_t seed_index = 0;
    int variant_index = 0;
    ndgrad::Tensor<T> image;  // [1,1,R,R], clamped to [-1,1]
    int seed_label = 0;       // provisional tag, not a trusted label
    uint64_t rng_stream = 0;
    bool ok = true;
};

struct GenerateStats {
    int64_t invert_calls = 0;
    int64_t pair_evals = 0;
    int64_t aborted_variants = 0;
};

namespace detail {

template <typename T>
ndgrad::Tensor<T> clamp_unit(const ndgrad::Tensor<T>& x) {
    std::vector<T> v(x.data());
    for (auto& e : v) e = std::min(T(1), std::max(T(-1), e));
    return ndgrad::Tensor<T>::from_data(x.shape(), std::move(v));
}

template <typename T>
bool finite(const ndgrad::Tensor<T>& x, int64_t slice, int64_t per) {
    const T* p = x.data().data() + slice * per;
    for (int64_t i = 0; i < per; ++i)
        if (!std::isfinite(double(p[i]))) return false;
    return true;
}

// eps_h for a whole variant batch at one timestep; each variant draws from
// its own derived stream so batching cannot change the result.
template <typename T>
ndgrad::Tensor<T> batch_eps_h(const ndgrad::Shape& bshape, double sigma, uint64_t master,
                              int64_t seed_index, int first_variant, int t) {
    const int64_t n = bshape[0];
    const int64_t per = ndgrad::shape_numel(bshape) / n;
    std::vector<T> v(size_t(n * per));
    for (int64_t i = 0; i < n; ++i) {
        Rng rng(Rng::derive(master, {uint64_t(seed_index), uint64_t(first_variant + i),
                                     uint64_t(t)}));
        for (int64_t k = 0; k < per; ++k) v[size_t(i * per + k)] = T(sigma * rng.normal());
    }
    return ndgrad::Tensor<T>::from_data(bshape, std::move(v));
}

template <typename T>
ndgrad::Tensor<T> repeat_batch(const ndgrad::Tensor<T>& x1, int n) {
    std::vector<T> v;
    v.reserve(size_t(x1.numel()) * size_t(n));
    for (int i = 0; i < n; ++i) v.insert(v.end(), x1.data().begin(), x1.data().end());
    ndgrad::Shape s = x1.shape();
    s[0] = n;
    return ndgrad::Tensor<T>::from_data(std::move(s), std::move(v));
}

}  // namespace detail

// One perturbed reverse step: the perturbed prediction feeds the
// predicted-x0 term, the clean prediction feeds the direction term.
template <typename T>
ndgrad::Tensor<T> perturbed_ddim_step(const Denoiser<T>& model, const ndgrad::Tensor<T>& x_t,
                                      int t, int t_prev, int class_id, double sigma_h,
                                      const NoiseSchedule& sched, Rng& rng) {
    if (sigma_h < 0.0) throw std::invalid_argument("perturbed_ddim_step: sigma_h must be >= 0");
    if (sigma_h == 0.0) {
        auto [clean, pert] = model.predict_noise_pair(x_t, t, class_id);
        return ddim_step(x_t, pert, clean, t, t_prev, sched);
    }
    auto bshape = model.bottleneck_shape(x_t.dim(0));
    std::vector<T> nv(size_t(ndgrad::shape_numel(bshape)));
    rng.fill_normal(nv, sigma_h);
    auto eps_h = ndgrad::Tensor<T>::from_data(std::move(bshape), std::move(nv));
    auto [clean, pert] = model.predict_noise_pair(x_t, t, class_id, eps_h);
    return ddim_step(x_t, pert, clean, t, t_prev, sched);
}

// Inverts the seed once, then runs n_variants perturbed reverse processes
// from the shared x_T, drawing fresh bottleneck noise at every step from the
// per-(seed, variant, t) stream. Variants run lockstep as one batch; per-
// sample convolutions make that bit-identical to running them one by one.
template <typename T>
std::vector<VariantRecord<T>> generate_variants(const Denoiser<T>& model,
                                                const ndgrad::Tensor<T>& seed_image,
                                                int class_id, const PerturbSpec& spec,
                                                const NoiseSchedule& sched, uint64_t master_seed,
                                                int64_t seed_index = 0,
                                                GenerateStats* stats = nullptr) {
    spec.validate();
    if (spec.site != PerturbSite::bottleneck)
        throw std::invalid_argument(
            "generate_variants: site must be bottleneck (other sites via perturb_study)");
    check_grid(spec.grid, sched);
    ndgrad::NoGradGuard ng;

    auto inv = ddim_invert<T>(model_noise_fn(model, class_id), seed_image, spec.grid, sched);
    if (stats) stats->invert_calls++;

    const int n = spec.n_variants;
    auto x = detail::repeat_batch(inv.last, n);
    const int64_t per = x.numel() / n;
    std::vector<bool> alive(size_t(n), true);

    for (int i = spec.grid.steps() - 1; i >= 0; --i) {
        const int t = spec.grid.taus[size_t(i)];
        const int t_prev = i > 0 ? spec.grid.taus[size_t(i) - 1] : 0;
        ndgrad::Tensor<T> eps_h;
        if (spec.sigma_h > 0.0)
            eps_h = detail::batch_eps_h<T>(model.bottleneck_shape(n), spec.sigma_h, master_seed,
                                           seed_index, 0, t);
        auto [clean, pert] = model.predict_noise_pair(x, t, class_id, eps_h);
        if (stats) stats->pair_evals++;
        x = ddim_step(x, pert, clean, t, t_prev, sched);
        for (int v = 0; v < n; ++v)
            if (alive[size_t(v)] && !detail::finite(x, v, per)) alive[size_t(v)] = false;
    }

    std::vector<VariantRecord<T>> out;
    out.reserve(size_t(n));
    for (int v = 0; v < n; ++v) {
        VariantRecord<T> rec;
        rec.seed_index = seed_index;
        rec.variant_index = v;
        rec.seed_label = class_id;
        rec.rng_stream = Rng::derive(master_seed, {uint64_t(seed_index), uint64_t(v)});
        rec.ok = alive[size_t(v)];
        if (!rec.ok) {
            if (stats) stats->aborted_variants++;
            out.push_back(std::move(rec));
            continue;
        }
        std::vector<T> img(static_cast<size_t>(per));
        const T* p = x.data().data() + int64_t(v) * per;
        for (int64_t k = 0; k < per; ++k) img[size_t(k)] = std::min(T(1), std::max(T(-1), p[k]));
        ndgrad::Shape s = seed_image.shape();
        rec.image = ndgrad::Tensor<T>::from_data(std::move(s), std::move(img));
        out.push_back(std::move(rec));
    }
    return out;
}

// Expands every image of a dataset with the given spec; parallel over seeds,
// output ordered by (seed, variant) regardless of worker count.
template <typename T>
std::vector<VariantRecord<T>> generate_variants_dataset(const Denoiser<T>& model,
                                                        const Dataset& data,
                                                        const PerturbSpec& spec,
                                                        const NoiseSchedule& sched,
                                                        uint64_t master_seed, int workers = 1,
                                                        GenerateStats* stats = nullptr) {
    spec.validate();
    std::vector<std::vector<VariantRecord<T>>> slots(size_t(data.size()));
    std::vector<GenerateStats> stat_slots(size_t(data.size()));
    parallel_for(data.size(), workers, [&](int64_t i) {
        auto seed = image_at(data, i);
        ndgrad::Tensor<T> seed_t;
        if constexpr (std::is_same_v<T, float>)
            seed_t = seed;
        else {
            std::vector<T> v(seed.data().begin(), seed.data().end());
            seed_t = ndgrad::Tensor<T>::from_data(seed.shape(), std::move(v));
        }
        slots[size_t(i)] = generate_variants(model, seed_t, data.labels[size_t(i)], spec, sched,
                                             master_seed, i, &stat_slots[size_t(i)]);
    });
    std::vector<VariantRecord<T>> out;
    out.reserve(size_t(data.size()) * size_t(spec.n_variants));
    for (auto& s : slots)
        for (auto& r : s) out.push_back(std::move(r));
    if (stats)
        for (const auto& s : stat_slots) {
            stats->invert_calls += s.invert_calls;
            stats->pair_evals += s.pair_evals;
            stats->aborted_variants += s.aborted_variants;
        }
    return out;
}

// Converts ok records to a Dataset carrying the provisional seed labels.
template <typename T>
Dataset variants_to_dataset(const std::vector<VariantRecord<T>>& records, int num_classes) {
    std::vector<ndgrad::Tensor<float>> imgs;
    std::vector<int> labels;
    for (const auto& r : records) {
        if (!r.ok) continue;
        if constexpr (std::is_same_v<T, float>)
            imgs.push_back(r.image);
        else {
            std::vector<float> v(r.image.data().begin(), r.image.data().end());
            imgs.push_back(ndgrad::Tensor<float>::from_data(r.image.shape(), std::move(v)));
        }
        labels.push_back(r.seed_label);
    }
    Dataset d;
    d.images = stack_images(imgs);
    d.labels = std::move(labels);
    d.num_classes = num_classes;
    return d;
}

// The perturbation-site comparison: expands the dataset with noise injected
// at the requested site. Latent sites touch the diffusion state directly;
// feature sites split the step into a perturbed predicted-x0 term and a
// clean direction term, like the main pipeline.
template <typename T>
std::vector<VariantRecord<T>> perturb_study_seed(const Denoiser<T>& model,
                                                 const ndgrad::Tensor<T>& seed_image,
                                                 int class_id, const PerturbSpec& spec,
                                                 const NoiseSchedule& sched, uint64_t master_seed,
                                                 int64_t seed_index) {
    spec.validate();
    check_grid(spec.grid, sched);
    if (spec.site == PerturbSite::bottleneck)
        return generate_variants(model, seed_image, class_id, spec, sched, master_seed,
                                 seed_index);
    ndgrad::NoGradGuard ng;
    auto fn = model_noise_fn(model, class_id);
    const int64_t per = seed_image.numel();

    std::vector<VariantRecord<T>> out;
    auto push = [&](int v, const ndgrad::Tensor<T>& img) {
        VariantRecord<T> rec;
        rec.seed_index = seed_index;
        rec.variant_index = v;
        rec.seed_label = class_id;
        rec.rng_stream = Rng::derive(master_seed, {uint64_t(seed_index), uint64_t(v)});
        rec.ok = img.all_finite();
        if (rec.ok) rec.image = detail::clamp_unit(img);
        out.push_back(rec);
    };
    auto noise_like = [&](uint64_t stream_t, int v) {
        Rng rng(Rng::derive(master_seed, {uint64_t(seed_index), uint64_t(v), stream_t}));
        std::vector<T> nv(static_cast<size_t>(per));
        rng.fill_normal(nv, spec.sigma_h);
        return ndgrad::Tensor<T>::from_data(seed_image.shape(), std::move(nv));
    };

    switch (spec.site) {
        case PerturbSite::latent_x0: {
            auto recon = reconstruct(fn, seed_image, spec.grid, sched);
            for (int v = 0; v < spec.n_variants; ++v)
                push(v, ndgrad::add(recon, noise_like(0, v)));
            break;
        }
        case PerturbSite::latent_xT: {
            auto inv = ddim_invert(fn, seed_image, spec.grid, sched);
            for (int v = 0; v < spec.n_variants; ++v) {
                auto xT = ndgrad::add(inv.last, noise_like(uint64_t(sched.T), v));
                push(v, ddim_sample(fn, xT, spec.grid, sched).last);
            }
            break;
        }
        case PerturbSite::latent_all_steps: {
            auto inv = ddim_invert(fn, seed_image, spec.grid, sched);
            for (int v = 0; v < spec.n_variants; ++v) {
                auto x = inv.last;
                for (int i = spec.grid.steps() - 1; i >= 0; --i) {
                    const int t = spec.grid.taus[size_t(i)];
                    const int t_prev = i > 0 ? spec.grid.taus[size_t(i) - 1] : 0;
                    auto eps = fn(x, t);
                    x = ddim_step(x, eps, eps, t, t_prev, sched);
                    if (t_prev > 0) x = ndgrad::add(x, noise_like(uint64_t(t_prev), v));
                }
                push(v, x);
            }
            break;
        }
        case PerturbSite::unet_encoder:
        case PerturbSite::unet_decoder: {
            const InjectSite inj = spec.site == PerturbSite::unet_encoder ? InjectSite::encoder
                                                                          : InjectSite::decoder;
            auto inv = ddim_invert(fn, seed_image, spec.grid, sched);
            for (int v = 0; v < spec.n_variants; ++v) {
                auto x = inv.last;
                for (int i = spec.grid.steps() - 1; i >= 0; --i) {
                    const int t = spec.grid.taus[size_t(i)];
                    const int t_prev = i > 0 ? spec.grid.taus[size_t(i) - 1] : 0;
                    Rng rng(Rng::derive(master_seed,
                                        {uint64_t(seed_index), uint64_t(v), uint64_t(t)}));
                    auto [clean, pert] =
                        model.predict_noise_site(x, t, class_id, inj, spec.sigma_h, rng);
                    x = ddim_step(x, pert, clean, t, t_prev, sched);
                }
                push(v, x);
            }
            break;
        }
        default:
            break;
    }
    return out;
}

template <typename T>
std::vector<VariantRecord<T>> perturb_study(const Denoiser<T>& model, const Dataset& data,
                                            const PerturbSpec& spec, const NoiseSchedule& sched,
                                            uint64_t master_seed, int workers = 1) {
    spec.validate();
    std::vector<std::vector<VariantRecord<T>>> slots(size_t(data.size()));
    parallel_for(data.size(), workers, [&](int64_t i) {
        auto seed = image_at(data, i);
        ndgrad::Tensor<T> seed_t;
        if constexpr (std::is_same_v<T, float>)
            seed_t = seed;
        else {
            std::vector<T> v(seed.data().begin(), seed.data().end());
            seed_t = ndgrad::Tensor<T>::from_data(seed.shape(), std::move(v));
        }
        slots[size_t(i)] =
            perturb_study_seed(model, seed_t, data.labels[size_t(i)], spec, sched, master_seed, i);
    });
    std::vector<VariantRecord<T>> out;
    for (auto& s : slots)
        for (auto& r : s) out.push_back(std::move(r));
    return out;
}

}  // namespace diffaug
