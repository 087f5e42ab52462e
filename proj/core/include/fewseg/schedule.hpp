#pragma once

#include <cstdint>
#include <vector>

#include "fewseg/tensor.hpp"

namespace fewseg {

enum class ScheduleKind { kScaledLinear, kLinear, kConstant };

/// Forward-diffusion variance schedule: per-step variances beta_t and the
/// cumulative products alpha_bar_t = prod_{s<=t} (1 - beta_s).
///
/// Timesteps are 0-indexed; t = 0 is the least-noisy step. All schedule
/// math is carried out in doubles so the running product stays within
/// 1e-12 of an independent computation.
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> betas;
    std::vector<double> alpha_bars;
    ScheduleKind kind = ScheduleKind::kScaledLinear;

    double alpha_bar(int t) const;  // range-checked
};

/// Builds a schedule of `steps` variances between beta_start and beta_end.
/// kScaledLinear interpolates linearly in sqrt(beta) (the stable-diffusion
/// convention), kLinear interpolates beta directly, kConstant repeats
/// beta_start. Throws std::invalid_argument for steps < 1 or endpoints
/// outside (0,1) or beta_start > beta_end.
NoiseSchedule make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind);

/// Gaussian perturbation of a latent, deterministic in its seed.
struct NoiseSample {
    Latent eps;
    uint64_t seed = 0;
};

NoiseSample make_noise(int h, int w, int c, uint64_t seed);

/// sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps
Latent add_noise(const Latent& z, const NoiseSample& eps, int t, const NoiseSchedule& sched);

/// Same mixing rule with the noise slot filled by another latent
/// (image-as-noise corruption): sqrt(ab)*z_mq + sqrt(1-ab)*z_q.
Latent mix_image_as_noise(const Latent& z_mq, const Latent& z_q, int t, const NoiseSchedule& sched);

/// Recovers the noise implied by a clean-latent prediction:
/// (z_t - sqrt(ab)*z_hat) / sqrt(1-ab). Throws when alpha_bar_t == 1.
Latent eps_from_prediction(const Latent& z_t, const Latent& z_hat, int t, const NoiseSchedule& sched);

}  // namespace fewseg
