#pragma once

#include <functional>
#include <optional>

#include "fewseg/codec.hpp"
#include "fewseg/dataset.hpp"
#include "fewseg/schedule.hpp"
#include "fewseg/tensor.hpp"
#include "fewseg/unet.hpp"

namespace fewseg {

/// Mask generation process: direct one-step prediction, multi-step
/// denoising from pure noise, or multi-step conversion starting at the
/// image latent.
enum class Process { kOneStep, kMultiStepNoise, kMultiStepImage };

struct GenerationConfig {
    Process process = Process::kOneStep;
    int steps = 1;             // inference steps; the one-step process requires 1
    int schedule_steps = 1000; // length of the training-time variance schedule
    double beta_start = 0.00085;
    double beta_end = 0.012;
    ScheduleKind schedule_kind = ScheduleKind::kScaledLinear;
    int ensemble = 1;          // multi-step-noise only

    void validate() const;
    NoiseSchedule schedule() const;
};

/// An episode already carried into latent space.
struct EncodedEpisode {
    Latent z_q;
    Latent z_mq;  // encoded supervision image of the query mask
    std::vector<PreparedSupport> supports;
    Image query_image;
    Mask query_mask;
    int class_id = 0;
};

EncodedEpisode encode_episode(const Episode& ep, const UNetConfig& cfg, const Codec& codec,
                              SupervisionForm form);

/// concat(z_q, second) along channels; nullptr fills the second half with
/// zeros (the one-step default).
Latent make_query_input(const Latent& z_q, const Latent* second);

struct TrainSample {
    Latent query_input;  // 2c channels
    std::vector<PreparedSupport> supports;
    Latent target;  // always z_mq (clean-latent prediction)
    std::optional<int> timestep;
};

TrainSample build_train_sample(const EncodedEpisode& ep, Process process,
                               const NoiseSchedule& sched, Rng& rng,
                               bool fill_query_with_image = false);

/// Mean squared error over all latent elements.
double mse_loss(const Latent& prediction, const Latent& target);

/// Deterministic denoising update: recovers the implied noise from the
/// clean-latent prediction and re-noises to t_prev; t_prev == -1 is the
/// final step and returns the prediction itself.
Latent ddim_step(const Latent& z_t, const Latent& z_hat, int t, int t_prev,
                 const NoiseSchedule& sched);

/// Descending, evenly spaced timestep subsequence of length infer_steps.
std::vector<int> inference_timesteps(int schedule_steps, int infer_steps);

/// Plain Gaussian noise stacked with nearest-upsampled coarse octaves,
/// rescaled to unit marginal variance. Optional stand-in for annealed
/// multi-resolution noise; the multi-step-noise pipeline defaults to plain
/// Gaussian draws.
Latent multi_resolution_noise(int h, int w, int c, int octaves, double strength, uint64_t seed);

/// One clean-latent prediction given the 2c query input and optional timestep.
using Predictor = std::function<Latent(const Latent& query_input, std::optional<int> timestep)>;

struct InferResult {
    Mask mask;
    Mat scores;
    int unet_calls = 0;
};

InferResult infer(const Predictor& predict, const EncodedEpisode& ep, const GenerationConfig& gen,
                  SupervisionForm form, const ThresholdConfig& thr, const Codec& codec,
                  uint64_t seed, bool fill_query_with_image = false);

}  // namespace fewseg
