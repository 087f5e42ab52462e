#include "fewseg/generation.hpp"

#include <cmath>
#include <stdexcept>

namespace fewseg {

void GenerationConfig::validate() const {
    if (schedule_steps < 1) throw std::invalid_argument("GenerationConfig: schedule_steps < 1");
    if (steps < 1) throw std::invalid_argument("GenerationConfig: steps < 1");
    if (process == Process::kOneStep && steps != 1)
        throw std::invalid_argument("GenerationConfig: the one-step process requires steps == 1");
    if (steps > schedule_steps)
        throw std::invalid_argument("GenerationConfig: steps exceed the schedule length");
    if (ensemble < 1) throw std::invalid_argument("GenerationConfig: ensemble < 1");
    if (ensemble > 1 && process != Process::kMultiStepNoise)
        throw std::invalid_argument("GenerationConfig: ensembling applies to multi_step_noise only");
}

NoiseSchedule GenerationConfig::schedule() const {
    return make_schedule(schedule_steps, beta_start, beta_end, schedule_kind);
}

EncodedEpisode encode_episode(const Episode& ep, const UNetConfig& cfg, const Codec& codec,
                              SupervisionForm form) {
    EncodedEpisode out;
    out.class_id = ep.class_id;
    out.query_image = ep.query_image;
    out.query_mask = ep.query_mask;
    out.z_q = codec.encode(ep.query_image);
    out.z_mq = codec.encode(mask_to_rgb(ep.query_mask, ep.query_image, form));
    out.supports.reserve(ep.supports.size());
    for (const auto& [img, mask] : ep.supports)
        out.supports.push_back(prepare_support(img, mask, cfg, codec));
    return out;
}

Latent make_query_input(const Latent& z_q, const Latent* second) {
    Latent out(z_q.h, z_q.w, 2 * z_q.c);
    for (int y = 0; y < z_q.h; ++y)
        for (int x = 0; x < z_q.w; ++x) {
            for (int ch = 0; ch < z_q.c; ++ch) out.at(y, x, ch) = z_q.at(y, x, ch);
            if (second) {
                if (second->h != z_q.h || second->w != z_q.w || second->c != z_q.c)
                    throw std::invalid_argument("make_query_input: channel block shape mismatch");
                for (int ch = 0; ch < z_q.c; ++ch) out.at(y, x, z_q.c + ch) = second->at(y, x, ch);
            }
        }
    return out;
}

TrainSample build_train_sample(const EncodedEpisode& ep, Process process,
                               const NoiseSchedule& sched, Rng& rng, bool fill_query_with_image) {
    TrainSample s;
    s.supports = ep.supports;
    s.target = ep.z_mq;
    switch (process) {
        case Process::kOneStep: {
            s.query_input = make_query_input(ep.z_q, fill_query_with_image ? &ep.z_q : nullptr);
            s.timestep = std::nullopt;
            break;
        }
        case Process::kMultiStepNoise: {
            int t = rng.uniform_int(0, sched.steps - 1);
            NoiseSample eps = make_noise(ep.z_mq.h, ep.z_mq.w, ep.z_mq.c, rng.next_u64());
            Latent noisy = add_noise(ep.z_mq, eps, t, sched);
            s.query_input = make_query_input(ep.z_q, &noisy);
            s.timestep = t;
            break;
        }
        case Process::kMultiStepImage: {
            int t = rng.uniform_int(0, sched.steps - 1);
            Latent mixed = mix_image_as_noise(ep.z_mq, ep.z_q, t, sched);
            s.query_input = make_query_input(ep.z_q, &mixed);
            s.timestep = t;
            break;
        }
    }
    return s;
}

double mse_loss(const Latent& prediction, const Latent& target) {
    if (prediction.h != target.h || prediction.w != target.w || prediction.c != target.c)
        throw std::invalid_argument("mse_loss: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < prediction.a.size(); ++i) {
        double d = prediction.a[i] - target.a[i];
        acc += d * d;
    }
    return acc / static_cast<double>(prediction.a.size());
}

Latent ddim_step(const Latent& z_t, const Latent& z_hat, int t, int t_prev,
                 const NoiseSchedule& sched) {
    if (t_prev < -1 || t <= t_prev || t >= sched.steps)
        throw std::invalid_argument("ddim_step: need steps > t > t_prev >= -1");
    if (t_prev == -1) return z_hat;
    Latent eps = eps_from_prediction(z_t, z_hat, t, sched);
    double ab = sched.alpha_bar(t_prev);
    double sa = std::sqrt(ab);
    double sb = std::sqrt(1.0 - ab);
    Latent out(z_t.h, z_t.w, z_t.c);
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] = sa * z_hat.a[i] + sb * eps.a[i];
    return out;
}

std::vector<int> inference_timesteps(int schedule_steps, int infer_steps) {
    if (infer_steps < 1 || infer_steps > schedule_steps)
        throw std::invalid_argument("inference_timesteps: invalid step count");
    std::vector<int> out;
    out.reserve(static_cast<size_t>(infer_steps));
    if (infer_steps == 1) {
        out.push_back(schedule_steps - 1);
        return out;
    }
    for (int i = 0; i < infer_steps; ++i) {
        double frac = static_cast<double>(infer_steps - 1 - i) / (infer_steps - 1);
        out.push_back(static_cast<int>(std::lround(frac * (schedule_steps - 1))));
    }
    return out;
}

Latent multi_resolution_noise(int h, int w, int c, int octaves, double strength, uint64_t seed) {
    if (octaves < 1) throw std::invalid_argument("multi_resolution_noise: octaves < 1");
    Latent out = make_noise(h, w, c, mix_seed(seed, 0)).eps;
    double var = 1.0;
    double s = 1.0;
    for (int o = 1; o < octaves; ++o) {
        int ch = h >> o, cw = w >> o;
        if (ch < 1 || cw < 1) break;
        s *= strength;
        var += s * s;
        Latent coarse = make_noise(ch, cw, c, mix_seed(seed, static_cast<uint64_t>(o))).eps;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                int sy = std::min(ch - 1, y * ch / h);
                int sx = std::min(cw - 1, x * cw / w);
                for (int k = 0; k < c; ++k) out.at(y, x, k) += s * coarse.at(sy, sx, k);
            }
    }
    double norm = 1.0 / std::sqrt(var);
    for (double& v : out.a) v *= norm;
    return out;
}

InferResult infer(const Predictor& predict, const EncodedEpisode& ep, const GenerationConfig& gen,
                  SupervisionForm form, const ThresholdConfig& thr, const Codec& codec,
                  uint64_t seed, bool fill_query_with_image) {
    gen.validate();
    InferResult res;

    if (gen.process == Process::kOneStep) {
        Latent input = make_query_input(ep.z_q, fill_query_with_image ? &ep.z_q : nullptr);
        Latent pred = predict(input, std::nullopt);
        res.unet_calls = 1;
        Image decoded = codec.decode(pred);
        res.scores = mask_scores(decoded, form, &ep.query_image);
        res.mask = threshold(res.scores, thr);
        return res;
    }

    NoiseSchedule sched = gen.schedule();
    std::vector<int> ts = inference_timesteps(gen.schedule_steps, gen.steps);
    Mat mean_scores;
    for (int e = 0; e < gen.ensemble; ++e) {
        Latent current;
        if (gen.process == Process::kMultiStepNoise) {
            current = make_noise(ep.z_q.h, ep.z_q.w, ep.z_q.c,
                                 mix_seed(seed, static_cast<uint64_t>(e)))
                          .eps;
        } else {
            current = ep.z_q;
        }
        for (size_t i = 0; i < ts.size(); ++i) {
            int t = ts[i];
            Latent pred = predict(make_query_input(ep.z_q, &current), t);
            ++res.unet_calls;
            int t_prev = i + 1 < ts.size() ? ts[i + 1] : -1;
            current = ddim_step(current, pred, t, t_prev, sched);
        }
        Image decoded = codec.decode(current);
        Mat scores = mask_scores(decoded, form, &ep.query_image);
        if (e == 0) {
            mean_scores = scores;
        } else {
            for (size_t i = 0; i < scores.a.size(); ++i) mean_scores.a[i] += scores.a[i];
        }
    }
    if (gen.ensemble > 1)
        for (double& v : mean_scores.a) v /= static_cast<double>(gen.ensemble);
    res.scores = mean_scores;
    res.mask = threshold(res.scores, thr);
    return res;
}

}  // namespace fewseg
