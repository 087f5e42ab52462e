#include "fewseg/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace fewseg {

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t >= steps) throw std::invalid_argument("alpha_bar: timestep out of range");
    return alpha_bars[static_cast<size_t>(t)];
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end, ScheduleKind kind) {
    if (steps < 1) throw std::invalid_argument("make_schedule: steps must be >= 1");
    if (!(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");

    NoiseSchedule s;
    s.steps = steps;
    s.kind = kind;
    s.betas.resize(static_cast<size_t>(steps));
    for (int t = 0; t < steps; ++t) {
        double frac = steps > 1 ? static_cast<double>(t) / (steps - 1) : 0.0;
        switch (kind) {
            case ScheduleKind::kScaledLinear: {
                double r = std::sqrt(beta_start) + (std::sqrt(beta_end) - std::sqrt(beta_start)) * frac;
                s.betas[static_cast<size_t>(t)] = r * r;
                break;
            }
            case ScheduleKind::kLinear:
                s.betas[static_cast<size_t>(t)] = beta_start + (beta_end - beta_start) * frac;
                break;
            case ScheduleKind::kConstant:
                s.betas[static_cast<size_t>(t)] = beta_start;
                break;
        }
    }
    s.alpha_bars.resize(static_cast<size_t>(steps));
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        prod *= 1.0 - s.betas[static_cast<size_t>(t)];
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

NoiseSample make_noise(int h, int w, int c, uint64_t seed) {
    NoiseSample n;
    n.seed = seed;
    n.eps = Latent(h, w, c);
    Rng rng(seed);
    for (double& v : n.eps.a) v = rng.normal();
    return n;
}

namespace {
void check_shapes(const Latent& a, const Latent& b, const char* who) {
    if (a.h != b.h || a.w != b.w || a.c != b.c)
        throw std::invalid_argument(std::string(who) + ": latent shapes differ");
}
}  // namespace

Latent add_noise(const Latent& z, const NoiseSample& eps, int t, const NoiseSchedule& sched) {
    check_shapes(z, eps.eps, "add_noise");
    double ab = sched.alpha_bar(t);
    double sa = std::sqrt(ab);
    double sb = std::sqrt(1.0 - ab);
    Latent out(z.h, z.w, z.c);
    for (size_t i = 0; i < z.a.size(); ++i) out.a[i] = sa * z.a[i] + sb * eps.eps.a[i];
    return out;
}

Latent mix_image_as_noise(const Latent& z_mq, const Latent& z_q, int t, const NoiseSchedule& sched) {
    check_shapes(z_mq, z_q, "mix_image_as_noise");
    double ab = sched.alpha_bar(t);
    double sa = std::sqrt(ab);
    double sb = std::sqrt(1.0 - ab);
    Latent out(z_mq.h, z_mq.w, z_mq.c);
    for (size_t i = 0; i < z_mq.a.size(); ++i) out.a[i] = sa * z_mq.a[i] + sb * z_q.a[i];
    return out;
}

Latent eps_from_prediction(const Latent& z_t, const Latent& z_hat, int t, const NoiseSchedule& sched) {
    check_shapes(z_t, z_hat, "eps_from_prediction");
    double ab = sched.alpha_bar(t);
    if (ab >= 1.0) throw std::invalid_argument("eps_from_prediction: alpha_bar == 1 is degenerate");
    double sa = std::sqrt(ab);
    double sb = std::sqrt(1.0 - ab);
    Latent out(z_t.h, z_t.w, z_t.c);
    for (size_t i = 0; i < z_t.a.size(); ++i) out.a[i] = (z_t.a[i] - sa * z_hat.a[i]) / sb;
    return out;
}

}  // namespace fewseg
