#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fewseg/schedule.hpp"

using namespace fewseg;

namespace {

// Independent oracle: cumulative product in extended precision.
std::vector<double> cumprod_oracle(const std::vector<double>& betas) {
    std::vector<double> out(betas.size());
    long double prod = 1.0L;
    for (size_t i = 0; i < betas.size(); ++i) {
        prod *= 1.0L - static_cast<long double>(betas[i]);
        out[i] = static_cast<double>(prod);
    }
    return out;
}

Latent small_latent(std::initializer_list<double> vals) {
    Latent z(1, static_cast<int>(vals.size()), 1);
    int i = 0;
    for (double v : vals) z.a[static_cast<size_t>(i++)] = v;
    return z;
}

}  // namespace

TEST_CASE("constant schedule matches the direct product oracle") {
    NoiseSchedule s = make_schedule(3, 0.1, 0.1, ScheduleKind::kConstant);
    CHECK(s.alpha_bars[0] == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s.alpha_bars[1] == doctest::Approx(0.81).epsilon(1e-12));
    CHECK(s.alpha_bars[2] == doctest::Approx(0.729).epsilon(1e-12));
}

TEST_CASE("near-zero betas give alpha_bar near one") {
    NoiseSchedule s = make_schedule(5, 1e-12, 1e-12, ScheduleKind::kLinear);
    for (double ab : s.alpha_bars) CHECK(ab == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("scaled_linear endpoints reproduce the configured betas") {
    NoiseSchedule s = make_schedule(1000, 0.00085, 0.012, ScheduleKind::kScaledLinear);
    CHECK(s.betas[0] == doctest::Approx(0.00085).epsilon(1e-12));
    CHECK(s.betas[999] == doctest::Approx(0.012).epsilon(1e-12));
    // strictly decreasing cumulative products in (0,1]
    for (int t = 1; t < s.steps; ++t) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    CHECK(s.alpha_bars[0] > 0.0);
    CHECK(s.alpha_bars[0] <= 1.0);
}

TEST_CASE("alpha_bars track the running-product oracle over random configs") {
    Rng rng(1234);
    for (int it = 0; it < 100; ++it) {
        int steps = rng.uniform_int(1, 1000);
        double b0 = 1e-5 + 0.4 * rng.uniform();
        double b1 = b0 + (0.98 - b0) * rng.uniform();
        auto kind = static_cast<ScheduleKind>(rng.uniform_int(0, 2));
        NoiseSchedule s = make_schedule(steps, b0, b1, kind);
        auto oracle = cumprod_oracle(s.betas);
        for (int t = 0; t < steps; ++t)
            CHECK(std::abs(s.alpha_bars[t] - oracle[t]) < 1e-12);
    }
}

TEST_CASE("schedule rejects invalid arguments") {
    CHECK_THROWS_AS(make_schedule(0, 0.1, 0.2, ScheduleKind::kLinear), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.2, ScheduleKind::kLinear), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 0.2, ScheduleKind::kLinear), std::invalid_argument);
    CHECK_THROWS_AS(make_schedule(10, 0.3, 1.0, ScheduleKind::kLinear), std::invalid_argument);
}

TEST_CASE("scaled_linear equals linear when the endpoints coincide") {
    NoiseSchedule a = make_schedule(64, 0.02, 0.02, ScheduleKind::kScaledLinear);
    NoiseSchedule b = make_schedule(64, 0.02, 0.02, ScheduleKind::kLinear);
    for (int t = 0; t < 64; ++t) CHECK(a.betas[t] == doctest::Approx(b.betas[t]).epsilon(1e-15));
}

TEST_CASE("add_noise endpoint behavior and hand value") {
    // crafted schedules with exact alpha_bar values
    NoiseSchedule s;
    s.steps = 3;
    s.betas = {0.0, 0.0, 0.0};
    s.alpha_bars = {1.0, 0.25, 0.0};

    Latent z = small_latent({1.0, -2.0});
    NoiseSample eps;
    eps.eps = small_latent({0.5, 0.25});

    Latent at1 = add_noise(z, eps, 0, s);
    CHECK(at1.a[0] == 1.0);
    CHECK(at1.a[1] == -2.0);

    Latent at0 = add_noise(z, eps, 2, s);
    CHECK(at0.a[0] == 0.5);
    CHECK(at0.a[1] == 0.25);

    Latent mid = add_noise(z, eps, 1, s);
    CHECK(mid.a[0] == doctest::Approx(0.5 * 1.0 + 0.8660254037844386 * 0.5).epsilon(1e-12));
    CHECK(mid.a[1] == doctest::Approx(0.5 * -2.0 + 0.8660254037844386 * 0.25).epsilon(1e-12));
}

TEST_CASE("add_noise is linear in z and eps") {
    NoiseSchedule s = make_schedule(10, 0.05, 0.3, ScheduleKind::kScaledLinear);
    Rng rng(7);
    Latent z(2, 2, 3);
    NoiseSample eps;
    eps.eps = Latent(2, 2, 3);
    for (auto& v : z.a) v = rng.normal();
    for (auto& v : eps.eps.a) v = rng.normal();

    double a = 3.25;
    Latent za = z, ea = eps.eps;
    for (auto& v : za.a) v *= a;
    for (auto& v : ea.a) v *= a;
    NoiseSample eps_a;
    eps_a.eps = ea;

    Latent lhs = add_noise(za, eps_a, 4, s);
    Latent rhs = add_noise(z, eps, 4, s);
    for (size_t i = 0; i < lhs.a.size(); ++i)
        CHECK(lhs.a[i] == doctest::Approx(a * rhs.a[i]).epsilon(1e-12));
}

TEST_CASE("mix_image_as_noise mirrors add_noise with an image in the noise slot") {
    NoiseSchedule s;
    s.steps = 2;
    s.betas = {0.0, 0.0};
    s.alpha_bars = {1.0, 0.25};

    Latent z_mq = small_latent({0.0, 0.0});
    Latent z_q = small_latent({1.0, -1.0});
    Latent out = mix_image_as_noise(z_mq, z_q, 1, s);
    CHECK(out.a[0] == doctest::Approx(0.8660254037844386).epsilon(1e-12));
    CHECK(out.a[1] == doctest::Approx(-0.8660254037844386).epsilon(1e-12));

    Latent ident = mix_image_as_noise(z_q, z_mq, 0, s);
    CHECK(ident.a[0] == 1.0);
    CHECK(ident.a[1] == -1.0);
}

TEST_CASE("strong schedule late mixing is dominated by the image latent") {
    NoiseSchedule s = make_schedule(1000, 0.0272, 0.384, ScheduleKind::kScaledLinear);
    CHECK(std::sqrt(1.0 - s.alpha_bars[999]) > 0.999999);
    Rng rng(42);
    Latent z_mq(2, 2, 4), z_q(2, 2, 4);
    for (auto& v : z_mq.a) v = rng.normal();
    for (auto& v : z_q.a) v = rng.normal();
    Latent mixed = mix_image_as_noise(z_mq, z_q, 999, s);
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < mixed.a.size(); ++i) {
        dot += mixed.a[i] * z_q.a[i];
        na += mixed.a[i] * mixed.a[i];
        nb += z_q.a[i] * z_q.a[i];
    }
    CHECK(dot / std::sqrt(na * nb) > 0.99);
}

TEST_CASE("eps_from_prediction inverts add_noise given the true latent") {
    NoiseSchedule s = make_schedule(50, 0.01, 0.4, ScheduleKind::kScaledLinear);
    Rng rng(99);
    Latent z(4, 4, 6);
    for (auto& v : z.a) v = rng.normal();
    NoiseSample eps = make_noise(4, 4, 6, 2024);
    for (int t : {0, 10, 49}) {
        Latent z_t = add_noise(z, eps, t, s);
        Latent rec = eps_from_prediction(z_t, z, t, s);
        for (size_t i = 0; i < rec.a.size(); ++i)
            CHECK(rec.a[i] == doctest::Approx(eps.eps.a[i]).epsilon(1e-6));
    }
}

TEST_CASE("eps_from_prediction endpoints") {
    NoiseSchedule s;
    s.steps = 3;
    s.betas = {0.0, 0.0, 0.0};
    s.alpha_bars = {1.0, 0.25, 0.0};

    Latent z_t = small_latent({0.7, -0.4});
    Latent z_hat = small_latent({0.1, 0.2});

    CHECK_THROWS_AS(eps_from_prediction(z_t, z_hat, 0, s), std::invalid_argument);

    Latent at0 = eps_from_prediction(z_t, z_hat, 2, s);
    CHECK(at0.a[0] == 0.7);
    CHECK(at0.a[1] == -0.4);

    // scalar oracle at alpha_bar = 0.25: (z_t - 0.5*z_hat) / sqrt(0.75)
    Latent mid = eps_from_prediction(z_t, z_hat, 1, s);
    CHECK(mid.a[0] == doctest::Approx((0.7 - 0.05) / 0.8660254037844386).epsilon(1e-12));
    CHECK(mid.a[1] == doctest::Approx((-0.4 - 0.1) / 0.8660254037844386).epsilon(1e-12));
}

TEST_CASE("noise sampling is deterministic in the seed and shape-checked") {
    NoiseSample a = make_noise(2, 3, 4, 555);
    NoiseSample b = make_noise(2, 3, 4, 555);
    CHECK(a.eps.a == b.eps.a);
    NoiseSample c = make_noise(2, 3, 4, 556);
    CHECK(a.eps.a != c.eps.a);

    NoiseSchedule s = make_schedule(4, 0.1, 0.2, ScheduleKind::kLinear);
    Latent z(2, 3, 4);
    CHECK_THROWS_AS(add_noise(z, make_noise(2, 3, 5, 0), 0, s), std::invalid_argument);
    CHECK_THROWS_AS(add_noise(z, make_noise(2, 3, 4, 0), 4, s), std::invalid_argument);
}
