#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "fewseg/codec.hpp"

using namespace fewseg;

namespace {

Image random_image(int h, int w, Rng& rng, double lo = 0.0) {
    Image img(h, w);
    for (auto& v : img.a) v = lo + (1.0 - lo) * rng.uniform();
    return img;
}

Mask random_mask(int h, int w, Rng& rng, double p = 0.4) {
    Mask m(h, w);
    for (auto& v : m.a) v = rng.uniform() < p ? 1 : 0;
    return m;
}

// Brute-force threshold oracle, written directly from the two rules.
Mask threshold_oracle(const Mat& scores, const ThresholdConfig& thr) {
    Mask out(scores.rows, scores.cols);
    if (thr.mode == ThresholdConfig::Mode::kAbsolute) {
        for (size_t i = 0; i < scores.a.size(); ++i) out.a[i] = scores.a[i] > thr.tau ? 1 : 0;
        return out;
    }
    double mx = 0.0;
    for (double v : scores.a)
        if (v > mx) mx = v;
    if (mx == 0.0) return out;
    for (size_t i = 0; i < scores.a.size(); ++i) out.a[i] = scores.a[i] > thr.tau * mx ? 1 : 0;
    return out;
}

}  // namespace

TEST_CASE("encode produces the expected latent geometry") {
    Codec codec(4);
    Image img(16, 16);
    Latent z = codec.encode(img);
    CHECK(z.h == 4);
    CHECK(z.w == 4);
    CHECK(z.c == 48);
    for (double v : z.a) CHECK(v == 0.0);
}

TEST_CASE("encode/decode are exact inverses") {
    Codec codec(4);
    Rng rng(11);
    Image img(16, 24);
    // quantized pixels so clamping cannot alter anything
    for (auto& v : img.a) v = rng.uniform();
    Image back = codec.decode(codec.encode(img));
    CHECK(back.a == img.a);

    Latent z(3, 5, 48);
    for (auto& v : z.a) v = rng.uniform();
    Latent z2 = codec.encode(codec.decode(z));
    CHECK(z2.a == z.a);
}

TEST_CASE("codec rejects bad shapes") {
    Codec codec(4);
    CHECK_THROWS_AS(codec.encode(Image(15, 16)), std::invalid_argument);
    CHECK_THROWS_AS(codec.decode(Latent(2, 2, 47)), std::invalid_argument);
}

TEST_CASE("mask_to_rgb forms") {
    Mask ones(2, 2);
    for (auto& v : ones.a) v = 1;
    Mask zeros(2, 2);
    Image img(2, 2);
    for (auto& v : img.a) v = 0.4;

    Image white = mask_to_rgb(ones, img, SupervisionForm::kWhiteOnBlack);
    for (double v : white.a) CHECK(v == 1.0);

    Image black = mask_to_rgb(zeros, img, SupervisionForm::kRealFgBlackBg);
    for (double v : black.a) CHECK(v == 0.0);

    Image mixed = mask_to_rgb(ones, img, SupervisionForm::kMaskOverImage);
    for (double v : mixed.a) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

    Mask bad(3, 2);
    CHECK_THROWS_AS(mask_to_rgb(bad, img, SupervisionForm::kWhiteOnBlack), std::invalid_argument);
}

TEST_CASE("mask_to_rgb output stays in [0,1]") {
    Rng rng(5);
    for (int it = 0; it < 20; ++it) {
        Image img = random_image(8, 8, rng);
        Mask m = random_mask(8, 8, rng);
        for (auto form :
             {SupervisionForm::kWhiteOnBlack, SupervisionForm::kRealFgBlackBg,
              SupervisionForm::kBlackFgRealBg, SupervisionForm::kMaskOverImage}) {
            Image out = mask_to_rgb(m, img, form);
            for (double v : out.a) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
        }
    }
}

TEST_CASE("threshold matches the elementwise oracle") {
    Mat scores(2, 2);
    scores.at(0, 0) = 0.8;
    scores.at(0, 1) = 0.3;
    scores.at(1, 0) = 0.1;
    scores.at(1, 1) = 0.05;

    ThresholdConfig rel{ThresholdConfig::Mode::kRelative, 0.25};
    Mask m = threshold(scores, rel);
    CHECK(m.at(0, 0) == 1);
    CHECK(m.at(0, 1) == 1);
    CHECK(m.at(1, 0) == 0);
    CHECK(m.at(1, 1) == 0);

    ThresholdConfig abs{ThresholdConfig::Mode::kAbsolute, 0.15};
    Mask ma = threshold(scores, abs);
    CHECK(ma.at(0, 0) == 1);
    CHECK(ma.at(0, 1) == 1);
    CHECK(ma.at(1, 0) == 0);
    CHECK(ma.at(1, 1) == 0);

    Mat zero(3, 3);
    Mask mz = threshold(zero, rel);
    CHECK(mz.count() == 0);

    Rng rng(17);
    for (int it = 0; it < 200; ++it) {
        Mat s(5, 7);
        for (auto& v : s.a) v = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
        ThresholdConfig cfg;
        cfg.mode = rng.uniform() < 0.5 ? ThresholdConfig::Mode::kRelative
                                       : ThresholdConfig::Mode::kAbsolute;
        cfg.tau = 0.05 + 0.9 * rng.uniform();
        Mask got = threshold(s, cfg);
        Mask want = threshold_oracle(s, cfg);
        CHECK(got.a == want.a);
    }
}

TEST_CASE("relative threshold is invariant to positive rescaling") {
    Rng rng(23);
    ThresholdConfig rel{ThresholdConfig::Mode::kRelative, 0.3};
    for (int it = 0; it < 50; ++it) {
        Mat s(4, 4);
        for (auto& v : s.a) v = rng.uniform();
        double a = 0.05 + 0.9 * rng.uniform();  // keep values in range
        Mat sa = s;
        for (auto& v : sa.a) v *= a;
        CHECK(threshold(s, rel).a == threshold(sa, rel).a);
    }
}

TEST_CASE("threshold validates tau") {
    Mat s(1, 1);
    CHECK_THROWS_AS(threshold(s, ThresholdConfig{ThresholdConfig::Mode::kRelative, 0.0}),
                    std::invalid_argument);
    CHECK_THROWS_AS(threshold(s, ThresholdConfig{ThresholdConfig::Mode::kAbsolute, 1.0}),
                    std::invalid_argument);
}

TEST_CASE("rgb_to_mask recovers the mask for each supervision form") {
    Rng rng(31);
    ThresholdConfig thr;  // relative, 0.25
    for (int it = 0; it < 100; ++it) {
        Image img = random_image(8, 12, rng, 0.1);  // bounded away from zero
        Mask m = random_mask(8, 12, rng);
        for (auto form :
             {SupervisionForm::kWhiteOnBlack, SupervisionForm::kRealFgBlackBg,
              SupervisionForm::kBlackFgRealBg, SupervisionForm::kMaskOverImage}) {
            Image pred = mask_to_rgb(m, img, form);
            Mask rec = rgb_to_mask(pred, form, thr, &img);
            CHECK(rec.a == m.a);
        }
    }
}

TEST_CASE("closed loop holds across tau values") {
    Rng rng(37);
    Image img = random_image(8, 8, rng, 0.1);
    Mask m = random_mask(8, 8, rng);
    for (double tau : {0.05, 0.25, 0.5, 0.9}) {
        for (auto mode : {ThresholdConfig::Mode::kRelative, ThresholdConfig::Mode::kAbsolute}) {
            ThresholdConfig thr{mode, tau};
            for (auto form :
                 {SupervisionForm::kWhiteOnBlack, SupervisionForm::kRealFgBlackBg,
                  SupervisionForm::kBlackFgRealBg, SupervisionForm::kMaskOverImage}) {
                Image pred = mask_to_rgb(m, img, form);
                Mask rec = rgb_to_mask(pred, form, thr, &img);
                CHECK(rec.a == m.a);
            }
        }
    }
}

TEST_CASE("mask_over_image decoding requires the original") {
    Image pred(4, 4);
    ThresholdConfig thr;
    CHECK_THROWS_AS(rgb_to_mask(pred, SupervisionForm::kMaskOverImage, thr), std::invalid_argument);
}

TEST_CASE("white-on-black scores and derived thresholding example") {
    // channel means [[0.8,0.3],[0.1,0.05]] with relative tau = 0.25
    Image pred(2, 2);
    double vals[4] = {0.8, 0.3, 0.1, 0.05};
    for (int i = 0; i < 4; ++i)
        for (int c = 0; c < 3; ++c) pred.a[static_cast<size_t>(i) * 3 + c] = vals[i];
    Mask m = rgb_to_mask(pred, SupervisionForm::kWhiteOnBlack,
                         ThresholdConfig{ThresholdConfig::Mode::kRelative, 0.25});
    CHECK(m.at(0, 0) == 1);
    CHECK(m.at(0, 1) == 1);
    CHECK(m.at(1, 0) == 0);
    CHECK(m.at(1, 1) == 0);
}
