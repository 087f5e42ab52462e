#include "fewseg/codec.hpp"

#include <algorithm>
#include <stdexcept>

namespace fewseg {

Codec::Codec(int factor) : f_(factor) {
    if (factor < 1) throw std::invalid_argument("Codec: factor must be >= 1");
}

Latent Codec::encode(const Image& image) const {
    if (image.h % f_ != 0 || image.w % f_ != 0)
        throw std::invalid_argument("encode: image dimensions not divisible by codec factor");
    Latent z(image.h / f_, image.w / f_, latent_channels());
    for (int y = 0; y < z.h; ++y)
        for (int x = 0; x < z.w; ++x)
            for (int dy = 0; dy < f_; ++dy)
                for (int dx = 0; dx < f_; ++dx)
                    for (int c = 0; c < 3; ++c)
                        z.at(y, x, (dy * f_ + dx) * 3 + c) = image.at(y * f_ + dy, x * f_ + dx, c);
    return z;
}

Image Codec::decode(const Latent& latent) const {
    if (latent.c != latent_channels())
        throw std::invalid_argument("decode: latent channel count does not match codec factor");
    Image img(latent.h * f_, latent.w * f_);
    for (int y = 0; y < latent.h; ++y)
        for (int x = 0; x < latent.w; ++x)
            for (int dy = 0; dy < f_; ++dy)
                for (int dx = 0; dx < f_; ++dx)
                    for (int c = 0; c < 3; ++c) {
                        double v = latent.at(y, x, (dy * f_ + dx) * 3 + c);
                        img.at(y * f_ + dy, x * f_ + dx, c) = std::clamp(v, 0.0, 1.0);
                    }
    return img;
}

Image mask_to_rgb(const Mask& mask, const Image& image, SupervisionForm form) {
    if (mask.h != image.h || mask.w != image.w)
        throw std::invalid_argument("mask_to_rgb: mask and image sizes differ");
    Image out(image.h, image.w);
    for (int y = 0; y < image.h; ++y) {
        for (int x = 0; x < image.w; ++x) {
            double m = mask.at(y, x) ? 1.0 : 0.0;
            for (int c = 0; c < 3; ++c) {
                double px = image.at(y, x, c);
                double v = 0.0;
                switch (form) {
                    case SupervisionForm::kWhiteOnBlack: v = m; break;
                    case SupervisionForm::kRealFgBlackBg: v = px * m; break;
                    case SupervisionForm::kBlackFgRealBg: v = px * (1.0 - m); break;
                    case SupervisionForm::kMaskOverImage: v = 0.5 * px + 0.5 * m; break;
                }
                out.at(y, x, c) = v;
            }
        }
    }
    return out;
}

namespace {
double channel_mean(const Image& img, int y, int x) {
    return (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
}
}  // namespace

Mat mask_scores(const Image& pred, SupervisionForm form, const Image* original) {
    if (form == SupervisionForm::kMaskOverImage && original == nullptr)
        throw std::invalid_argument("mask_scores: mask_over_image form requires the original image");
    if (original && (original->h != pred.h || original->w != pred.w))
        throw std::invalid_argument("mask_scores: original and prediction sizes differ");

    Mat scores(pred.h, pred.w);
    for (int y = 0; y < pred.h; ++y) {
        for (int x = 0; x < pred.w; ++x) {
            double s = 0.0;
            switch (form) {
                case SupervisionForm::kWhiteOnBlack:
                    s = channel_mean(pred, y, x);
                    break;
                case SupervisionForm::kRealFgBlackBg: {
                    s = channel_mean(pred, y, x);
                    if (original) {
                        double denom = channel_mean(*original, y, x);
                        s = denom > 0.0 ? s / denom : 0.0;
                    }
                    break;
                }
                case SupervisionForm::kBlackFgRealBg: {
                    double m = channel_mean(pred, y, x);
                    if (original) {
                        double denom = channel_mean(*original, y, x);
                        s = denom > 0.0 ? 1.0 - m / denom : 0.0;
                    } else {
                        s = 1.0 - m;
                    }
                    break;
                }
                case SupervisionForm::kMaskOverImage: {
                    double acc = 0.0;
                    for (int c = 0; c < 3; ++c)
                        acc += 2.0 * (pred.at(y, x, c) - 0.5 * original->at(y, x, c));
                    s = acc / 3.0;
                    break;
                }
            }
            scores.at(y, x) = std::clamp(s, 0.0, 1.0);
        }
    }
    return scores;
}

Mask threshold(const Mat& scores, const ThresholdConfig& thr) {
    if (thr.tau <= 0.0 || thr.tau >= 1.0)
        throw std::invalid_argument("threshold: tau must lie in (0,1)");
    Mask out(scores.rows, scores.cols);
    double cut = thr.tau;
    if (thr.mode == ThresholdConfig::Mode::kRelative) {
        double mx = 0.0;
        for (double v : scores.a) mx = std::max(mx, v);
        if (mx == 0.0) return out;  // all-zero scores: empty mask
        cut = thr.tau * mx;
    }
    for (size_t i = 0; i < scores.a.size(); ++i) out.a[i] = scores.a[i] > cut ? 1 : 0;
    return out;
}

Mask rgb_to_mask(const Image& pred, SupervisionForm form, const ThresholdConfig& thr,
                 const Image* original) {
    return threshold(mask_scores(pred, form, original), thr);
}

}  // namespace fewseg
