#pragma once

#include <optional>

#include "fewseg/tensor.hpp"

namespace fewseg {

/// How a binary query mask is rendered as the RGB supervision image.
enum class SupervisionForm {
    kWhiteOnBlack,    // mask replicated over the three channels
    kRealFgBlackBg,   // image * mask
    kBlackFgRealBg,   // image * (1 - mask)
    kMaskOverImage,   // 0.5 * image + 0.5 * mask_rgb
};

struct ThresholdConfig {
    enum class Mode { kRelative, kAbsolute };
    Mode mode = Mode::kRelative;
    double tau = 0.25;
};

/// Exact space-to-depth codec standing in for the image/latent transform:
/// each f x f x 3 pixel block becomes one latent site of 3*f*f channels.
/// encode/decode are exact inverses of each other.
class Codec {
  public:
    explicit Codec(int factor = 4);

    int factor() const { return f_; }
    int latent_channels() const { return 3 * f_ * f_; }

    Latent encode(const Image& image) const;
    Image decode(const Latent& latent) const;

  private:
    int f_;
};

Image mask_to_rgb(const Mask& mask, const Image& image, SupervisionForm form);

/// Per-pixel foreground scores in [0,1] from a predicted RGB image.
/// `original` is required for kMaskOverImage, and when provided for
/// kRealFgBlackBg / kBlackFgRealBg the score is normalized by the
/// original's per-pixel brightness, which makes the supervision loop an
/// exact inversion for images bounded away from zero.
Mat mask_scores(const Image& pred, SupervisionForm form, const Image* original = nullptr);

Mask threshold(const Mat& scores, const ThresholdConfig& thr);

Mask rgb_to_mask(const Image& pred, SupervisionForm form, const ThresholdConfig& thr,
                 const Image* original = nullptr);

}  // namespace fewseg
