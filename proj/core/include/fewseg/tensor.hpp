#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fewseg {

// Dense row-major matrix of doubles. All model math runs in 64-bit.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return a[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return a[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return a.size(); }

    static Mat zeros(int r, int c) { return Mat(r, c); }
    static Mat full(int r, int c, double v);
};

Mat matmul(const Mat& a, const Mat& b);     // a * b
Mat matmul_nt(const Mat& a, const Mat& b);  // a * b^T
Mat matmul_tn(const Mat& a, const Mat& b);  // a^T * b

// Sums v[begin, begin+n) by recursive halving. The split point of a
// 2n-element range falls exactly between the two n-element halves, which
// makes block-duplicated summations reproduce the undoubled rounding.
double pairwise_sum(const double* v, int n);

// RGB image, H x W x 3, values in [0,1], channel-minor layout.
struct Image {
    int h = 0;
    int w = 0;
    std::vector<double> a;

    Image() = default;
    Image(int h_, int w_) : h(h_), w(w_), a(static_cast<size_t>(h_) * w_ * 3, 0.0) {}

    double& at(int y, int x, int c) { return a[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    double at(int y, int x, int c) const { return a[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

// Latent grid, h x w x c, token-major (row = y*w+x, then channel).
struct Latent {
    int h = 0;
    int w = 0;
    int c = 0;
    std::vector<double> a;

    Latent() = default;
    Latent(int h_, int w_, int c_) : h(h_), w(w_), c(c_), a(static_cast<size_t>(h_) * w_ * c_, 0.0) {}

    double& at(int y, int x, int ch) { return a[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return a[(static_cast<size_t>(y) * w + x) * c + ch]; }
    size_t size() const { return a.size(); }

    // Token view: rows = h*w, cols = c (same storage order).
    Mat to_mat() const;
    static Latent from_mat(const Mat& m, int h, int w);
};

// Strictly binary mask, H x W, values 0/1.
struct Mask {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> a;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), a(static_cast<size_t>(h_) * w_, 0) {}

    uint8_t& at(int y, int x) { return a[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return a[static_cast<size_t>(y) * w + x]; }
    size_t count() const;
    bool empty_mask() const { return count() == 0; }
};

// Nearest-neighbor mask resize; a target cell is foreground iff its
// nearest source pixel is foreground.
Mask resize_nearest(const Mask& m, int out_h, int out_w);

// Deterministic RNG with hand-rolled distributions so draws are identical
// across standard libraries.
class Rng {
  public:
    explicit Rng(uint64_t seed) : s_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64();
    double uniform();                    // [0,1)
    double normal();                     // standard normal (Box-Muller)
    int uniform_int(int lo, int hi);     // inclusive range
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(0, i);
            std::swap(v[i], v[static_cast<size_t>(j)]);
        }
    }

  private:
    uint64_t s_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stream derivation for independent deterministic RNGs.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace fewseg
