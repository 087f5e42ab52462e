#include "fewseg/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace fewseg {

namespace {
using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;
}  // namespace

Mat Mat::full(int r, int c, double v) {
    Mat m(r, c);
    std::fill(m.a.begin(), m.a.end(), v);
    return m;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Mat out(a.rows, b.cols);
    MMap(out.a.data(), out.rows, out.cols) =
        CMap(a.a.data(), a.rows, a.cols) * CMap(b.a.data(), b.rows, b.cols);
    return out;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols != b.cols) throw std::invalid_argument("matmul_nt: inner dimensions differ");
    Mat out(a.rows, b.rows);
    MMap(out.a.data(), out.rows, out.cols) =
        CMap(a.a.data(), a.rows, a.cols) * CMap(b.a.data(), b.rows, b.cols).transpose();
    return out;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows != b.rows) throw std::invalid_argument("matmul_tn: inner dimensions differ");
    Mat out(a.cols, b.cols);
    MMap(out.a.data(), out.rows, out.cols) =
        CMap(a.a.data(), a.rows, a.cols).transpose() * CMap(b.a.data(), b.rows, b.cols);
    return out;
}

double pairwise_sum(const double* v, int n) {
    if (n <= 0) return 0.0;
    if (n == 1) return v[0];
    if (n == 2) return v[0] + v[1];
    int half = n / 2;
    return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

Mat Latent::to_mat() const {
    Mat m(h * w, c);
    m.a = a;
    return m;
}

Latent Latent::from_mat(const Mat& m, int h, int w) {
    if (m.rows != h * w) throw std::invalid_argument("Latent::from_mat: row count != h*w");
    Latent z(h, w, m.cols);
    z.a = m.a;
    return z;
}

size_t Mask::count() const {
    size_t n = 0;
    for (uint8_t v : a) n += v ? 1 : 0;
    return n;
}

Mask resize_nearest(const Mask& m, int out_h, int out_w) {
    Mask out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        int sy = static_cast<int>((y + 0.5) * m.h / out_h);
        if (sy >= m.h) sy = m.h - 1;
        for (int x = 0; x < out_w; ++x) {
            int sx = static_cast<int>((x + 0.5) * m.w / out_w);
            if (sx >= m.w) sx = m.w - 1;
            out.at(y, x) = m.at(sy, sx);
        }
    }
    return out;
}

uint64_t Rng::next_u64() {
    // splitmix64
    s_ += 0x9e3779b97f4a7c15ull;
    uint64_t z = s_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

double Rng::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
}

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi) - static_cast<uint64_t>(lo) + 1;
    // rejection sampling keeps the draw exactly uniform
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed ^ (stream + 0x9e3779b97f4a7c15ull + (seed << 6) + (seed >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

}  // namespace fewseg
