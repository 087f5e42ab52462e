#include "fewseg/autodiff.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fewseg::ad {

const Mat& Var::val() const {
    if (!tape_) throw std::logic_error("Var: unbound handle");
    return tape_->val(*this);
}

const Mat& Var::grad() const {
    if (!tape_) throw std::logic_error("Var: unbound handle");
    return tape_->grad(*this);
}

Var Tape::push(Mat val, std::function<void(Tape&, int)> back) {
    Node n;
    n.val = std::move(val);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Mat v) {
    return push(std::move(v), nullptr);
}

Var Tape::param(const Mat& value, Mat* sink) {
    Var out = push(value, nullptr);
    node(out).sink = sink;
    return out;
}

Var Tape::matmul(Var a, Var b) {
    Mat out = fewseg::matmul(a.val(), b.val());
    int ia = a.idx_, ib = b.idx_;
    return push(std::move(out), [ia, ib](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat da = fewseg::matmul_nt(go, t.v(ib));
        Mat db = fewseg::matmul_tn(t.v(ia), go);
        Mat& ga = t.g(ia);
        for (size_t i = 0; i < da.a.size(); ++i) ga.a[i] += da.a[i];
        Mat& gb = t.g(ib);
        for (size_t i = 0; i < db.a.size(); ++i) gb.a[i] += db.a[i];
    });
}

Var Tape::matmul_nt(Var a, Var b) {
    Mat out = fewseg::matmul_nt(a.val(), b.val());
    int ia = a.idx_, ib = b.idx_;
    return push(std::move(out), [ia, ib](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat da = fewseg::matmul(go, t.v(ib));
        Mat db = fewseg::matmul_tn(go, t.v(ia));
        Mat& ga = t.g(ia);
        for (size_t i = 0; i < da.a.size(); ++i) ga.a[i] += da.a[i];
        Mat& gb = t.g(ib);
        for (size_t i = 0; i < db.a.size(); ++i) gb.a[i] += db.a[i];
    });
}

Var Tape::add(Var a, Var b) {
    const Mat& av = a.val();
    const Mat& bv = b.val();
    if (av.rows != bv.rows || av.cols != bv.cols) throw std::invalid_argument("add: shape mismatch");
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] = av.a[i] + bv.a[i];
    int ia = a.idx_, ib = b.idx_;
    return push(std::move(out), [ia, ib](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        Mat& gb = t.g(ib);
        for (size_t i = 0; i < go.a.size(); ++i) {
            ga.a[i] += go.a[i];
            gb.a[i] += go.a[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    const Mat& av = a.val();
    const Mat& bv = b.val();
    if (av.rows != bv.rows || av.cols != bv.cols) throw std::invalid_argument("sub: shape mismatch");
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] = av.a[i] - bv.a[i];
    int ia = a.idx_, ib = b.idx_;
    return push(std::move(out), [ia, ib](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        Mat& gb = t.g(ib);
        for (size_t i = 0; i < go.a.size(); ++i) {
            ga.a[i] += go.a[i];
            gb.a[i] -= go.a[i];
        }
    });
}

Var Tape::scale(Var a, double s) {
    const Mat& av = a.val();
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] = av.a[i] * s;
    int ia = a.idx_;
    return push(std::move(out), [ia, s](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        for (size_t i = 0; i < go.a.size(); ++i) ga.a[i] += go.a[i] * s;
    });
}

Var Tape::hadamard(Var a, Var b) {
    const Mat& av = a.val();
    const Mat& bv = b.val();
    if (av.rows != bv.rows || av.cols != bv.cols)
        throw std::invalid_argument("hadamard: shape mismatch");
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < out.a.size(); ++i) out.a[i] = av.a[i] * bv.a[i];
    int ia = a.idx_, ib = b.idx_;
    return push(std::move(out), [ia, ib](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        Mat& gb = t.g(ib);
        const Mat& av2 = t.v(ia);
        const Mat& bv2 = t.v(ib);
        for (size_t i = 0; i < go.a.size(); ++i) {
            ga.a[i] += go.a[i] * bv2.a[i];
            gb.a[i] += go.a[i] * av2.a[i];
        }
    });
}

Var Tape::add_rowvec(Var a, Var v) {
    const Mat& av = a.val();
    const Mat& vv = v.val();
    if (vv.rows != 1 || vv.cols != av.cols)
        throw std::invalid_argument("add_rowvec: vector must be 1 x cols");
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < av.cols; ++c) out.at(r, c) = av.at(r, c) + vv.at(0, c);
    int ia = a.idx_, iv = v.idx_;
    return push(std::move(out), [ia, iv](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        Mat& gv = t.g(iv);
        for (int r = 0; r < go.rows; ++r)
            for (int c = 0; c < go.cols; ++c) {
                ga.at(r, c) += go.at(r, c);
                gv.at(0, c) += go.at(r, c);
            }
    });
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int cols = parts[0].val().cols;
    int rows = 0;
    for (const Var& p : parts) {
        if (p.val().cols != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.val().rows;
    }
    Mat out(rows, cols);
    std::vector<int> ids;
    std::vector<int> offsets;
    int r0 = 0;
    for (const Var& p : parts) {
        const Mat& pv = p.val();
        std::copy(pv.a.begin(), pv.a.end(), out.a.begin() + static_cast<size_t>(r0) * cols);
        ids.push_back(p.idx_);
        offsets.push_back(r0);
        r0 += pv.rows;
    }
    return push(std::move(out), [ids, offsets, cols](Tape& t, int self) {
        const Mat& go = t.g(self);
        for (size_t k = 0; k < ids.size(); ++k) {
            Mat& gp = t.g(ids[k]);
            size_t base = static_cast<size_t>(offsets[k]) * cols;
            for (size_t i = 0; i < gp.a.size(); ++i) gp.a[i] += go.a[base + i];
        }
    });
}

Var Tape::slice_rows(Var a, int r0, int n) {
    const Mat& av = a.val();
    if (r0 < 0 || n < 0 || r0 + n > av.rows) throw std::invalid_argument("slice_rows: out of range");
    Mat out(n, av.cols);
    std::copy(av.a.begin() + static_cast<size_t>(r0) * av.cols,
              av.a.begin() + static_cast<size_t>(r0 + n) * av.cols, out.a.begin());
    int ia = a.idx_;
    int cols = av.cols;
    return push(std::move(out), [ia, r0, cols](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        size_t base = static_cast<size_t>(r0) * cols;
        for (size_t i = 0; i < go.a.size(); ++i) ga.a[base + i] += go.a[i];
    });
}

Var Tape::slice_cols(Var a, int c0, int n) {
    const Mat& av = a.val();
    if (c0 < 0 || n < 0 || c0 + n > av.cols) throw std::invalid_argument("slice_cols: out of range");
    Mat out(av.rows, n);
    for (int r = 0; r < av.rows; ++r)
        for (int c = 0; c < n; ++c) out.at(r, c) = av.at(r, c0 + c);
    int ia = a.idx_;
    return push(std::move(out), [ia, c0](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        for (int r = 0; r < go.rows; ++r)
            for (int c = 0; c < go.cols; ++c) ga.at(r, c0 + c) += go.at(r, c);
    });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int rows = parts[0].val().rows;
    int cols = 0;
    for (const Var& p : parts) {
        if (p.val().rows != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.val().cols;
    }
    Mat out(rows, cols);
    std::vector<int> ids;
    std::vector<int> offsets;
    int c0 = 0;
    for (const Var& p : parts) {
        const Mat& pv = p.val();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < pv.cols; ++c) out.at(r, c0 + c) = pv.at(r, c);
        ids.push_back(p.idx_);
        offsets.push_back(c0);
        c0 += pv.cols;
    }
    return push(std::move(out), [ids, offsets](Tape& t, int self) {
        const Mat& go = t.g(self);
        for (size_t k = 0; k < ids.size(); ++k) {
            Mat& gp = t.g(ids[k]);
            int off = offsets[k];
            for (int r = 0; r < gp.rows; ++r)
                for (int c = 0; c < gp.cols; ++c) gp.at(r, c) += go.at(r, off + c);
        }
    });
}

Var Tape::gather_rows(Var a, std::vector<int> idx) {
    const Mat& av = a.val();
    Mat out(static_cast<int>(idx.size()), av.cols);
    for (size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] < 0 || idx[k] >= av.rows) throw std::invalid_argument("gather_rows: index out of range");
        for (int c = 0; c < av.cols; ++c) out.at(static_cast<int>(k), c) = av.at(idx[k], c);
    }
    int ia = a.idx_;
    return push(std::move(out), [ia, idx = std::move(idx)](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        for (size_t k = 0; k < idx.size(); ++k)
            for (int c = 0; c < go.cols; ++c) ga.at(idx[k], c) += go.at(static_cast<int>(k), c);
    });
}

Var Tape::softmax_rows(Var a, const std::vector<uint8_t>* col_mask) {
    const Mat& av = a.val();
    std::vector<uint8_t> mask;
    if (col_mask) {
        if (static_cast<int>(col_mask->size()) != av.cols)
            throw std::invalid_argument("softmax_rows: mask length != cols");
        mask = *col_mask;
    } else {
        mask.assign(static_cast<size_t>(av.cols), 1);
    }
    bool any = false;
    for (uint8_t m : mask) any = any || m;
    if (!any) throw std::invalid_argument("softmax_rows: all columns masked");

    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < av.cols; ++c)
            if (mask[static_cast<size_t>(c)] && av.at(r, c) > mx) mx = av.at(r, c);
        double z = 0.0;
        for (int c = 0; c < av.cols; ++c) {
            if (mask[static_cast<size_t>(c)]) {
                double e = std::exp(av.at(r, c) - mx);
                out.at(r, c) = e;
                z += e;
            } else {
                out.at(r, c) = 0.0;
            }
        }
        for (int c = 0; c < av.cols; ++c) out.at(r, c) /= z;
    }
    int ia = a.idx_;
    return push(std::move(out), [ia](Tape& t, int self) {
        const Mat& p = t.v(self);
        const Mat& go = t.g(self);
        Mat& ga = t.g(ia);
        for (int r = 0; r < p.rows; ++r) {
            double dot = 0.0;
            for (int c = 0; c < p.cols; ++c) dot += p.at(r, c) * go.at(r, c);
            for (int c = 0; c < p.cols; ++c) ga.at(r, c) += p.at(r, c) * (go.at(r, c) - dot);
        }
    });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Var Tape::gelu(Var a) {
    const Mat& av = a.val();
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < out.a.size(); ++i) {
        double x = av.a[i];
        out.a[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    int ia = a.idx_;
    return push(std::move(out), [ia](Tape& t, int self) {
        const Mat& go = t.g(self);
        const Mat& av2 = t.v(ia);
        Mat& ga = t.g(ia);
        for (size_t i = 0; i < go.a.size(); ++i) {
            double x = av2.a[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            ga.a[i] += go.a[i] * (cdf + x * pdf);
        }
    });
}

Var Tape::silu(Var a) {
    const Mat& av = a.val();
    Mat out(av.rows, av.cols);
    for (size_t i = 0; i < out.a.size(); ++i) {
        double x = av.a[i];
        out.a[i] = x / (1.0 + std::exp(-x));
    }
    int ia = a.idx_;
    return push(std::move(out), [ia](Tape& t, int self) {
        const Mat& go = t.g(self);
        const Mat& av2 = t.v(ia);
        Mat& ga = t.g(ia);
        for (size_t i = 0; i < go.a.size(); ++i) {
            double x = av2.a[i];
            double sig = 1.0 / (1.0 + std::exp(-x));
            ga.a[i] += go.a[i] * sig * (1.0 + x * (1.0 - sig));
        }
    });
}

Var Tape::layernorm_rows(Var a, Var gain, Var bias) {
    const Mat& av = a.val();
    const Mat& gv = gain.val();
    const Mat& bv = bias.val();
    if (gv.rows != 1 || bv.rows != 1 || gv.cols != av.cols || bv.cols != av.cols)
        throw std::invalid_argument("layernorm_rows: gain/bias must be 1 x cols");
    constexpr double kEps = 1e-5;
    Mat out(av.rows, av.cols);
    for (int r = 0; r < av.rows; ++r) {
        double mean = 0.0;
        for (int c = 0; c < av.cols; ++c) mean += av.at(r, c);
        mean /= av.cols;
        double var = 0.0;
        for (int c = 0; c < av.cols; ++c) {
            double d = av.at(r, c) - mean;
            var += d * d;
        }
        var /= av.cols;
        double inv = 1.0 / std::sqrt(var + kEps);
        for (int c = 0; c < av.cols; ++c)
            out.at(r, c) = (av.at(r, c) - mean) * inv * gv.at(0, c) + bv.at(0, c);
    }
    int ia = a.idx_, ig = gain.idx_, ib = bias.idx_;
    return push(std::move(out), [ia, ig, ib](Tape& t, int self) {
        const Mat& go = t.g(self);
        const Mat& av2 = t.v(ia);
        const Mat& gv2 = t.v(ig);
        Mat& ga = t.g(ia);
        Mat& gg = t.g(ig);
        Mat& gb = t.g(ib);
        constexpr double kEps = 1e-5;
        int cols = av2.cols;
        for (int r = 0; r < av2.rows; ++r) {
            double mean = 0.0;
            for (int c = 0; c < cols; ++c) mean += av2.at(r, c);
            mean /= cols;
            double var = 0.0;
            for (int c = 0; c < cols; ++c) {
                double d = av2.at(r, c) - mean;
                var += d * d;
            }
            var /= cols;
            double inv = 1.0 / std::sqrt(var + kEps);
            double sum_dxhat = 0.0;
            double sum_dxhat_xhat = 0.0;
            for (int c = 0; c < cols; ++c) {
                double xhat = (av2.at(r, c) - mean) * inv;
                double dxhat = go.at(r, c) * gv2.at(0, c);
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                gg.at(0, c) += go.at(r, c) * xhat;
                gb.at(0, c) += go.at(r, c);
            }
            for (int c = 0; c < cols; ++c) {
                double xhat = (av2.at(r, c) - mean) * inv;
                double dxhat = go.at(r, c) * gv2.at(0, c);
                ga.at(r, c) += inv * (dxhat - sum_dxhat / cols - xhat * sum_dxhat_xhat / cols);
            }
        }
    });
}

namespace {
struct ConvDims {
    int oh, ow;
};
ConvDims conv_out_dims(int h, int w, int kh, int kw, int stride, int pad) {
    return {(h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1};
}
}  // namespace

Var Tape::conv2d(Var x, int h, int w, Var kernel, Var bias, int kh, int kw, int stride, int pad) {
    const Mat& xv = x.val();
    const Mat& kv = kernel.val();
    const Mat& bv = bias.val();
    if (xv.rows != h * w) throw std::invalid_argument("conv2d: token count != h*w");
    int cin = xv.cols;
    if (kv.cols != cin * kh * kw) throw std::invalid_argument("conv2d: kernel column count mismatch");
    int cout = kv.rows;
    if (bv.rows != 1 || bv.cols != cout) throw std::invalid_argument("conv2d: bias shape mismatch");
    auto [oh, ow] = conv_out_dims(h, w, kh, kw, stride, pad);

    Mat out(oh * ow, cout);
    std::vector<double> partial(static_cast<size_t>(cin));
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            for (int co = 0; co < cout; ++co) {
                for (int ci = 0; ci < cin; ++ci) {
                    double acc = 0.0;
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            acc += kv.at(co, (ci * kh + ky) * kw + kx) * xv.at(iy * w + ix, ci);
                        }
                    }
                    partial[static_cast<size_t>(ci)] = acc;
                }
                out.at(oy * ow + ox, co) = pairwise_sum(partial.data(), cin) + bv.at(0, co);
            }
        }
    }
    int ix_ = x.idx_, ik = kernel.idx_, ib = bias.idx_;
    return push(std::move(out), [ix_, ik, ib, h, w, kh, kw, stride, pad](Tape& t, int self) {
        const Mat& go = t.g(self);
        const Mat& xv2 = t.v(ix_);
        const Mat& kv2 = t.v(ik);
        Mat& gx = t.g(ix_);
        Mat& gk = t.g(ik);
        Mat& gb = t.g(ib);
        int cin = xv2.cols;
        int cout = kv2.rows;
        auto [oh, ow] = conv_out_dims(h, w, kh, kw, stride, pad);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                for (int co = 0; co < cout; ++co) {
                    double gout = go.at(oy * ow + ox, co);
                    if (gout == 0.0) continue;
                    gb.at(0, co) += gout;
                    for (int ky = 0; ky < kh; ++ky) {
                        int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            for (int ci = 0; ci < cin; ++ci) {
                                int kidx = (ci * kh + ky) * kw + kx;
                                gk.at(co, kidx) += gout * xv2.at(iy * w + ix, ci);
                                gx.at(iy * w + ix, ci) += gout * kv2.at(co, kidx);
                            }
                        }
                    }
                }
            }
        }
    });
}

Var Tape::upsample2x(Var x, int h, int w) {
    const Mat& xv = x.val();
    if (xv.rows != h * w) throw std::invalid_argument("upsample2x: token count != h*w");
    int c = xv.cols;
    Mat out(4 * h * w, c);
    for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < w; ++x2)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    for (int ch = 0; ch < c; ++ch)
                        out.at((2 * y + dy) * (2 * w) + (2 * x2 + dx), ch) = xv.at(y * w + x2, ch);
    int ix_ = x.idx_;
    return push(std::move(out), [ix_, h, w](Tape& t, int self) {
        const Mat& go = t.g(self);
        Mat& gx = t.g(ix_);
        int c = gx.cols;
        for (int y = 0; y < h; ++y)
            for (int x2 = 0; x2 < w; ++x2)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx)
                        for (int ch = 0; ch < c; ++ch)
                            gx.at(y * w + x2, ch) += go.at((2 * y + dy) * (2 * w) + (2 * x2 + dx), ch);
    });
}

Var Tape::mse(Var a, const Mat& target) {
    const Mat& av = a.val();
    if (av.rows != target.rows || av.cols != target.cols)
        throw std::invalid_argument("mse: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < av.a.size(); ++i) {
        double d = av.a[i] - target.a[i];
        acc += d * d;
    }
    Mat out(1, 1);
    out.a[0] = acc / static_cast<double>(av.a.size());
    int ia = a.idx_;
    Mat tgt = target;
    return push(std::move(out), [ia, tgt = std::move(tgt)](Tape& t, int self) {
        const Mat& go = t.g(self);
        const Mat& av2 = t.v(ia);
        Mat& ga = t.g(ia);
        double s = 2.0 * go.a[0] / static_cast<double>(av2.a.size());
        for (size_t i = 0; i < av2.a.size(); ++i) ga.a[i] += s * (av2.a[i] - tgt.a[i]);
    });
}

void Tape::backward(Var loss) {
    if (loss.tape_ != this) throw std::logic_error("backward: loss from another tape");
    const Mat& lv = node(loss).val;
    if (lv.rows != 1 || lv.cols != 1) throw std::invalid_argument("backward: loss must be 1x1");
    for (Node& n : nodes_) {
        n.grad = Mat(n.val.rows, n.val.cols);
    }
    nodes_[static_cast<size_t>(loss.idx_)].grad.a[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.back) n.back(*this, i);
    }
    for (Node& n : nodes_) {
        if (n.sink) {
            for (size_t i = 0; i < n.grad.a.size(); ++i) n.sink->a[i] += n.grad.a[i];
        }
    }
}

}  // namespace fewseg::ad
