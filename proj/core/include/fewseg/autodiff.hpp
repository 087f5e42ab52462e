#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "fewseg/tensor.hpp"

// Reverse-mode tape over Mat-valued nodes. A forward pass records one node
// per op; backward() sweeps the tape in reverse and accumulates gradients,
// finally adding parameter gradients into their bound sinks.

namespace fewseg::ad {

class Tape;

class Var {
  public:
    Var() = default;
    const Mat& val() const;
    const Mat& grad() const;  // valid after Tape::backward
    bool valid() const { return tape_ != nullptr; }

  private:
    friend class Tape;
    Var(Tape* t, int i) : tape_(t), idx_(i) {}
    Tape* tape_ = nullptr;
    int idx_ = -1;
};

class Tape {
  public:
    Var constant(Mat v);
    // Copies the current parameter value onto the tape; after backward the
    // node's gradient is added into *sink (pass nullptr to discard).
    Var param(const Mat& value, Mat* sink);

    Var matmul(Var a, Var b);
    Var matmul_nt(Var a, Var b);  // a * b^T
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var scale(Var a, double s);
    Var hadamard(Var a, Var b);
    Var add_rowvec(Var a, Var v);  // v is 1 x C, broadcast over rows
    Var concat_rows(const std::vector<Var>& parts);
    Var slice_rows(Var a, int r0, int n);
    Var slice_cols(Var a, int c0, int n);
    Var concat_cols(const std::vector<Var>& parts);
    Var gather_rows(Var a, std::vector<int> idx);
    // Row-wise softmax; col_mask (one byte per column, 1 = keep) excludes
    // columns from max/sum entirely so masked weights are exactly zero.
    // An all-ones mask follows the identical code path as no mask.
    Var softmax_rows(Var a, const std::vector<uint8_t>* col_mask = nullptr);
    Var gelu(Var a);
    Var silu(Var a);
    Var layernorm_rows(Var a, Var gain, Var bias);
    // 3x3-style convolution on token-major maps: x is (h*w) x c_in, kernel
    // is c_out x (c_in*kh*kw) with channel-major taps, bias 1 x c_out.
    // Channel partials are reduced pairwise (see pairwise_sum).
    Var conv2d(Var x, int h, int w, Var kernel, Var bias, int kh, int kw, int stride, int pad);
    Var upsample2x(Var x, int h, int w);
    Var mse(Var a, const Mat& target);  // 1x1 mean squared error

    void backward(Var loss);

    const Mat& val(Var v) const { return nodes_[static_cast<size_t>(v.idx_)].val; }
    const Mat& grad(Var v) const { return nodes_[static_cast<size_t>(v.idx_)].grad; }

  private:
    friend class Var;
    struct Node {
        Mat val;
        Mat grad;
        Mat* sink = nullptr;
        std::function<void(Tape&, int)> back;  // nullptr for leaves
    };
    std::vector<Node> nodes_;

    Var push(Mat val, std::function<void(Tape&, int)> back);
    Node& node(Var v) { return nodes_[static_cast<size_t>(v.idx_)]; }
    Mat& g(int idx) { return nodes_[static_cast<size_t>(idx)].grad; }
    const Mat& v(int idx) const { return nodes_[static_cast<size_t>(idx)].val; }
};

}  // namespace fewseg::ad
