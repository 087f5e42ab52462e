#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "fewseg/autodiff.hpp"
#include "fewseg/tensor.hpp"

namespace fewseg {

/// Shared projection weights of one attention layer. The same parameters
/// serve plain self-attention and the fused variants; fusion only changes
/// which keys/values a query row may attend over.
struct AttentionParams {
    Mat wq, wk, wv, wo;
    int num_heads = 4;
    int head_dim = 16;

    int width() const { return num_heads * head_dim; }
    void validate(int token_width, int kv_width) const;
};

/// Flattened spatial features of one image at one layer.
struct FeatureMap {
    Mat tokens;  // L x C
    int h = 0;
    int w = 0;
};

/// Projected key/value rows of one support image at one layer.
struct KVSet {
    Mat keys;
    Mat values;
    int origin = -1;  // support index, -1 for pooled/mixed sets
};

/// Optional capture of per-head attention probability matrices.
struct AttnTrace {
    std::vector<Mat> probs;
};

// ---- graph-level building blocks (shared by the standalone ops and the
// ---- UNet forward pass; gradients come from the tape) ----

struct AttnWeights {
    ad::Var wq, wk, wv, wo;
};

AttnWeights bind_attention(ad::Tape& t, const AttentionParams& p, Mat* gwq = nullptr,
                           Mat* gwk = nullptr, Mat* gwv = nullptr, Mat* gwo = nullptr);

/// Multi-head attention over already-projected rows. key_mask (one byte
/// per key row, 1 = attend) zeroes masked keys exactly.
ad::Var attention_rows(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, int heads, int head_dim,
                       const std::vector<uint8_t>* key_mask = nullptr, AttnTrace* trace = nullptr);

ad::Var self_attention(ad::Tape& t, ad::Var x, const AttnWeights& w, int heads, int head_dim,
                       AttnTrace* trace = nullptr);

/// Query rows attend over [own keys, support keys...]; the projection
/// weights are exactly those of self_attention. key_mask, when given,
/// covers the joint key rows (query tokens first).
ad::Var fused_attention(ad::Tape& t, ad::Var x_q, const std::vector<ad::Var>& supports,
                        const AttnWeights& w, int heads, int head_dim,
                        const std::vector<uint8_t>* joint_key_mask = nullptr,
                        AttnTrace* trace = nullptr);

ad::Var cross_attention(ad::Tape& t, ad::Var x, ad::Var context, const AttnWeights& w, int heads,
                        int head_dim, const std::vector<uint8_t>* key_mask = nullptr,
                        AttnTrace* trace = nullptr);

// ---- standalone operations ----

FeatureMap self_attn(const FeatureMap& x, const AttentionParams& p, AttnTrace* trace = nullptr);

/// KV-fusion self-attention: query tokens attend over the concatenation of
/// their own and all support keys/values. `gates`, when given, holds one
/// byte per token of each support (1 = accessible).
FeatureMap fusion_attn(const FeatureMap& x_q, const std::vector<FeatureMap>& supports,
                       const AttentionParams& p,
                       const std::vector<std::vector<uint8_t>>* gates = nullptr,
                       AttnTrace* trace = nullptr);

/// Joint-query variant: support queries also attend over the concatenated
/// set. The returned query rows equal fusion_attn's output bit for bit.
std::pair<FeatureMap, FeatureMap> qkv_fusion_attn(const FeatureMap& x_q, const FeatureMap& x_s,
                                                  const AttentionParams& p);

FeatureMap cross_attn(const FeatureMap& x, const Mat& tokens, const AttentionParams& p,
                      AttnTrace* trace = nullptr);

/// Uniform sample without replacement of target_len (key,value) rows from
/// the pooled supports; row pairing and pool order are preserved.
KVSet sample_support_kv(const std::vector<KVSet>& kvs, int target_len, uint64_t seed);

/// Sorted uniform sample without replacement of `take` indices from
/// [0, pool). take == pool returns the identity selection.
std::vector<int> sample_indices(int pool, int take, uint64_t seed);

}  // namespace fewseg
