#include "fewseg/attention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace fewseg {

void AttentionParams::validate(int token_width, int kv_width) const {
    int inner = width();
    if (wq.rows != token_width || wq.cols != inner)
        throw std::invalid_argument("AttentionParams: wq shape mismatch");
    if (wk.rows != kv_width || wk.cols != inner)
        throw std::invalid_argument("AttentionParams: wk shape mismatch");
    if (wv.rows != kv_width || wv.cols != inner)
        throw std::invalid_argument("AttentionParams: wv shape mismatch");
    if (wo.rows != inner) throw std::invalid_argument("AttentionParams: wo shape mismatch");
}

AttnWeights bind_attention(ad::Tape& t, const AttentionParams& p, Mat* gwq, Mat* gwk, Mat* gwv,
                           Mat* gwo) {
    return AttnWeights{t.param(p.wq, gwq), t.param(p.wk, gwk), t.param(p.wv, gwv),
                       t.param(p.wo, gwo)};
}

ad::Var attention_rows(ad::Tape& t, ad::Var q, ad::Var k, ad::Var v, int heads, int head_dim,
                       const std::vector<uint8_t>* key_mask, AttnTrace* trace) {
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<ad::Var> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        ad::Var qh = t.slice_cols(q, h * head_dim, head_dim);
        ad::Var kh = t.slice_cols(k, h * head_dim, head_dim);
        ad::Var vh = t.slice_cols(v, h * head_dim, head_dim);
        ad::Var scores = t.scale(t.matmul_nt(qh, kh), inv_sqrt_d);
        ad::Var probs = t.softmax_rows(scores, key_mask);
        if (trace) trace->probs.push_back(probs.val());
        head_outs.push_back(t.matmul(probs, vh));
    }
    return heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
}

ad::Var self_attention(ad::Tape& t, ad::Var x, const AttnWeights& w, int heads, int head_dim,
                       AttnTrace* trace) {
    ad::Var q = t.matmul(x, w.wq);
    ad::Var k = t.matmul(x, w.wk);
    ad::Var v = t.matmul(x, w.wv);
    return t.matmul(attention_rows(t, q, k, v, heads, head_dim, nullptr, trace), w.wo);
}

ad::Var fused_attention(ad::Tape& t, ad::Var x_q, const std::vector<ad::Var>& supports,
                        const AttnWeights& w, int heads, int head_dim,
                        const std::vector<uint8_t>* joint_key_mask, AttnTrace* trace) {
    ad::Var q = t.matmul(x_q, w.wq);
    std::vector<ad::Var> k_parts{t.matmul(x_q, w.wk)};
    std::vector<ad::Var> v_parts{t.matmul(x_q, w.wv)};
    for (const ad::Var& s : supports) {
        k_parts.push_back(t.matmul(s, w.wk));
        v_parts.push_back(t.matmul(s, w.wv));
    }
    ad::Var k = k_parts.size() == 1 ? k_parts[0] : t.concat_rows(k_parts);
    ad::Var v = v_parts.size() == 1 ? v_parts[0] : t.concat_rows(v_parts);
    return t.matmul(attention_rows(t, q, k, v, heads, head_dim, joint_key_mask, trace), w.wo);
}

ad::Var cross_attention(ad::Tape& t, ad::Var x, ad::Var context, const AttnWeights& w, int heads,
                        int head_dim, const std::vector<uint8_t>* key_mask, AttnTrace* trace) {
    ad::Var q = t.matmul(x, w.wq);
    ad::Var k = t.matmul(context, w.wk);
    ad::Var v = t.matmul(context, w.wv);
    return t.matmul(attention_rows(t, q, k, v, heads, head_dim, key_mask, trace), w.wo);
}

FeatureMap self_attn(const FeatureMap& x, const AttentionParams& p, AttnTrace* trace) {
    p.validate(x.tokens.cols, x.tokens.cols);
    ad::Tape t;
    ad::Var xv = t.constant(x.tokens);
    AttnWeights w = bind_attention(t, p);
    ad::Var out = self_attention(t, xv, w, p.num_heads, p.head_dim, trace);
    return FeatureMap{out.val(), x.h, x.w};
}

FeatureMap fusion_attn(const FeatureMap& x_q, const std::vector<FeatureMap>& supports,
                       const AttentionParams& p, const std::vector<std::vector<uint8_t>>* gates,
                       AttnTrace* trace) {
    p.validate(x_q.tokens.cols, x_q.tokens.cols);
    if (gates && gates->size() != supports.size())
        throw std::invalid_argument("fusion_attn: one gate per support expected");

    ad::Tape t;
    ad::Var xv = t.constant(x_q.tokens);
    std::vector<ad::Var> sv;
    sv.reserve(supports.size());
    for (const FeatureMap& s : supports) {
        if (s.tokens.cols != x_q.tokens.cols)
            throw std::invalid_argument("fusion_attn: support width mismatch");
        sv.push_back(t.constant(s.tokens));
    }
    std::vector<uint8_t> joint_mask;
    const std::vector<uint8_t>* mask_ptr = nullptr;
    if (gates) {
        joint_mask.assign(static_cast<size_t>(x_q.tokens.rows), 1);
        for (size_t i = 0; i < supports.size(); ++i) {
            const std::vector<uint8_t>& g = (*gates)[i];
            if (static_cast<int>(g.size()) != supports[i].tokens.rows)
                throw std::invalid_argument("fusion_attn: gate length mismatch");
            joint_mask.insert(joint_mask.end(), g.begin(), g.end());
        }
        mask_ptr = &joint_mask;
    }
    AttnWeights w = bind_attention(t, p);
    ad::Var out = fused_attention(t, xv, sv, w, p.num_heads, p.head_dim, mask_ptr, trace);
    return FeatureMap{out.val(), x_q.h, x_q.w};
}

std::pair<FeatureMap, FeatureMap> qkv_fusion_attn(const FeatureMap& x_q, const FeatureMap& x_s,
                                                  const AttentionParams& p) {
    p.validate(x_q.tokens.cols, x_q.tokens.cols);
    if (x_s.tokens.rows == 0) {
        return {self_attn(x_q, p), FeatureMap{Mat(0, x_q.tokens.cols), x_s.h, x_s.w}};
    }
    if (x_s.tokens.cols != x_q.tokens.cols)
        throw std::invalid_argument("qkv_fusion_attn: width mismatch");

    ad::Tape t;
    ad::Var xq = t.constant(x_q.tokens);
    ad::Var xs = t.constant(x_s.tokens);
    AttnWeights w = bind_attention(t, p);
    // Query rows: identical computation to fused_attention, so the outputs
    // agree bit for bit. Support rows attend over the same joint set.
    ad::Var out_q = fused_attention(t, xq, {xs}, w, p.num_heads, p.head_dim);
    ad::Var qs = t.matmul(xs, w.wq);
    std::vector<ad::Var> k_parts{t.matmul(xq, w.wk), t.matmul(xs, w.wk)};
    std::vector<ad::Var> v_parts{t.matmul(xq, w.wv), t.matmul(xs, w.wv)};
    ad::Var k = t.concat_rows(k_parts);
    ad::Var v = t.concat_rows(v_parts);
    ad::Var out_s = t.matmul(attention_rows(t, qs, k, v, p.num_heads, p.head_dim), w.wo);
    return {FeatureMap{out_q.val(), x_q.h, x_q.w}, FeatureMap{out_s.val(), x_s.h, x_s.w}};
}

FeatureMap cross_attn(const FeatureMap& x, const Mat& tokens, const AttentionParams& p,
                      AttnTrace* trace) {
    p.validate(x.tokens.cols, tokens.cols);
    ad::Tape t;
    ad::Var xv = t.constant(x.tokens);
    ad::Var ctx = t.constant(tokens);
    AttnWeights w = bind_attention(t, p);
    ad::Var out = cross_attention(t, xv, ctx, w, p.num_heads, p.head_dim, nullptr, trace);
    return FeatureMap{out.val(), x.h, x.w};
}

std::vector<int> sample_indices(int pool, int take, uint64_t seed) {
    if (take < 1 || take > pool) throw std::invalid_argument("sample_indices: take out of range");
    if (take == pool) {
        std::vector<int> idx(static_cast<size_t>(pool));
        std::iota(idx.begin(), idx.end(), 0);
        return idx;
    }
    std::vector<int> idx(static_cast<size_t>(pool));
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    // partial Fisher-Yates: the first `take` slots end up a uniform sample
    for (int i = 0; i < take; ++i) {
        int j = rng.uniform_int(i, pool - 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(take));
    std::sort(idx.begin(), idx.end());
    return idx;
}

KVSet sample_support_kv(const std::vector<KVSet>& kvs, int target_len, uint64_t seed) {
    int pool = 0;
    int width = -1;
    for (const KVSet& kv : kvs) {
        if (kv.keys.rows != kv.values.rows)
            throw std::invalid_argument("sample_support_kv: key/value row mismatch");
        if (width < 0) width = kv.keys.cols;
        if (kv.keys.cols != width || kv.values.cols != kv.keys.cols)
            throw std::invalid_argument("sample_support_kv: width mismatch across sets");
        pool += kv.keys.rows;
    }
    if (target_len < 1 || target_len > pool)
        throw std::invalid_argument("sample_support_kv: target_len exceeds pooled tokens");

    std::vector<int> idx = sample_indices(pool, target_len, seed);
    KVSet out;
    out.origin = kvs.size() == 1 ? kvs[0].origin : -1;
    out.keys = Mat(target_len, width);
    out.values = Mat(target_len, width);
    for (int r = 0; r < target_len; ++r) {
        int g = idx[static_cast<size_t>(r)];
        int set = 0;
        while (g >= kvs[static_cast<size_t>(set)].keys.rows) {
            g -= kvs[static_cast<size_t>(set)].keys.rows;
            ++set;
        }
        for (int c = 0; c < width; ++c) {
            out.keys.at(r, c) = kvs[static_cast<size_t>(set)].keys.at(g, c);
            out.values.at(r, c) = kvs[static_cast<size_t>(set)].values.at(g, c);
        }
    }
    return out;
}

}  // namespace fewseg
