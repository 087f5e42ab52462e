#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fewseg/attention.hpp"
#include "fewseg/autodiff.hpp"
#include "fewseg/codec.hpp"
#include "fewseg/tensor.hpp"

namespace fewseg {

enum class Interaction { kKvFusion, kTokenCross };
enum class Injection { kConcatenation, kMultiplication, kAttentionMask, kAddition };
enum class MulDomain { kRgb, kLatent };
enum class FusionStrategy { kKv, kQkv };

struct UNetConfig {
    int levels = 2;
    std::vector<int> widths = {64, 96};  // one per level, multiples of head_dim
    int blocks_per_level = 1;
    int latent_channels = 48;  // c; branch inputs carry 2c channels
    int head_dim = 16;
    int image_size = 64;  // canvas edge, sets the token-encoder patch grid
    int patch_size = 8;
    int ctx_dim = 64;
    int time_embed_dim = 64;
    Interaction interaction = Interaction::kKvFusion;
    Injection injection = Injection::kConcatenation;
    MulDomain mul_domain = MulDomain::kRgb;
    FusionStrategy fusion = FusionStrategy::kKv;
    std::vector<uint8_t> fusion_enabled;  // per attention site; empty = all on
    bool fill_query_with_image = false;   // one-step second input half: z_q instead of zeros

    int attention_sites() const { return (2 * (levels - 1) + 1) * blocks_per_level; }
    int heads_at(int level) const { return widths[static_cast<size_t>(level)] / head_dim; }
    bool fusion_on(int site) const {
        return fusion_enabled.empty() || fusion_enabled[static_cast<size_t>(site)] != 0;
    }
    void validate() const;
};

/// Flat named parameter collection; order is creation order and fixed for a
/// given config, which checkpointing and the optimizer rely on.
struct ParamStore {
    std::vector<std::string> names;
    std::vector<Mat> values;
    std::unordered_map<std::string, int> index;

    Mat& add(const std::string& name, int rows, int cols);
    int find(const std::string& name) const;
    const Mat& get(const std::string& name) const { return values[static_cast<size_t>(find(name))]; }
    size_t scalar_count() const;
};

struct ModelParams {
    UNetConfig cfg;
    ParamStore store;
};

struct ParamGrads {
    std::vector<Mat> g;
    explicit ParamGrads(const ParamStore& s);
    void zero();
    void scale(double f);
    void accumulate(const ParamGrads& other, double f);
};

ModelParams init_params(const UNetConfig& cfg, uint64_t seed);

/// Duplicates a convolution kernel `factor` times along input channels and
/// divides by `factor`, so the widened layer applied to `factor` stacked
/// copies of the original input reproduces the original response exactly.
Mat adapt_input_layer(const Mat& kernel, int cin, int kh, int kw, int factor = 2);

/// A support example readied for the configured interaction/injection.
struct PreparedSupport {
    Latent branch_input;  // 2c channels (kv_fusion interactions)
    bool has_branch = false;
    std::vector<std::vector<uint8_t>> gates;  // per attention site (attention_mask, kv_fusion)
    std::vector<Mat> patch_groups;            // raw pixel patches (token_cross)
    std::vector<uint8_t> token_gate;          // per token over all groups (attention_mask)
};

PreparedSupport prepare_support(const Image& image, const Mask& mask, const UNetConfig& cfg,
                                const Codec& codec);

struct KvSampling {
    bool enabled = false;
    uint64_t seed = 0;
};

/// Builds the full dual-branch forward graph and returns the query branch's
/// output tokens (L0 x c). Query and support branches share every parameter.
ad::Var unet_graph(ad::Tape& t, const ModelParams& params, ParamGrads* grads,
                   const Latent& query_input, const std::vector<PreparedSupport>& supports,
                   std::optional<int> timestep = std::nullopt, const KvSampling& kv = {});

Latent dual_forward(const ModelParams& params, const Latent& query_input,
                    const std::vector<PreparedSupport>& supports,
                    std::optional<int> timestep = std::nullopt, const KvSampling& kv = {});

/// One transformer block in isolation: self-attention, prompt cross-attention
/// and FFN, each wrapped in a residual connection with pre-normalization.
struct BlockParams {
    Mat ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    AttentionParams self_attn;
    AttentionParams cross_attn;
    Mat ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

BlockParams init_block(int width, int ctx_dim, int head_dim, uint64_t seed);
FeatureMap block_forward(const FeatureMap& x, const Mat& prompt_tokens, const BlockParams& p);

}  // namespace fewseg
