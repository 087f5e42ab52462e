#include "fewseg/unet.hpp"

#include <cmath>
#include <stdexcept>

namespace fewseg {

void UNetConfig::validate() const {
    if (levels < 1) throw std::invalid_argument("UNetConfig: levels must be >= 1");
    if (static_cast<int>(widths.size()) != levels)
        throw std::invalid_argument("UNetConfig: one width per level expected");
    for (int wl : widths)
        if (wl <= 0 || wl % head_dim != 0)
            throw std::invalid_argument("UNetConfig: widths must be positive multiples of head_dim");
    if (blocks_per_level < 1) throw std::invalid_argument("UNetConfig: blocks_per_level must be >= 1");
    if (latent_channels < 1) throw std::invalid_argument("UNetConfig: latent_channels must be >= 1");
    if (image_size % patch_size != 0)
        throw std::invalid_argument("UNetConfig: image_size must be divisible by patch_size");
    if (!fusion_enabled.empty() &&
        static_cast<int>(fusion_enabled.size()) != attention_sites())
        throw std::invalid_argument("UNetConfig: fusion_enabled must cover every attention site");
}

Mat& ParamStore::add(const std::string& name, int rows, int cols) {
    if (index.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
    index[name] = static_cast<int>(values.size());
    names.push_back(name);
    values.emplace_back(rows, cols);
    return values.back();
}

int ParamStore::find(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return it->second;
}

size_t ParamStore::scalar_count() const {
    size_t n = 0;
    for (const Mat& m : values) n += m.a.size();
    return n;
}

ParamGrads::ParamGrads(const ParamStore& s) {
    g.reserve(s.values.size());
    for (const Mat& m : s.values) g.emplace_back(m.rows, m.cols);
}

void ParamGrads::zero() {
    for (Mat& m : g) std::fill(m.a.begin(), m.a.end(), 0.0);
}

void ParamGrads::scale(double f) {
    for (Mat& m : g)
        for (double& v : m.a) v *= f;
}

void ParamGrads::accumulate(const ParamGrads& other, double f) {
    for (size_t i = 0; i < g.size(); ++i)
        for (size_t j = 0; j < g[i].a.size(); ++j) g[i].a[j] += f * other.g[i].a[j];
}

Mat adapt_input_layer(const Mat& kernel, int cin, int kh, int kw, int factor) {
    if (factor < 1) throw std::invalid_argument("adapt_input_layer: factor must be >= 1");
    if (kernel.cols != cin * kh * kw)
        throw std::invalid_argument("adapt_input_layer: kernel columns != cin*kh*kw");
    Mat out(kernel.rows, factor * kernel.cols);
    double inv = 1.0 / static_cast<double>(factor);
    int taps = kh * kw;
    for (int o = 0; o < kernel.rows; ++o)
        for (int b = 0; b < factor; ++b)
            for (int ci = 0; ci < cin; ++ci)
                for (int r = 0; r < taps; ++r)
                    out.at(o, (b * cin + ci) * taps + r) = kernel.at(o, ci * taps + r) * inv;
    return out;
}

namespace {

void fill_gauss(Mat& m, Rng& rng, double std) {
    for (double& v : m.a) v = rng.normal() * std;
}

double inv_sqrt(int n) { return 1.0 / std::sqrt(static_cast<double>(n)); }

void init_attention(ParamStore& s, const std::string& prefix, int width, int kv_width, Rng& rng) {
    int inner = width;  // heads * head_dim == level width
    fill_gauss(s.add(prefix + ".wq", width, inner), rng, inv_sqrt(width));
    fill_gauss(s.add(prefix + ".wk", kv_width, inner), rng, inv_sqrt(kv_width));
    fill_gauss(s.add(prefix + ".wv", kv_width, inner), rng, inv_sqrt(kv_width));
    fill_gauss(s.add(prefix + ".wo", inner, width), rng, 0.5 * inv_sqrt(inner));
}

void init_block_params(ParamStore& s, const std::string& b, int width, int ctx_dim, Rng& rng) {
    for (const char* ln : {".ln1", ".ln2", ".ln3"}) {
        Mat& gain = s.add(b + ln + ".g", 1, width);
        std::fill(gain.a.begin(), gain.a.end(), 1.0);
        s.add(b + ln + ".b", 1, width);
    }
    init_attention(s, b + ".attn", width, width, rng);
    init_attention(s, b + ".xattn", width, ctx_dim, rng);
    fill_gauss(s.add(b + ".ffn.w1", width, 4 * width), rng, inv_sqrt(width));
    s.add(b + ".ffn.b1", 1, 4 * width);
    fill_gauss(s.add(b + ".ffn.w2", 4 * width, width), rng, 0.5 * inv_sqrt(4 * width));
    s.add(b + ".ffn.b2", 1, width);
}

// Token grid per attention site, mirroring the forward pass level order:
// down levels, bottleneck, up levels.
std::vector<int> site_levels(const UNetConfig& cfg) {
    std::vector<int> out;
    for (int l = 0; l < cfg.levels - 1; ++l)
        for (int b = 0; b < cfg.blocks_per_level; ++b) out.push_back(l);
    for (int b = 0; b < cfg.blocks_per_level; ++b) out.push_back(cfg.levels - 1);
    for (int l = cfg.levels - 2; l >= 0; --l)
        for (int b = 0; b < cfg.blocks_per_level; ++b) out.push_back(l);
    return out;
}

Image multiply_by_mask(const Image& img, const Mask& mask) {
    Image out(img.h, img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double m = mask.at(y, x) ? 1.0 : 0.0;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x, c) * m;
        }
    return out;
}

Latent concat_channels(const Latent& a, const Latent& b) {
    if (a.h != b.h || a.w != b.w) throw std::invalid_argument("concat_channels: size mismatch");
    Latent out(a.h, a.w, a.c + b.c);
    for (int y = 0; y < a.h; ++y)
        for (int x = 0; x < a.w; ++x) {
            for (int ch = 0; ch < a.c; ++ch) out.at(y, x, ch) = a.at(y, x, ch);
            for (int ch = 0; ch < b.c; ++ch) out.at(y, x, a.c + ch) = b.at(y, x, ch);
        }
    return out;
}

Mat patchify(const Image& img, int patch) {
    if (img.h % patch != 0 || img.w % patch != 0)
        throw std::invalid_argument("patchify: image not divisible by patch size");
    int gh = img.h / patch, gw = img.w / patch;
    Mat out(gh * gw, patch * patch * 3);
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < 3; ++c)
                        out.at(gy * gw + gx, (dy * patch + dx) * 3 + c) =
                            img.at(gy * patch + dy, gx * patch + dx, c);
    return out;
}

std::vector<uint8_t> flatten_mask(const Mask& m) {
    return std::vector<uint8_t>(m.a.begin(), m.a.end());
}

Mat time_embedding(int t, int dim) {
    Mat emb(1, dim);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        emb.at(0, i) = std::sin(t * freq);
        emb.at(0, half + i) = std::cos(t * freq);
    }
    return emb;
}

}  // namespace

ModelParams init_params(const UNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelParams mp;
    mp.cfg = cfg;
    ParamStore& s = mp.store;
    Rng rng(mix_seed(seed, 0x9a7eu));

    int c = cfg.latent_channels;
    int w0 = cfg.widths[0];

    // input convolution: initialized for c channels, widened to 2c with the
    // duplicate-and-halve adaptation so stacked inputs keep the c-channel response
    Mat original(w0, c * 9);
    fill_gauss(original, rng, inv_sqrt(c * 9));
    Mat& win = s.add("conv_in.w", w0, 2 * c * 9);
    win = adapt_input_layer(original, c, 3, 3, 2);
    s.add("conv_in.b", 1, w0);

    std::vector<int> levels_of_sites = site_levels(cfg);
    for (size_t site = 0; site < levels_of_sites.size(); ++site) {
        int wl = cfg.widths[static_cast<size_t>(levels_of_sites[site])];
        init_block_params(s, "block" + std::to_string(site), wl, cfg.ctx_dim, rng);
    }
    for (int l = 0; l + 1 < cfg.levels; ++l) {
        fill_gauss(s.add("down" + std::to_string(l) + ".w", cfg.widths[static_cast<size_t>(l + 1)],
                         cfg.widths[static_cast<size_t>(l)] * 9),
                   rng, inv_sqrt(cfg.widths[static_cast<size_t>(l)] * 9));
        s.add("down" + std::to_string(l) + ".b", 1, cfg.widths[static_cast<size_t>(l + 1)]);
        fill_gauss(s.add("up" + std::to_string(l) + ".w", cfg.widths[static_cast<size_t>(l)],
                         cfg.widths[static_cast<size_t>(l + 1)] * 9),
                   rng, inv_sqrt(cfg.widths[static_cast<size_t>(l + 1)] * 9));
        s.add("up" + std::to_string(l) + ".b", 1, cfg.widths[static_cast<size_t>(l)]);
    }
    fill_gauss(s.add("conv_out.w", c, w0 * 9), rng, 0.1 * inv_sqrt(w0 * 9));
    s.add("conv_out.b", 1, c);

    fill_gauss(s.add("null_token", 1, cfg.ctx_dim), rng, 0.02);

    if (cfg.interaction == Interaction::kTokenCross) {
        int pdim = cfg.patch_size * cfg.patch_size * 3;
        int grid = cfg.image_size / cfg.patch_size;
        fill_gauss(s.add("tok_proj.w", pdim, cfg.ctx_dim), rng, inv_sqrt(pdim));
        s.add("tok_proj.b", 1, cfg.ctx_dim);
        fill_gauss(s.add("tok_pos", grid * grid, cfg.ctx_dim), rng, 0.02);
    }

    for (int l = 0; l < cfg.levels; ++l) {
        fill_gauss(s.add("time_proj" + std::to_string(l) + ".w", cfg.time_embed_dim,
                         cfg.widths[static_cast<size_t>(l)]),
                   rng, inv_sqrt(cfg.time_embed_dim));
        s.add("time_proj" + std::to_string(l) + ".b", 1, cfg.widths[static_cast<size_t>(l)]);
    }
    return mp;
}

PreparedSupport prepare_support(const Image& image, const Mask& mask, const UNetConfig& cfg,
                                const Codec& codec) {
    if (image.h != mask.h || image.w != mask.w)
        throw std::invalid_argument("prepare_support: image and mask sizes differ");
    PreparedSupport out;

    if (cfg.interaction == Interaction::kKvFusion) {
        out.has_branch = true;
        Latent first, second;
        switch (cfg.injection) {
            case Injection::kConcatenation: {
                first = codec.encode(image);
                second = codec.encode(mask_to_rgb(mask, image, SupervisionForm::kWhiteOnBlack));
                break;
            }
            case Injection::kMultiplication: {
                if (cfg.mul_domain == MulDomain::kRgb) {
                    first = codec.encode(multiply_by_mask(image, mask));
                } else {
                    first = codec.encode(image);
                    Mask lat = resize_nearest(mask, first.h, first.w);
                    for (int y = 0; y < first.h; ++y)
                        for (int x = 0; x < first.w; ++x)
                            if (!lat.at(y, x))
                                for (int ch = 0; ch < first.c; ++ch) first.at(y, x, ch) = 0.0;
                }
                second = first;
                break;
            }
            case Injection::kAttentionMask: {
                first = codec.encode(image);
                second = first;
                break;
            }
            case Injection::kAddition: {
                first = codec.encode(mask_to_rgb(mask, image, SupervisionForm::kMaskOverImage));
                second = first;
                break;
            }
        }
        out.branch_input = concat_channels(first, second);
        if (cfg.injection == Injection::kAttentionMask) {
            int lh = image.h / codec.factor(), lw = image.w / codec.factor();
            for (int level : site_levels(cfg)) {
                Mask g = resize_nearest(mask, lh >> level, lw >> level);
                out.gates.push_back(flatten_mask(g));
            }
        }
        return out;
    }

    // token_cross: support enters as encoder tokens through cross-attention
    if (image.h != cfg.image_size || image.w != cfg.image_size)
        throw std::invalid_argument("prepare_support: token_cross expects images of cfg.image_size");
    switch (cfg.injection) {
        case Injection::kConcatenation:
            out.patch_groups.push_back(patchify(image, cfg.patch_size));
            out.patch_groups.push_back(
                patchify(mask_to_rgb(mask, image, SupervisionForm::kWhiteOnBlack), cfg.patch_size));
            break;
        case Injection::kMultiplication:
            out.patch_groups.push_back(patchify(multiply_by_mask(image, mask), cfg.patch_size));
            break;
        case Injection::kAddition:
            out.patch_groups.push_back(patchify(
                mask_to_rgb(mask, image, SupervisionForm::kMaskOverImage), cfg.patch_size));
            break;
        case Injection::kAttentionMask: {
            out.patch_groups.push_back(patchify(image, cfg.patch_size));
            int grid = cfg.image_size / cfg.patch_size;
            out.token_gate = flatten_mask(resize_nearest(mask, grid, grid));
            break;
        }
    }
    return out;
}

namespace {

struct BlockVars {
    ad::Var ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    AttnWeights self_w, cross_w;
    ad::Var ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

ad::Var block_tail(ad::Tape& t, ad::Var x, ad::Var ctx, const BlockVars& w, int heads, int d,
                   const std::vector<uint8_t>* ctx_mask) {
    ad::Var xn = t.layernorm_rows(x, w.ln2_g, w.ln2_b);
    x = t.add(x, cross_attention(t, xn, ctx, w.cross_w, heads, d, ctx_mask));
    ad::Var xf = t.layernorm_rows(x, w.ln3_g, w.ln3_b);
    ad::Var mid = t.gelu(t.add_rowvec(t.matmul(xf, w.ffn_w1), w.ffn_b1));
    return t.add(x, t.add_rowvec(t.matmul(mid, w.ffn_w2), w.ffn_b2));
}

struct Builder {
    ad::Tape& t;
    const ModelParams& mp;
    ParamGrads* gr;

    ad::Var P(const std::string& name) {
        int i = mp.store.find(name);
        return t.param(mp.store.values[static_cast<size_t>(i)],
                       gr ? &gr->g[static_cast<size_t>(i)] : nullptr);
    }
    AttnWeights AW(const std::string& prefix) {
        return AttnWeights{P(prefix + ".wq"), P(prefix + ".wk"), P(prefix + ".wv"),
                           P(prefix + ".wo")};
    }
    BlockVars BV(int site) {
        std::string b = "block" + std::to_string(site);
        return BlockVars{P(b + ".ln1.g"),  P(b + ".ln1.b"),  P(b + ".ln2.g"), P(b + ".ln2.b"),
                         P(b + ".ln3.g"),  P(b + ".ln3.b"),  AW(b + ".attn"), AW(b + ".xattn"),
                         P(b + ".ffn.w1"), P(b + ".ffn.b1"), P(b + ".ffn.w2"), P(b + ".ffn.b2")};
    }
};

}  // namespace

ad::Var unet_graph(ad::Tape& t, const ModelParams& params, ParamGrads* grads,
                   const Latent& query_input, const std::vector<PreparedSupport>& supports,
                   std::optional<int> timestep, const KvSampling& kv) {
    const UNetConfig& cfg = params.cfg;
    cfg.validate();
    int c = cfg.latent_channels;
    if (query_input.c != 2 * c)
        throw std::invalid_argument("unet_graph: query input must carry 2c channels");
    int div = 1 << (cfg.levels - 1);
    if (query_input.h % div != 0 || query_input.w % div != 0)
        throw std::invalid_argument("unet_graph: latent grid not divisible across levels");

    Builder B{t, params, grads};

    // cross-attention context rows; the prompt stand-in token always leads
    ad::Var ctx_null = B.P("null_token");
    ad::Var ctx_query = ctx_null;
    std::vector<uint8_t> ctx_mask;
    bool use_ctx_mask = false;
    if (cfg.interaction == Interaction::kTokenCross && !supports.empty()) {
        ad::Var tw = B.P("tok_proj.w");
        ad::Var tb = B.P("tok_proj.b");
        ad::Var pos = B.P("tok_pos");
        std::vector<ad::Var> rows{ctx_null};
        ctx_mask.push_back(1);
        for (const PreparedSupport& s : supports) {
            int sup_rows = 0;
            for (const Mat& g : s.patch_groups) {
                if (g.rows != pos.val().rows)
                    throw std::invalid_argument("unet_graph: patch grid does not match tok_pos");
                rows.push_back(t.add(t.add_rowvec(t.matmul(t.constant(g), tw), tb), pos));
                sup_rows += g.rows;
            }
            if (!s.token_gate.empty()) {
                if (static_cast<int>(s.token_gate.size()) != sup_rows)
                    throw std::invalid_argument("unet_graph: token gate length mismatch");
                ctx_mask.insert(ctx_mask.end(), s.token_gate.begin(), s.token_gate.end());
                use_ctx_mask = true;
            } else {
                ctx_mask.insert(ctx_mask.end(), static_cast<size_t>(sup_rows), 1);
            }
        }
        ctx_query = t.concat_rows(rows);
    }
    const std::vector<uint8_t>* ctx_mask_ptr = use_ctx_mask ? &ctx_mask : nullptr;

    // branch inputs: query first, then any support branches (shared weights)
    std::vector<ad::Var> xs{t.constant(query_input.to_mat())};
    std::vector<const PreparedSupport*> branch_sup{nullptr};
    if (cfg.interaction == Interaction::kKvFusion) {
        for (const PreparedSupport& s : supports) {
            if (!s.has_branch)
                throw std::invalid_argument("unet_graph: support not prepared for kv_fusion");
            if (s.branch_input.h != query_input.h || s.branch_input.w != query_input.w ||
                s.branch_input.c != query_input.c)
                throw std::invalid_argument("unet_graph: support latent shape mismatch");
            xs.push_back(t.constant(s.branch_input.to_mat()));
            branch_sup.push_back(&s);
        }
    }
    int n_branches = static_cast<int>(xs.size());

    std::vector<ad::Var> temb(static_cast<size_t>(cfg.levels));
    if (timestep.has_value()) {
        ad::Var emb = t.constant(time_embedding(*timestep, cfg.time_embed_dim));
        for (int l = 0; l < cfg.levels; ++l) {
            std::string n = "time_proj" + std::to_string(l);
            temb[static_cast<size_t>(l)] = t.add(t.matmul(emb, B.P(n + ".w")), B.P(n + ".b"));
        }
    }

    ad::Var conv_in_w = B.P("conv_in.w");
    ad::Var conv_in_b = B.P("conv_in.b");
    int h = query_input.h, w = query_input.w;
    for (ad::Var& x : xs) x = t.conv2d(x, h, w, conv_in_w, conv_in_b, 3, 3, 1, 1);

    int site = 0;
    auto run_block = [&](int level, int bh, int bw_) {
        BlockVars bv = B.BV(site);
        int heads = cfg.heads_at(level);
        int d = cfg.head_dim;
        int tokens = bh * bw_;

        if (timestep.has_value())
            for (ad::Var& x : xs) x = t.add_rowvec(x, temb[static_cast<size_t>(level)]);

        std::vector<ad::Var> xn;
        xn.reserve(xs.size());
        for (ad::Var& x : xs) xn.push_back(t.layernorm_rows(x, bv.ln1_g, bv.ln1_b));

        bool fuse = cfg.fusion_on(site) && n_branches > 1;
        ad::Var k_joint, v_joint;
        std::vector<uint8_t> joint_mask;
        bool use_mask = false;

        if (fuse) {
            ad::Var q = t.matmul(xn[0], bv.self_w.wq);
            ad::Var kq = t.matmul(xn[0], bv.self_w.wk);
            ad::Var vq = t.matmul(xn[0], bv.self_w.wv);
            std::vector<ad::Var> ks, vs;
            std::vector<uint8_t> pool_gate;
            for (int i = 1; i < n_branches; ++i) {
                ks.push_back(t.matmul(xn[static_cast<size_t>(i)], bv.self_w.wk));
                vs.push_back(t.matmul(xn[static_cast<size_t>(i)], bv.self_w.wv));
                const PreparedSupport* sp = branch_sup[static_cast<size_t>(i)];
                if (!sp->gates.empty()) {
                    const std::vector<uint8_t>& g = sp->gates[static_cast<size_t>(site)];
                    if (static_cast<int>(g.size()) != tokens)
                        throw std::invalid_argument("unet_graph: gate length != site tokens");
                    pool_gate.insert(pool_gate.end(), g.begin(), g.end());
                    use_mask = true;
                } else {
                    pool_gate.insert(pool_gate.end(), static_cast<size_t>(tokens), 1);
                }
            }
            ad::Var kp = ks.size() == 1 ? ks[0] : t.concat_rows(ks);
            ad::Var vp = vs.size() == 1 ? vs[0] : t.concat_rows(vs);
            if (kv.enabled && n_branches > 2) {
                // pool all support keys/values, then sample down to one
                // image's token count so inference matches training load
                std::vector<int> idx =
                    sample_indices(kp.val().rows, tokens, mix_seed(kv.seed, static_cast<uint64_t>(site)));
                kp = t.gather_rows(kp, idx);
                vp = t.gather_rows(vp, idx);
                std::vector<uint8_t> sampled;
                sampled.reserve(idx.size());
                for (int ix : idx) sampled.push_back(pool_gate[static_cast<size_t>(ix)]);
                pool_gate = std::move(sampled);
            }
            k_joint = t.concat_rows({kq, kp});
            v_joint = t.concat_rows({vq, vp});
            joint_mask.assign(static_cast<size_t>(tokens), 1);
            joint_mask.insert(joint_mask.end(), pool_gate.begin(), pool_gate.end());
            const std::vector<uint8_t>* mask_ptr = use_mask ? &joint_mask : nullptr;
            ad::Var rows = attention_rows(t, q, k_joint, v_joint, heads, d, mask_ptr);
            xs[0] = t.add(xs[0], t.matmul(rows, bv.self_w.wo));
        } else {
            xs[0] = t.add(xs[0], self_attention(t, xn[0], bv.self_w, heads, d));
        }

        for (int i = 1; i < n_branches; ++i) {
            ad::Var out;
            if (fuse && cfg.fusion == FusionStrategy::kQkv) {
                ad::Var qi = t.matmul(xn[static_cast<size_t>(i)], bv.self_w.wq);
                const std::vector<uint8_t>* mask_ptr = use_mask ? &joint_mask : nullptr;
                out = t.matmul(attention_rows(t, qi, k_joint, v_joint, heads, d, mask_ptr),
                               bv.self_w.wo);
            } else {
                out = self_attention(t, xn[static_cast<size_t>(i)], bv.self_w, heads, d);
            }
            xs[static_cast<size_t>(i)] = t.add(xs[static_cast<size_t>(i)], out);
        }

        xs[0] = block_tail(t, xs[0], ctx_query, bv, heads, d, ctx_mask_ptr);
        for (int i = 1; i < n_branches; ++i)
            xs[static_cast<size_t>(i)] = block_tail(t, xs[static_cast<size_t>(i)], ctx_null, bv,
                                                    heads, d, nullptr);
        ++site;
    };

    std::vector<std::vector<ad::Var>> skips(static_cast<size_t>(cfg.levels - 1));
    for (int l = 0; l + 1 < cfg.levels; ++l) {
        for (int b = 0; b < cfg.blocks_per_level; ++b) run_block(l, h, w);
        skips[static_cast<size_t>(l)] = xs;
        ad::Var dw = B.P("down" + std::to_string(l) + ".w");
        ad::Var db = B.P("down" + std::to_string(l) + ".b");
        for (ad::Var& x : xs) x = t.conv2d(t.silu(x), h, w, dw, db, 3, 3, 2, 1);
        h /= 2;
        w /= 2;
    }
    for (int b = 0; b < cfg.blocks_per_level; ++b) run_block(cfg.levels - 1, h, w);
    for (int l = cfg.levels - 2; l >= 0; --l) {
        ad::Var uw = B.P("up" + std::to_string(l) + ".w");
        ad::Var ub = B.P("up" + std::to_string(l) + ".b");
        for (ad::Var& x : xs) x = t.conv2d(t.silu(t.upsample2x(x, h, w)), 2 * h, 2 * w, uw, ub, 3, 3, 1, 1);
        h *= 2;
        w *= 2;
        for (int i = 0; i < n_branches; ++i)
            xs[static_cast<size_t>(i)] = t.add(xs[static_cast<size_t>(i)],
                                               skips[static_cast<size_t>(l)][static_cast<size_t>(i)]);
        for (int b = 0; b < cfg.blocks_per_level; ++b) run_block(l, h, w);
    }
    return t.conv2d(xs[0], h, w, B.P("conv_out.w"), B.P("conv_out.b"), 3, 3, 1, 1);
}

Latent dual_forward(const ModelParams& params, const Latent& query_input,
                    const std::vector<PreparedSupport>& supports, std::optional<int> timestep,
                    const KvSampling& kv) {
    ad::Tape t;
    ad::Var out = unet_graph(t, params, nullptr, query_input, supports, timestep, kv);
    return Latent::from_mat(out.val(), query_input.h, query_input.w);
}

BlockParams init_block(int width, int ctx_dim, int head_dim, uint64_t seed) {
    ParamStore s;
    Rng rng(mix_seed(seed, 0xb10c));
    init_block_params(s, "b", width, ctx_dim, rng);
    BlockParams p;
    p.ln1_g = s.get("b.ln1.g");
    p.ln1_b = s.get("b.ln1.b");
    p.ln2_g = s.get("b.ln2.g");
    p.ln2_b = s.get("b.ln2.b");
    p.ln3_g = s.get("b.ln3.g");
    p.ln3_b = s.get("b.ln3.b");
    p.self_attn.wq = s.get("b.attn.wq");
    p.self_attn.wk = s.get("b.attn.wk");
    p.self_attn.wv = s.get("b.attn.wv");
    p.self_attn.wo = s.get("b.attn.wo");
    p.self_attn.num_heads = width / head_dim;
    p.self_attn.head_dim = head_dim;
    p.cross_attn.wq = s.get("b.xattn.wq");
    p.cross_attn.wk = s.get("b.xattn.wk");
    p.cross_attn.wv = s.get("b.xattn.wv");
    p.cross_attn.wo = s.get("b.xattn.wo");
    p.cross_attn.num_heads = width / head_dim;
    p.cross_attn.head_dim = head_dim;
    p.ffn_w1 = s.get("b.ffn.w1");
    p.ffn_b1 = s.get("b.ffn.b1");
    p.ffn_w2 = s.get("b.ffn.w2");
    p.ffn_b2 = s.get("b.ffn.b2");
    return p;
}

FeatureMap block_forward(const FeatureMap& x, const Mat& prompt_tokens, const BlockParams& p) {
    ad::Tape t;
    ad::Var xv = t.constant(x.tokens);
    BlockVars bv{t.param(p.ln1_g, nullptr),
                 t.param(p.ln1_b, nullptr),
                 t.param(p.ln2_g, nullptr),
                 t.param(p.ln2_b, nullptr),
                 t.param(p.ln3_g, nullptr),
                 t.param(p.ln3_b, nullptr),
                 AttnWeights{t.param(p.self_attn.wq, nullptr), t.param(p.self_attn.wk, nullptr),
                             t.param(p.self_attn.wv, nullptr), t.param(p.self_attn.wo, nullptr)},
                 AttnWeights{t.param(p.cross_attn.wq, nullptr), t.param(p.cross_attn.wk, nullptr),
                             t.param(p.cross_attn.wv, nullptr), t.param(p.cross_attn.wo, nullptr)},
                 t.param(p.ffn_w1, nullptr),
                 t.param(p.ffn_b1, nullptr),
                 t.param(p.ffn_w2, nullptr),
                 t.param(p.ffn_b2, nullptr)};
    int heads = p.self_attn.num_heads;
    int d = p.self_attn.head_dim;
    ad::Var xn = t.layernorm_rows(xv, bv.ln1_g, bv.ln1_b);
    ad::Var x1 = t.add(xv, self_attention(t, xn, bv.self_w, heads, d));
    ad::Var out = block_tail(t, x1, t.constant(prompt_tokens), bv, heads, d, nullptr);
    return FeatureMap{out.val(), x.h, x.w};
}

}  // namespace fewseg
