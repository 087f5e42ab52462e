#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "fewseg/attention.hpp"

using namespace fewseg;

namespace {

Mat random_mat(int r, int c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (auto& v : m.a) v = scale * rng.normal();
    return m;
}

AttentionParams random_params(int width, int heads, int d, Rng& rng, int kv_width = -1) {
    if (kv_width < 0) kv_width = width;
    AttentionParams p;
    p.num_heads = heads;
    p.head_dim = d;
    double s = 1.0 / std::sqrt(static_cast<double>(width));
    p.wq = random_mat(width, heads * d, rng, s);
    p.wk = random_mat(kv_width, heads * d, rng, 1.0 / std::sqrt(static_cast<double>(kv_width)));
    p.wv = random_mat(kv_width, heads * d, rng, 1.0 / std::sqrt(static_cast<double>(kv_width)));
    p.wo = random_mat(heads * d, width, rng, 1.0 / std::sqrt(static_cast<double>(heads * d)));
    return p;
}

AttentionParams identity_params(int d) {
    AttentionParams p;
    p.num_heads = 1;
    p.head_dim = d;
    p.wq = Mat(d, d);
    p.wk = Mat(d, d);
    p.wv = Mat(d, d);
    p.wo = Mat(d, d);
    for (int i = 0; i < d; ++i) {
        p.wq.at(i, i) = 1.0;
        p.wk.at(i, i) = 1.0;
        p.wv.at(i, i) = 1.0;
        p.wo.at(i, i) = 1.0;
    }
    return p;
}

double max_abs_diff(const Mat& a, const Mat& b) {
    REQUIRE(a.rows == b.rows);
    REQUIRE(a.cols == b.cols);
    double m = 0.0;
    for (size_t i = 0; i < a.a.size(); ++i) m = std::max(m, std::abs(a.a[i] - b.a[i]));
    return m;
}

// Central-difference check of the analytic input gradient for a loss built
// by `build` over a tape with `x` bound as a parameter.
double fd_input_check(const Mat& x0,
                      const std::function<ad::Var(ad::Tape&, ad::Var)>& build, Rng& rng,
                      int samples = 12) {
    Mat gx(x0.rows, x0.cols);
    {
        ad::Tape t;
        ad::Var x = t.param(x0, &gx);
        ad::Var loss = build(t, x);
        t.backward(loss);
    }
    auto eval = [&](const Mat& x) {
        ad::Tape t;
        ad::Var xv = t.param(x, nullptr);
        return build(t, xv).val().a[0];
    };
    double h = 1e-5;
    double worst = 0.0;
    for (int s = 0; s < samples; ++s) {
        size_t i = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(x0.a.size()) - 1));
        Mat xp = x0, xm = x0;
        xp.a[i] += h;
        xm.a[i] -= h;
        double fd = (eval(xp) - eval(xm)) / (2.0 * h);
        double an = gx.a[i];
        double denom = std::max({std::abs(fd), std::abs(an), 1e-10});
        worst = std::max(worst, std::abs(fd - an) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("single token reduces to projected value") {
    Rng rng(3);
    AttentionParams p = random_params(8, 2, 4, rng);
    FeatureMap x{random_mat(1, 8, rng), 1, 1};
    FeatureMap out = self_attn(x, p);
    Mat want = matmul(matmul(x.tokens, p.wv), p.wo);
    CHECK(out.tokens.a == want.a);
}

TEST_CASE("identical tokens give identical output rows") {
    Rng rng(5);
    AttentionParams p = random_params(8, 2, 4, rng);
    Mat row = random_mat(1, 8, rng);
    FeatureMap x{Mat(6, 8), 2, 3};
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 8; ++c) x.tokens.at(r, c) = row.at(0, c);
    FeatureMap out = self_attn(x, p);
    for (int r = 1; r < 6; ++r)
        for (int c = 0; c < 8; ++c)
            CHECK(out.tokens.at(r, c) == doctest::Approx(out.tokens.at(0, c)).epsilon(1e-12));
}

TEST_CASE("hand softmax value with identity projections") {
    AttentionParams p = identity_params(2);
    FeatureMap x{Mat(2, 2), 1, 2};
    x.tokens.at(0, 0) = 1.0;
    x.tokens.at(1, 1) = 1.0;
    FeatureMap out = self_attn(x, p);
    // row 0 scores: [1/sqrt(2), 0]; softmax ~ [0.66976, 0.33024]
    double e = std::exp(1.0 / std::sqrt(2.0));
    double p0 = e / (e + 1.0);
    CHECK(out.tokens.at(0, 0) == doctest::Approx(p0).epsilon(1e-9));
    CHECK(out.tokens.at(0, 1) == doctest::Approx(1.0 - p0).epsilon(1e-9));
    CHECK(out.tokens.at(0, 0) == doctest::Approx(0.6697).epsilon(1e-3));
    CHECK(out.tokens.at(0, 1) == doctest::Approx(0.3303).epsilon(1e-3));
}

TEST_CASE("softmax rows of every attention op sum to one") {
    Rng rng(7);
    AttentionParams p = random_params(16, 4, 4, rng);
    FeatureMap q{random_mat(5, 16, rng), 1, 5};
    FeatureMap s{random_mat(4, 16, rng), 1, 4};

    AttnTrace tr_self, tr_fuse, tr_cross;
    self_attn(q, p, &tr_self);
    fusion_attn(q, {s}, p, nullptr, &tr_fuse);
    AttentionParams pc = random_params(16, 4, 4, rng, 10);
    cross_attn(q, random_mat(3, 10, rng), pc, &tr_cross);

    for (const auto* tr : {&tr_self, &tr_fuse, &tr_cross}) {
        CHECK(!tr->probs.empty());
        for (const Mat& probs : tr->probs) {
            for (int r = 0; r < probs.rows; ++r) {
                double sum = 0.0;
                for (int c = 0; c < probs.cols; ++c) sum += probs.at(r, c);
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("fusion with no supports equals self attention") {
    Rng rng(11);
    AttentionParams p = random_params(16, 4, 4, rng);
    FeatureMap q{random_mat(6, 16, rng), 2, 3};
    FeatureMap a = self_attn(q, p);
    FeatureMap b = fusion_attn(q, {}, p);
    CHECK(max_abs_diff(a.tokens, b.tokens) < 1e-6);
}

TEST_CASE("support order permutation leaves fusion output unchanged") {
    Rng rng(13);
    AttentionParams p = random_params(16, 4, 4, rng);
    FeatureMap q{random_mat(5, 16, rng), 1, 5};
    FeatureMap s1{random_mat(4, 16, rng), 2, 2};
    FeatureMap s2{random_mat(3, 16, rng), 1, 3};
    FeatureMap s3{random_mat(6, 16, rng), 2, 3};
    FeatureMap a = fusion_attn(q, {s1, s2, s3}, p);
    FeatureMap b = fusion_attn(q, {s3, s1, s2}, p);
    CHECK(max_abs_diff(a.tokens, b.tokens) < 1e-6);
}

TEST_CASE("fully gated supports reduce to self attention") {
    Rng rng(17);
    AttentionParams p = random_params(16, 4, 4, rng);
    FeatureMap q{random_mat(5, 16, rng), 1, 5};
    FeatureMap s{random_mat(4, 16, rng), 2, 2};
    std::vector<std::vector<uint8_t>> gates{std::vector<uint8_t>(4, 0)};
    FeatureMap a = fusion_attn(q, {s}, p, &gates);
    FeatureMap b = self_attn(q, p);
    CHECK(max_abs_diff(a.tokens, b.tokens) < 1e-6);
}

TEST_CASE("all-open gate follows the ungated code path exactly") {
    Rng rng(19);
    AttentionParams p = random_params(16, 4, 4, rng);
    FeatureMap q{random_mat(5, 16, rng), 1, 5};
    FeatureMap s{random_mat(4, 16, rng), 2, 2};
    std::vector<std::vector<uint8_t>> gates{std::vector<uint8_t>(4, 1)};
    FeatureMap a = fusion_attn(q, {s}, p, &gates);
    FeatureMap b = fusion_attn(q, {s}, p);
    CHECK(a.tokens.a == b.tokens.a);
}

TEST_CASE("gate length mismatch is rejected") {
    Rng rng(23);
    AttentionParams p = random_params(8, 2, 4, rng);
    FeatureMap q{random_mat(2, 8, rng), 1, 2};
    FeatureMap s{random_mat(3, 8, rng), 1, 3};
    std::vector<std::vector<uint8_t>> gates{std::vector<uint8_t>(2, 1)};
    CHECK_THROWS_AS(fusion_attn(q, {s}, p, &gates), std::invalid_argument);
}

TEST_CASE("duplication consistency against doubled token set") {
    Rng rng(29);
    AttentionParams p = random_params(16, 4, 4, rng);
    FeatureMap q{random_mat(5, 16, rng), 1, 5};
    // support = copy of the query tokens
    FeatureMap dup{q.tokens, q.h, q.w};
    FeatureMap fused = fusion_attn(q, {dup}, p);

    FeatureMap doubled{Mat(10, 16), 2, 5};
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 16; ++c) {
            doubled.tokens.at(r, c) = q.tokens.at(r, c);
            doubled.tokens.at(r + 5, c) = q.tokens.at(r, c);
        }
    FeatureMap full = self_attn(doubled, p);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 16; ++c)
            CHECK(fused.tokens.at(r, c) == doctest::Approx(full.tokens.at(r, c)).epsilon(1e-9));
}

TEST_CASE("qkv fusion query rows equal kv fusion query rows bitwise") {
    Rng rng(31);
    AttentionParams p = random_params(16, 4, 4, rng);
    FeatureMap q{random_mat(5, 16, rng), 1, 5};
    FeatureMap s{random_mat(7, 16, rng), 1, 7};
    auto [out_q, out_s] = qkv_fusion_attn(q, s, p);
    FeatureMap kv = fusion_attn(q, {s}, p);
    CHECK(out_q.tokens.a == kv.tokens.a);
    CHECK(out_s.tokens.rows == 7);
}

TEST_CASE("qkv fusion with empty support degenerates to self attention") {
    Rng rng(37);
    AttentionParams p = random_params(8, 2, 4, rng);
    FeatureMap q{random_mat(4, 8, rng), 2, 2};
    FeatureMap empty{Mat(0, 8), 0, 0};
    auto [out_q, out_s] = qkv_fusion_attn(q, empty, p);
    FeatureMap self = self_attn(q, p);
    CHECK(max_abs_diff(out_q.tokens, self.tokens) < 1e-12);
    CHECK(out_s.tokens.rows == 0);
}

TEST_CASE("qkv fusion support rows match a hand softmax oracle") {
    AttentionParams p = identity_params(2);
    FeatureMap q{Mat(1, 2), 1, 1};
    q.tokens.at(0, 0) = 1.0;
    FeatureMap s{Mat(1, 2), 1, 1};
    s.tokens.at(0, 1) = 1.0;
    auto [out_q, out_s] = qkv_fusion_attn(q, s, p);
    // support query [0,1]; joint keys [[1,0],[0,1]]; scores [0, 1/sqrt(2)]
    double e = std::exp(1.0 / std::sqrt(2.0));
    double pw = e / (e + 1.0);
    CHECK(out_s.tokens.at(0, 0) == doctest::Approx(1.0 - pw).epsilon(1e-9));
    CHECK(out_s.tokens.at(0, 1) == doctest::Approx(pw).epsilon(1e-9));
    // query row attends over the same joint set with scores [1/sqrt(2), 0]
    CHECK(out_q.tokens.at(0, 0) == doctest::Approx(pw).epsilon(1e-9));
}

TEST_CASE("cross attention single and duplicated tokens") {
    Rng rng(41);
    AttentionParams p = random_params(8, 2, 4, rng, 6);
    FeatureMap x{random_mat(5, 8, rng), 1, 5};
    Mat token = random_mat(1, 6, rng);

    FeatureMap one = cross_attn(x, token, p);
    Mat want = matmul(matmul(token, p.wv), p.wo);
    for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 8; ++c)
            CHECK(one.tokens.at(r, c) == doctest::Approx(want.at(0, c)).epsilon(1e-12));

    Mat dup(3, 6);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 6; ++c) dup.at(r, c) = token.at(0, c);
    FeatureMap three = cross_attn(x, dup, p);
    CHECK(max_abs_diff(one.tokens, three.tokens) < 1e-9);
}

TEST_CASE("cross attention two-token hand case") {
    AttentionParams p = identity_params(2);
    FeatureMap x{Mat(1, 2), 1, 1};
    x.tokens.at(0, 0) = 1.0;
    Mat tokens(2, 2);
    tokens.at(0, 0) = 1.0;
    tokens.at(1, 1) = 1.0;
    FeatureMap out = cross_attn(x, tokens, p);
    double e = std::exp(1.0 / std::sqrt(2.0));
    double pw = e / (e + 1.0);
    CHECK(out.tokens.at(0, 0) == doctest::Approx(pw).epsilon(1e-9));
    CHECK(out.tokens.at(0, 1) == doctest::Approx(1.0 - pw).epsilon(1e-9));
}

TEST_CASE("per-head rotation of queries and keys leaves attention unchanged") {
    Rng rng(43);
    int heads = 2, d = 4, width = 8;
    AttentionParams p = random_params(width, heads, d, rng);
    FeatureMap x{random_mat(5, width, rng), 1, 5};

    // orthogonal transform per head: product of Givens rotations
    Mat rot(d, d);
    for (int i = 0; i < d; ++i) rot.at(i, i) = 1.0;
    auto givens = [&](int i, int j, double theta) {
        Mat g(d, d);
        for (int k = 0; k < d; ++k) g.at(k, k) = 1.0;
        g.at(i, i) = std::cos(theta);
        g.at(j, j) = std::cos(theta);
        g.at(i, j) = -std::sin(theta);
        g.at(j, i) = std::sin(theta);
        rot = matmul(rot, g);
    };
    givens(0, 1, 0.7);
    givens(1, 2, -1.2);
    givens(2, 3, 0.4);

    AttentionParams pr = p;
    for (int h = 0; h < heads; ++h) {
        // wq[:, h*d:(h+1)*d] <- wq[:, head] * rot, same for wk
        for (int r = 0; r < width; ++r) {
            for (int c = 0; c < d; ++c) {
                double aq = 0.0, ak = 0.0;
                for (int k = 0; k < d; ++k) {
                    aq += p.wq.at(r, h * d + k) * rot.at(k, c);
                    ak += p.wk.at(r, h * d + k) * rot.at(k, c);
                }
                pr.wq.at(r, h * d + c) = aq;
                pr.wk.at(r, h * d + c) = ak;
            }
        }
    }
    AttnTrace t0, t1;
    self_attn(x, p, &t0);
    self_attn(x, pr, &t1);
    REQUIRE(t0.probs.size() == t1.probs.size());
    for (size_t i = 0; i < t0.probs.size(); ++i)
        CHECK(max_abs_diff(t0.probs[i], t1.probs[i]) < 1e-12);
}

TEST_CASE("attention op gradients match central differences") {
    Rng rng(47);
    AttentionParams p = random_params(8, 2, 4, rng);
    Mat x0 = random_mat(4, 8, rng);
    Mat target = random_mat(4, 8, rng);
    Mat sup = random_mat(3, 8, rng);
    Mat ctx = random_mat(3, 8, rng);

    SUBCASE("self attention") {
        double err = fd_input_check(x0, [&](ad::Tape& t, ad::Var x) {
            AttnWeights w = bind_attention(t, p);
            return t.mse(self_attention(t, x, w, p.num_heads, p.head_dim), target);
        }, rng);
        CHECK(err < 1e-4);
    }
    SUBCASE("fused attention, gradient through the support too") {
        double err = fd_input_check(sup, [&](ad::Tape& t, ad::Var s) {
            AttnWeights w = bind_attention(t, p);
            ad::Var x = t.constant(x0);
            return t.mse(fused_attention(t, x, {s}, w, p.num_heads, p.head_dim), target);
        }, rng);
        CHECK(err < 1e-4);
    }
    SUBCASE("cross attention") {
        double err = fd_input_check(ctx, [&](ad::Tape& t, ad::Var c) {
            AttnWeights w = bind_attention(t, p);
            ad::Var x = t.constant(x0);
            return t.mse(cross_attention(t, x, c, w, p.num_heads, p.head_dim), target);
        }, rng);
        CHECK(err < 1e-4);
    }
    SUBCASE("gated fusion") {
        std::vector<uint8_t> mask(4 + 3, 1);
        mask[5] = 0;
        double err = fd_input_check(sup, [&](ad::Tape& t, ad::Var s) {
            AttnWeights w = bind_attention(t, p);
            ad::Var x = t.constant(x0);
            return t.mse(fused_attention(t, x, {s}, w, p.num_heads, p.head_dim, &mask), target);
        }, rng);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("kv sampling keeps all tokens when the pool matches the target") {
    Rng rng(53);
    KVSet kv;
    kv.keys = random_mat(6, 8, rng);
    kv.values = random_mat(6, 8, rng);
    kv.origin = 0;
    KVSet out = sample_support_kv({kv}, 6, 99);
    CHECK(out.keys.a == kv.keys.a);
    CHECK(out.values.a == kv.values.a);
}

TEST_CASE("kv sampling returns the requested count with pairing preserved") {
    Rng rng(59);
    std::vector<KVSet> kvs;
    for (int i = 0; i < 3; ++i) {
        KVSet kv;
        kv.keys = random_mat(4, 8, rng);
        kv.values = kv.keys;  // pairing marker: values mirror keys
        kv.origin = i;
        kvs.push_back(kv);
    }
    KVSet out = sample_support_kv(kvs, 4, 7);
    CHECK(out.keys.rows == 4);
    CHECK(out.keys.a == out.values.a);

    KVSet again = sample_support_kv(kvs, 4, 7);
    CHECK(out.keys.a == again.keys.a);

    CHECK_THROWS_AS(sample_support_kv(kvs, 13, 7), std::invalid_argument);
}

TEST_CASE("subset sampling is uniform over all 2-subsets of a 4-pool") {
    std::map<std::pair<int, int>, int> counts;
    int draws = 9000;
    for (int s = 0; s < draws; ++s) {
        auto idx = sample_indices(4, 2, static_cast<uint64_t>(s) * 2654435761ull + 17);
        counts[{idx[0], idx[1]}]++;
    }
    CHECK(counts.size() == 6);  // all C(4,2) subsets occur
    double expect = draws / 6.0;
    double sigma = std::sqrt(draws * (1.0 / 6.0) * (5.0 / 6.0));
    for (const auto& [k, n] : counts) CHECK(std::abs(n - expect) < 4.0 * sigma);
}
