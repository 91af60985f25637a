#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracle_ref.hpp"
#include "tandepth/attention_core.hpp"

using namespace tandepth;

namespace {

DTensor mat(std::vector<int> dims, std::vector<double> values) {
    DTensor t = DTensor::make(std::move(dims));
    REQUIRE(t.numel() == static_cast<int64_t>(values.size()));
    t.v = std::move(values);
    return t;
}

DTensor random_tensor(std::vector<int> dims, uint64_t seed, double lo = -0.5, double hi = 0.5) {
    DTensor t = DTensor::make(std::move(dims));
    Rng rng(seed);
    for (auto& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

AttentionBlockT<double> random_block(int d, uint64_t seed, double scale = 0.4) {
    Rng rng(seed);
    auto draw = [&](std::vector<int> dims) {
        DTensor t = DTensor::make(std::move(dims));
        for (auto& v : t.v) v = rng.uniform(-scale, scale);
        return make_leaf(t, false);
    };
    AttentionBlockT<double> b;
    b.wq = draw({d, d});
    b.wk = draw({d, d});
    b.wv = draw({d, d});
    b.wo = draw({d, d});
    DTensor ones = DTensor::make({d});
    ones.fill(1.0);
    b.ln1_g = make_leaf(ones, false);
    b.ln1_b = make_leaf(DTensor::make({d}), false);
    b.ln2_g = make_leaf(ones, false);
    b.ln2_b = make_leaf(DTensor::make({d}), false);
    b.ffn_w1 = draw({d, 4 * d});
    b.ffn_b1 = draw({4 * d});
    b.ffn_w2 = draw({4 * d, d});
    b.ffn_b2 = draw({d});
    return b;
}

oracle::BlockWeights to_oracle(const AttentionBlockT<double>& b, int d) {
    oracle::BlockWeights w;
    auto as_mat = [](const VarT<double>& v, int r, int c) {
        oracle::Mat m(r, c);
        m.v = v.val().v;
        return m;
    };
    w.wq = as_mat(b.wq, d, d);
    w.wk = as_mat(b.wk, d, d);
    w.wv = as_mat(b.wv, d, d);
    w.wo = as_mat(b.wo, d, d);
    w.ln1_g = b.ln1_g.val().v;
    w.ln1_b = b.ln1_b.val().v;
    w.ln2_g = b.ln2_g.val().v;
    w.ln2_b = b.ln2_b.val().v;
    w.ffn_w1 = as_mat(b.ffn_w1, d, 4 * d);
    w.ffn_w2 = as_mat(b.ffn_w2, 4 * d, d);
    w.ffn_b1 = b.ffn_b1.val().v;
    w.ffn_b2 = b.ffn_b2.val().v;
    return w;
}

}  // namespace

TEST_CASE("tokenize: degenerate, additive, shape arithmetic") {
    // zero features + E_pos -> tokens equal E_pos
    DTensor feats = DTensor::make({3, 4, 2, 2});
    DTensor rw = random_tensor({2, 4, 1, 1}, 1);
    DTensor rb = DTensor::make({2});
    DTensor epos = random_tensor({3, 8}, 2);
    VarT<double> tok = tokenize(constant(feats), constant(rw), constant(rb), constant(epos));
    for (int64_t i = 0; i < tok.val().numel(); ++i) CHECK(tok.val().v[i] == doctest::Approx(epos.v[i]));

    // single-token degenerate case: softmax of a scalar is 1, output = V * Wo
    DTensor z1 = random_tensor({1, 4}, 3);
    AttentionBlockT<double> blk = random_block(4, 4);
    VarT<double> out1 = mhsa(constant(z1), blk, 2);
    oracle::Mat zo(1, 4);
    zo.v = z1.v;
    const oracle::Mat vo = oracle::matmul(zo, to_oracle(blk, 4).wv);
    const oracle::Mat expect = oracle::matmul(vo, to_oracle(blk, 4).wo);
    for (int j = 0; j < 4; ++j) CHECK(out1.val().at(0, j) == doctest::Approx(expect.at(0, j)).epsilon(1e-12));

    // (18 patches, 64 channels reduced, 8x8 deep) -> d = 4096, X is 18x4096
    DTensor deep = random_tensor({18, 96, 8, 8}, 5);
    DTensor reduce_w = random_tensor({64, 96, 1, 1}, 6);
    DTensor reduce_b = DTensor::make({64});
    DTensor ep = DTensor::make({18, 4096});
    VarT<double> big = tokenize(constant(deep), constant(reduce_w), constant(reduce_b), constant(ep));
    CHECK(big.val().nd == 2);
    CHECK(big.val().dims[0] == 18);
    CHECK(big.val().dims[1] == 4096);

    DTensor wrong_ep = DTensor::make({18, 4000});
    CHECK_THROWS_AS(tokenize(constant(deep), constant(reduce_w), constant(reduce_b), constant(wrong_ep)),
                    std::invalid_argument);
}

TEST_CASE("mhsa: softmax rows, uniform attention, frozen 2-token fixture") {
    const int n = 6, d = 8, heads = 2;
    DTensor z = random_tensor({n, d}, 7, -2.0, 2.0);
    AttentionBlockT<double> blk = random_block(d, 8);

    const DTensor rows = attention_rows(constant(z), blk, heads);
    for (int i = 0; i < rows.dims[0]; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            CHECK(rows.at(i, j) >= 0.0);
            s += rows.at(i, j);
        }
        CHECK(std::abs(s - 1.0) < 1e-6);
    }

    // zero queries -> uniform attention -> every output row is mean(V) * Wo
    AttentionBlockT<double> zq = blk;
    zq.wq = make_leaf(DTensor::make({d, d}), false);
    VarT<double> u = mhsa(constant(z), zq, heads);
    oracle::Mat zo(n, d);
    zo.v = z.v;
    const oracle::BlockWeights w = to_oracle(blk, d);
    const oracle::Mat v = oracle::matmul(zo, w.wv);
    oracle::Mat mean_v(1, d);
    for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += v.at(i, j);
        mean_v.at(0, j) = acc / n;
    }
    const oracle::Mat urow = oracle::matmul(mean_v, w.wo);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) CHECK(u.val().at(i, j) == doctest::Approx(urow.at(0, j)).epsilon(1e-9));

    // frozen 2-token, 1-head, d=2 fixture (hand evaluation committed from a
    // numpy run)
    AttentionBlockT<double> fix;
    fix.wq = constant(mat({2, 2}, {0.5, -0.1, 0.2, 0.3}));
    fix.wk = constant(mat({2, 2}, {-0.3, 0.4, 0.1, 0.2}));
    fix.wv = constant(mat({2, 2}, {0.6, 0.2, -0.1, 0.5}));
    fix.wo = constant(mat({2, 2}, {0.4, 0.1, -0.2, 0.3}));
    VarT<double> fx = mhsa(constant(mat({2, 2}, {0.3, -0.2, 0.1, 0.4})), fix, 1);
    CHECK(fx.val().at(0, 0) == doctest::Approx(0.02578956582998547).epsilon(1e-12));
    CHECK(fx.val().at(0, 1) == doctest::Approx(0.0381018229854909).epsilon(1e-12));
    CHECK(fx.val().at(1, 0) == doctest::Approx(0.02556160110228827).epsilon(1e-12));
    CHECK(fx.val().at(1, 1) == doctest::Approx(0.03821212849889277).epsilon(1e-12));
}

TEST_CASE("transformer block: zero-residual reduction, boundedness, frozen 3-token fixture") {
    const int d = 4;
    DTensor z = random_tensor({3, d}, 9, -1.0, 1.0);

    // zero MSA/FFN weights with identity norms: out = Norm(Norm(z))
    AttentionBlockT<double> zb = random_block(d, 10);
    DTensor zw = DTensor::make({d, d});
    zb.wo = make_leaf(zw, false);  // kills the MSA path
    zb.ffn_w2 = make_leaf(DTensor::make({4 * d, d}), false);
    zb.ffn_b2 = make_leaf(DTensor::make({d}), false);
    VarT<double> out = transformer_block(constant(z), zb, 2);
    oracle::Mat zo(3, d);
    zo.v = z.v;
    const std::vector<double> g(d, 1.0), b(d, 0.0);
    const oracle::Mat expect = oracle::layer_norm(oracle::layer_norm(zo, g, b), g, b);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < d; ++j) CHECK(out.val().at(i, j) == doctest::Approx(expect.at(i, j)).epsilon(1e-12));

    // layer norm keeps magnitude-1e3 inputs finite
    DTensor huge = random_tensor({3, d}, 11, -1e3, 1e3);
    AttentionBlockT<double> blk = random_block(d, 12);
    VarT<double> h = transformer_block(constant(huge), blk, 2);
    CHECK(all_finite(h.val()));

    // frozen 3-token post-norm block fixture (numpy): d=2, 1 head
    AttentionBlockT<double> fix;
    fix.wq = constant(mat({2, 2}, {0.4, -0.2, 0.1, 0.5}));
    fix.wk = constant(mat({2, 2}, {-0.3, 0.2, 0.6, -0.1}));
    fix.wv = constant(mat({2, 2}, {0.5, 0.3, -0.2, 0.4}));
    fix.wo = constant(mat({2, 2}, {0.7, -0.1, 0.2, 0.6}));
    fix.ln1_g = constant(mat({2}, {1.1, 0.9}));
    fix.ln1_b = constant(mat({2}, {0.05, -0.02}));
    fix.ffn_w1 = constant(mat({2, 4}, {0.3, -0.4, 0.2, 0.1, -0.2, 0.5, 0.4, -0.3}));
    fix.ffn_b1 = constant(mat({4}, {0.01, -0.03, 0.02, 0.0}));
    fix.ffn_w2 = constant(mat({4, 2}, {0.2, -0.1, 0.4, 0.3, -0.3, 0.2, 0.1, -0.5}));
    fix.ffn_b2 = constant(mat({2}, {-0.01, 0.02}));
    fix.ln2_g = constant(mat({2}, {0.95, 1.05}));
    fix.ln2_b = constant(mat({2}, {0.0, 0.01}));
    const DTensor zfix = mat({3, 2}, {0.5, -0.3, 0.2, 0.7, -0.6, 0.1});

    VarT<double> msa_out = mhsa(constant(zfix), fix, 1);
    CHECK(msa_out.val().at(0, 0) == doctest::Approx(-0.00458770916709977).epsilon(1e-11));
    CHECK(msa_out.val().at(2, 1) == doctest::Approx(0.04472117393928608).epsilon(1e-11));

    VarT<double> bout = transformer_block(constant(zfix), fix, 1);
    const double expect_block[6] = {0.9499963554660423,  -1.039995971830889, -0.9499956564075015,
                                    1.0599951991872385, -0.9499956566646087, 1.0599951994714099};
    for (int i = 0; i < 6; ++i) CHECK(bout.val().v[i] == doctest::Approx(expect_block[i]).epsilon(1e-9));
}

TEST_CASE("stacked blocks match the straight-line trace") {
    const int n = 3, d = 8, heads = 2, L = 6;
    DTensor z0 = random_tensor({n, d}, 20, -1.0, 1.0);
    std::vector<AttentionBlockT<double>> blocks;
    for (int l = 0; l < L; ++l) blocks.push_back(random_block(d, 100 + l));

    VarT<double> z = constant(z0);
    oracle::Mat zo(n, d);
    zo.v = z0.v;
    for (int l = 0; l < L; ++l) {
        z = transformer_block(z, blocks[l], heads);
        zo = oracle::transformer_block(zo, to_oracle(blocks[l], d), heads);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) CHECK(z.val().at(i, j) == doctest::Approx(zo.at(i, j)).epsilon(1e-9));
    }
}

TEST_CASE("permutation equivariance of the token stack") {
    const int n = 5, d = 8, heads = 4, L = 2;
    DTensor feats = random_tensor({n, 3, 2, 2}, 30);
    DTensor rw = random_tensor({2, 3, 1, 1}, 31);
    DTensor rb = random_tensor({2}, 32);
    DTensor epos = random_tensor({n, d}, 33);
    std::vector<AttentionBlockT<double>> blocks;
    for (int l = 0; l < L; ++l) blocks.push_back(random_block(d, 40 + l));

    auto run = [&](const DTensor& f, const DTensor& e) {
        VarT<double> z = tokenize(constant(f), constant(rw), constant(rb), constant(e));
        for (const auto& b : blocks) z = transformer_block(z, b, heads);
        return z.val();
    };
    const DTensor base = run(feats, epos);

    const int perm[n] = {3, 0, 4, 1, 2};
    DTensor pf = feats, pe = epos;
    const size_t fstride = 3 * 2 * 2;
    for (int i = 0; i < n; ++i) {
        std::copy_n(feats.v.begin() + perm[i] * fstride, fstride, pf.v.begin() + i * fstride);
        std::copy_n(epos.v.begin() + static_cast<size_t>(perm[i]) * d, d, pe.v.begin() + static_cast<size_t>(i) * d);
    }
    const DTensor permuted = run(pf, pe);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) CHECK(permuted.at(i, j) == doctest::Approx(base.at(perm[i], j)).epsilon(1e-6));
}

TEST_CASE("detokenize: residual identity and full-path gradient") {
    const int n = 3, c = 4, hw = 2;
    DTensor deep = random_tensor({n, c, hw, hw}, 50);

    // zero transformer path -> output equals the deep features exactly
    DTensor ew = DTensor::make({c, 2, 1, 1});
    DTensor eb = DTensor::make({c});
    DTensor ztok = random_tensor({n, 2 * hw * hw}, 51);
    VarT<double> same = detokenize(constant(ztok), constant(ew), constant(eb), constant(deep));
    for (int64_t i = 0; i < deep.numel(); ++i) CHECK(same.val().v[i] == deep.v[i]);

    // tokenize -> blocks -> detokenize gradient vs finite differences
    const int d = 2 * hw * hw;  // 8
    DTensor rw = random_tensor({2, c, 1, 1}, 52);
    DTensor rb = random_tensor({2}, 53);
    DTensor epos = random_tensor({n, d}, 54);
    DTensor ew2 = random_tensor({c, 2, 1, 1}, 55);
    DTensor eb2 = random_tensor({c}, 56);
    std::vector<AttentionBlockT<double>> blocks = {random_block(d, 57), random_block(d, 58)};

    DTensor weight = random_tensor({n, c, hw, hw}, 59);
    auto build = [&](VarT<double> x) {
        VarT<double> z = tokenize(x, constant(rw), constant(rb), constant(epos));
        for (const auto& b : blocks) z = transformer_block(z, b, 2);
        return sum_all(mul(detokenize(z, constant(ew2), constant(eb2), x), constant(weight)));
    };
    VarT<double> x = make_leaf(deep, true);
    backward(build(x));
    auto eval = [&] { return build(make_leaf(x.val(), false)).val().v[0]; };
    CHECK(fd_check(x.val().data(), x.grad().data(), deep.numel(), eval, 1e-5, 0, 60) < 1e-3);
}
