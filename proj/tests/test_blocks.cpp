#include "ddet/blocks.hpp"
#include "ddet/rng.hpp"
#include "ddet/threading.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace ddet;

namespace {

template <typename T>
Tensor<T> random_tensor(const std::vector<int>& shape, uint64_t seed) {
    Tensor<T> t(shape);
    Rng rng(seed);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return t;
}

template <typename T>
void zero_params_with_prefix(ParamRegistry<T>& reg, const std::string& prefix) {
    for (auto& p : reg.params)
        if (p.name.rfind(prefix, 0) == 0)
            for (auto& v : p.var->value.data) v = T(0);
}

double max_abs_diff(const TensorF& a, const TensorF& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0;
    for (size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
    return m;
}

} // namespace

TEST_CASE("cbs shape contract and zero propagation") {
    ParamRegistry<float> reg;
    Rng rng(1);
    CBS<float> cbs(reg, "cbs", 3, 10, 3, 1, 1, rng);
    auto x = make_var<float>(random_tensor<float>({1, 3, 8, 8}, 2), false);
    CHECK(cbs.forward(x, false)->value.shape == std::vector<int>{1, 10, 8, 8});

    // zeros stay zeros: conv(0)=0, BN pass-through keeps 0, SiLU(0)=0
    auto z = make_var<float>(TensorF({1, 3, 8, 8}), false);
    auto y = cbs.forward(z, false);
    for (const float v : y->value.data) CHECK(v == 0.0f);
}

TEST_CASE("cbs closed form: averaging kernel on constant input") {
    ParamRegistry<float> reg;
    Rng rng(3);
    CBS<float> cbs(reg, "cbs", 1, 1, 3, 1, 1, rng);
    for (auto& v : cbs.conv.weight->value.data) v = 1.0f / 9.0f;
    const float c = 0.7f;
    TensorF x({1, 1, 9, 9});
    for (auto& v : x.data) v = c;
    // BN pass-through (gamma 1, beta 0, running stats 0/1, eval mode)
    const auto y = cbs.forward(make_var<float>(std::move(x), false), false);
    const double bn = c / std::sqrt(1.0 + 1e-5);
    const double expected = bn / (1.0 + std::exp(-bn));
    CHECK(static_cast<double>(y->value.at4(0, 0, 4, 4)) == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("maxpool cascade equivalence: mp5^2 == mp9 and mp5^3 == mp13") {
    auto x = make_var<float>(random_tensor<float>({1, 1, 16, 16}, 4), false);
    auto p5 = ops::maxpool(x, 5, 1, 2);
    auto p55 = ops::maxpool(p5, 5, 1, 2);
    auto p555 = ops::maxpool(p55, 5, 1, 2);
    auto p9 = ops::maxpool(x, 9, 1, 4);
    auto p13 = ops::maxpool(x, 13, 1, 6);
    CHECK(max_abs_diff(p55->value, p9->value) == 0.0);
    CHECK(max_abs_diff(p555->value, p13->value) == 0.0);
}

TEST_CASE("maxpool constant input and shape preservation") {
    TensorF x({1, 2, 7, 7});
    for (auto& v : x.data) v = 3.25f;
    auto y = ops::maxpool(make_var<float>(std::move(x), false), 5, 1, 2);
    CHECK(y->value.shape == std::vector<int>{1, 2, 7, 7});
    for (const float v : y->value.data) CHECK(v == 3.25f);
}

TEST_CASE("mp halves spatial dims, rejects odd input, and isolates branches") {
    ParamRegistry<float> reg;
    Rng rng(5);
    MP<float> mp(reg, "mp", 6, 8, rng);
    auto x = make_var<float>(random_tensor<float>({1, 6, 8, 8}, 6), false);
    auto y = mp.forward(x, false);
    CHECK(y->value.shape == std::vector<int>{1, 8, 4, 4});

    auto odd = make_var<float>(random_tensor<float>({1, 6, 7, 8}, 7), false);
    CHECK_THROWS_AS(mp.forward(odd, false), std::invalid_argument);

    // zero input -> zero output
    auto z = mp.forward(make_var<float>(TensorF({1, 6, 8, 8}), false), false);
    for (const float v : z->value.data) CHECK(v == 0.0f);

    // zeroing the conv branch zeroes exactly the second half of channels
    zero_params_with_prefix(reg, "mp.conv_cv2");
    auto y2 = mp.forward(x, false);
    double pool_mag = 0, conv_mag = 0;
    for (int c = 0; c < 4; ++c)
        for (int i = 0; i < 16; ++i) {
            pool_mag += std::abs(y2->value.at4(0, c, i / 4, i % 4));
            conv_mag += std::abs(y2->value.at4(0, c + 4, i / 4, i % 4));
        }
    CHECK(pool_mag > 0.0);
    CHECK(conv_mag == 0.0);
}

TEST_CASE("elan shape, zero propagation and analytic parameter count") {
    ParamRegistry<float> reg;
    Rng rng(8);
    const int cin = 64, cout = 48, h = 16;
    ELAN<float> elan(reg, "elan", cin, cout, h, rng);
    auto x = make_var<float>(random_tensor<float>({1, cin, 16, 16}, 9), false);
    CHECK(elan.forward(x, false)->value.shape == std::vector<int>{1, cout, 16, 16});

    auto z = elan.forward(make_var<float>(TensorF({1, cin, 16, 16}), false), false);
    for (const float v : z->value.data) CHECK(v == 0.0f);

    // conv weights + BN gamma/beta per CBS
    const size_t expect = (static_cast<size_t>(cin) * h + 2 * h)        // cv1 1x1
                          + 4 * (static_cast<size_t>(h) * h * 9 + 2 * h) // c1..c4 3x3
                          + (static_cast<size_t>(4 * h) * cout + 2 * cout); // fuse 1x1
    CHECK(reg.count() == expect);
}

TEST_CASE("conv param count example: 3->16 k=3 with bias = 448") {
    ParamRegistry<float> reg;
    Rng rng(10);
    Conv2dBlock<float> conv(reg, "c", 3, 16, 3, 1, 1, 1, true, rng);
    CHECK(reg.count() == 448);
}

TEST_CASE("acmix: alpha/beta contribute 2 params; Eq.1 linearity; beta=0 equals conv path") {
    ParamRegistry<float> reg;
    Rng rng(11);
    ACmix<float> ac(reg, "ac", 16, 4, 3, rng);
    // alpha and beta are single scalars
    size_t scalar_params = 0;
    for (const auto& p : reg.params)
        if (p.name == "ac.alpha" || p.name == "ac.beta") scalar_params += p.var->value.data.size();
    CHECK(scalar_params == 2);

    auto x = make_var<float>(random_tensor<float>({1, 16, 8, 8}, 12), false);
    auto set = [&](float a, float b) {
        ac.alpha->value[0] = a;
        ac.beta->value[0] = b;
    };
    set(1, 1);
    CHECK(ac.forward(x, false)->value.shape == std::vector<int>{1, 16, 8, 8});

    set(1, 0);
    const auto conv_only = ac.forward(x, false)->value;
    set(0, 1);
    const auto att_only = ac.forward(x, false)->value;
    set(1.7f, -0.6f);
    const auto mixed = ac.forward(x, false)->value;
    double m = 0;
    for (size_t i = 0; i < mixed.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(mixed.data[i]) -
                                 (1.7 * conv_only.data[i] - 0.6 * att_only.data[i])));
    CHECK(m <= 1e-5);

    // beta = 0: output is alpha * F_conv exactly(ish)
    set(2.0f, 0.0f);
    const auto doubled = ac.forward(x, false)->value;
    m = 0;
    for (size_t i = 0; i < doubled.data.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(doubled.data[i]) - 2.0 * conv_only.data[i]));
    CHECK(m <= 1e-6);
}

TEST_CASE("acmix single-token attention is the value projection") {
    ParamRegistry<float> reg;
    Rng rng(13);
    ACmix<float> ac(reg, "ac", 8, 4, 3, rng);
    ac.alpha->value[0] = 0;
    ac.beta->value[0] = 1;
    auto x = make_var<float>(random_tensor<float>({1, 8, 1, 1}, 14), false);
    const auto y = ac.forward(x, false);
    const auto v = ac.wv.forward(x);
    CHECK(max_abs_diff(y->value, v->value) <= 1e-6);
}

TEST_CASE("acmix attention rows are stochastic") {
    ParamRegistry<float> reg;
    Rng rng(15);
    ACmix<float> ac(reg, "ac", 8, 2, 3, rng);
    auto x = make_var<float>(random_tensor<float>({1, 8, 4, 4}, 16), false);
    ac.forward(x, false);
    REQUIRE(ac.last_att);
    const auto& att = *ac.last_att;
    const int cols = att.shape.back();
    const size_t rows = att.data.size() / cols;
    for (size_t r = 0; r < rows; ++r) {
        double sum = 0;
        for (int c = 0; c < cols; ++c) sum += att.data[r * cols + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("acmix rejects head counts that do not divide channels") {
    ParamRegistry<float> reg;
    Rng rng(17);
    CHECK_THROWS_AS(ACmix<float>(reg, "ac", 10, 4, 3, rng), std::invalid_argument);
}

TEST_CASE("routing_topk: dense when topk = regions, diagonal dominance, tie rule") {
    // topk = S^2 returns every region (order: descending affinity)
    const std::vector<double> diag{5, 1, 1, 1, 1, 5, 1, 1, 1, 1, 5, 1, 1, 1, 1, 5};
    const auto all = routing_topk(diag, 4, 4);
    for (int r = 0; r < 4; ++r) {
        CHECK(all[r].size() == 4);
        CHECK(all[r][0] == r); // dominant diagonal first
        std::vector<int> sorted = all[r];
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == std::vector<int>{0, 1, 2, 3});
    }

    const auto top1 = routing_topk(diag, 4, 1);
    for (int r = 0; r < 4; ++r) CHECK(top1[r] == std::vector<int>{r});

    // all-equal affinities, topk=2: lowest-index rule gives {0,1}
    const std::vector<double> flat(16, 1.0);
    const auto tie = routing_topk(flat, 4, 2);
    for (int r = 0; r < 4; ++r) CHECK(tie[r] == std::vector<int>{0, 1});
}

TEST_CASE("bra dense degeneracy: S=1 topk=1 equals dense attention + lce") {
    ParamRegistry<double> reg;
    Rng rng(18);
    BRA<double> bra(reg, "bra", 8, 1, 1, 4, 5, rng);
    auto x = make_var<double>(random_tensor<double>({1, 8, 4, 4}, 19), false);
    const auto got = bra.forward(x, false);
    const auto want = oracle::dense_attention_ref(x->value, bra.wq.weight->value, bra.wk.weight->value,
                                                  bra.wv.weight->value, bra.lce.weight->value, 4);
    double m = 0;
    for (size_t i = 0; i < want.data.size(); ++i) m = std::max(m, std::abs(got->value.data[i] - want.data[i]));
    CHECK(m <= 1e-5);
}

TEST_CASE("bra shape contract, rejects non-dividing region grids, rows stochastic") {
    ParamRegistry<float> reg;
    Rng rng(20);
    BRA<float> bra(reg, "bra", 32, 2, 1, 4, 5, rng);
    auto x = make_var<float>(random_tensor<float>({1, 32, 8, 8}, 21), false);
    CHECK(bra.forward(x, false)->value.shape == std::vector<int>{1, 32, 8, 8});

    auto bad = make_var<float>(random_tensor<float>({1, 32, 5, 8}, 22), false);
    CHECK_THROWS_AS(bra.forward(bad, false), std::invalid_argument);

    REQUIRE(bra.last_att);
    const auto& att = *bra.last_att;
    const int cols = att.shape.back();
    const size_t rows = att.data.size() / cols;
    for (size_t r = 0; r < rows; ++r) {
        double sum = 0;
        for (int c = 0; c < cols; ++c) sum += att.data[r * cols + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS(BRA<float>(reg, "bra2", 32, 2, 5, 4, 5, rng), std::invalid_argument); // topk > S^2
}

TEST_CASE("bra constant input: attention term returns the common value row") {
    ParamRegistry<float> reg;
    Rng rng(23);
    BRA<float> bra(reg, "bra", 8, 2, 2, 2, 5, rng);
    TensorF x({1, 8, 4, 4});
    for (auto& v : x.data) v = 0.5f;
    // zero the lce so only the attention term remains
    for (auto& v : bra.lce.weight->value.data) v = 0.0f;
    const auto y = bra.forward(make_var<float>(std::move(x), false), false);
    // constant input -> every v row identical -> attention output constant per channel
    for (int c = 0; c < 8; ++c) {
        const float first = y->value.at4(0, c, 0, 0);
        for (int i = 0; i < 16; ++i) CHECK(y->value.at4(0, c, i / 4, i % 4) == doctest::Approx(first).epsilon(1e-6));
    }
}

TEST_CASE("biformer block: identity with zeroed residual branches, non-degenerate otherwise") {
    ParamRegistry<float> reg;
    Rng rng(24);
    BiFormerBlock<float> bf(reg, "bf", 16, 2, 1, 4, rng);
    auto x = make_var<float>(random_tensor<float>({1, 16, 8, 8}, 25), false);

    const auto active = bf.forward(x, false);
    CHECK(active->value.shape == x->value.shape);
    CHECK(max_abs_diff(active->value, x->value) > 1e-4); // non-degenerate

    zero_params_with_prefix(reg, "bf.dw");
    zero_params_with_prefix(reg, "bf.bra");
    zero_params_with_prefix(reg, "bf.mlp1");
    zero_params_with_prefix(reg, "bf.mlp2");
    const auto y = bf.forward(x, false);
    CHECK(max_abs_diff(y->value, x->value) <= 1e-6);
}

TEST_CASE("sppcspc: shape, minimum spatial size, pre-fusion concat width") {
    ParamRegistry<float> reg;
    Rng rng(26);
    SPPCSPC<float> spp(reg, "spp", 64, 48, 32, rng);
    auto x = make_var<float>(random_tensor<float>({1, 64, 16, 16}, 27), false);
    CHECK(spp.forward(x, false)->value.shape == std::vector<int>{1, 48, 16, 16});

    auto small = make_var<float>(random_tensor<float>({1, 64, 12, 16}, 28), false);
    CHECK_THROWS_AS(spp.forward(small, false), std::invalid_argument);

    // cv5 consumes 4 * hidden channels: the {x1, p5, p9, p13} concat
    CHECK(spp.cv5.conv.weight->value.shape == std::vector<int>{32, 4 * 32, 1, 1});
}

TEST_CASE("pyramid pooling is the identity on a constant map") {
    // windows are clipped at the borders rather than zero-padded, so a
    // negative constant survives pooling unchanged
    TensorF x({1, 8, 13, 13});
    for (auto& v : x.data) v = -0.7f;
    auto xv = make_var<float>(std::move(x), false);
    for (const auto k : {5, 9, 13}) {
        auto p = ops::maxpool(xv, k, 1, (k - 1) / 2);
        CHECK(max_abs_diff(p->value, xv->value) == 0.0);
    }
}

TEST_CASE("ac-sppcspc: serial taps reproduce the 5/9/13 pyramid exactly") {
    ParamRegistry<float> reg;
    Rng rng(30);
    ACSPPCSPC<float> acspp(reg, "acspp", 64, 48, 32, 4, rng);
    auto x = make_var<float>(random_tensor<float>({1, 64, 16, 16}, 31), false);
    CHECK(acspp.forward(x, false)->value.shape == std::vector<int>{1, 48, 16, 16});

    auto xp = acspp.acmix.forward(acspp.cv1.forward(x, false), false);
    auto p1 = ops::maxpool(xp, 5, 1, 2);
    auto p2 = ops::maxpool(p1, 5, 1, 2);
    auto p3 = ops::maxpool(p2, 5, 1, 2);
    CHECK(max_abs_diff(p2->value, ops::maxpool(xp, 9, 1, 4)->value) == 0.0);
    CHECK(max_abs_diff(p3->value, ops::maxpool(xp, 13, 1, 6)->value) == 0.0);

    auto small = make_var<float>(random_tensor<float>({1, 64, 4, 8}, 32), false);
    CHECK_THROWS_AS(acspp.forward(small, false), std::invalid_argument);
}

TEST_CASE("ac-sppcspc has strictly fewer parameters than sppcspc at matched config") {
    ParamRegistry<float> reg_a, reg_b;
    Rng r1(33), r2(34);
    SPPCSPC<float> spp(reg_a, "spp", 64, 64, 32, r1);
    ACSPPCSPC<float> acspp(reg_b, "acspp", 64, 64, 32, 4, r2);
    CHECK(reg_b.count() < reg_a.count());
}

TEST_CASE("esan: drop-in ELAN shape, additive param count, degeneracy to elan") {
    const int cin = 32, cout = 24, h = 8;
    ParamRegistry<float> reg_elan, reg_esan, reg_bf;
    Rng r1(35), r2(35), r3(36);
    ELAN<float> elan(reg_elan, "neck", cin, cout, h, r1);
    ESAN<float> esan(reg_esan, "neck", cin, cout, h, 2, 1, 4, r2);
    BiFormerBlock<float> bf_only(reg_bf, "bf", h, 2, 1, 4, r3);
    CHECK(reg_esan.count() == reg_elan.count() + reg_bf.count());

    auto x = make_var<float>(random_tensor<float>({1, cin, 8, 8}, 37), false);
    CHECK(esan.forward(x, false)->value.shape == elan.forward(x, false)->value.shape);

    // same seed -> identical shared weights; zeroed residual branches make
    // the biformer block an identity, so ESAN == ELAN elementwise
    zero_params_with_prefix(reg_esan, "neck.bf");
    CHECK(max_abs_diff(esan.forward(x, false)->value, elan.forward(x, false)->value) <= 1e-6);
}

TEST_CASE("blocks preserve batch size and forward deterministically") {
    ParamRegistry<float> reg;
    Rng rng(38);
    ELAN<float> elan(reg, "elan", 8, 8, 4, rng);
    auto x = make_var<float>(random_tensor<float>({3, 8, 8, 8}, 39), false);
    set_num_threads(1);
    const auto a = elan.forward(x, false)->value;
    CHECK(a.shape[0] == 3);
    const auto b = elan.forward(x, false)->value;
    CHECK(max_abs_diff(a, b) == 0.0);
    set_num_threads(3);
    const auto c = elan.forward(x, false)->value;
    CHECK(max_abs_diff(a, c) == 0.0);
    set_num_threads(1);
}
