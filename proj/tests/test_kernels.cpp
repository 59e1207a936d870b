#include "ddet/kernels.hpp"
#include "ddet/kernels_ref.hpp"
#include "ddet/rng.hpp"
#include "ddet/threading.hpp"

#include <doctest.h>

using namespace ddet;

namespace {

TensorF random_tensor(const std::vector<int>& shape, uint64_t seed) {
    TensorF t(shape);
    Rng rng(seed);
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

bool bit_equal(const TensorF& a, const TensorF& b) {
    if (a.shape != b.shape) return false;
    for (size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

} // namespace

TEST_CASE("conv2d matches the serial reference over shape/stride/pad/group combos") {
    struct Case {
        std::vector<int> x, w;
        int stride, pad, groups;
        bool bias;
    };
    const Case cases[] = {
        {{1, 3, 8, 8}, {4, 3, 3, 3}, 1, 1, 1, true},    {{2, 4, 9, 7}, {6, 4, 3, 3}, 2, 1, 1, false},
        {{1, 6, 5, 5}, {6, 1, 3, 3}, 1, 1, 6, false},   {{2, 8, 6, 6}, {8, 4, 1, 1}, 1, 0, 2, true},
        {{1, 2, 12, 12}, {5, 2, 5, 5}, 2, 2, 1, false}, {{3, 1, 4, 4}, {2, 1, 1, 1}, 1, 0, 1, true},
    };
    int seed = 100;
    for (const auto& c : cases) {
        const auto x = random_tensor(c.x, seed++);
        const auto w = random_tensor(c.w, seed++);
        const auto b = random_tensor({c.w[0]}, seed++);
        const auto d = kernels::conv_dims(c.x, c.w, c.stride, c.pad, c.groups);
        TensorF y1({d.batch, d.cout, d.ho, d.wo}), y2 = y1;
        const float* bias = c.bias ? b.data.data() : nullptr;
        set_num_threads(3);
        kernels::conv2d_forward(x, w, bias, y1, d);
        ref::conv2d_forward(x, w, bias, y2, d);
        for (size_t i = 0; i < y1.data.size(); ++i)
            CHECK(y1.data[i] == doctest::Approx(y2.data[i]).epsilon(1e-5));
    }
    set_num_threads(1);
}

TEST_CASE("conv2d output is bit-identical across thread counts") {
    const auto x = random_tensor({2, 8, 16, 16}, 7);
    const auto w = random_tensor({12, 8, 3, 3}, 8);
    const auto d = kernels::conv_dims(x.shape, w.shape, 1, 1, 1);
    TensorF y1({d.batch, d.cout, d.ho, d.wo});
    set_num_threads(1);
    kernels::conv2d_forward(x, w, static_cast<const float*>(nullptr), y1, d);
    for (const int threads : {2, 3, 5, 8}) {
        set_num_threads(threads);
        TensorF yt({d.batch, d.cout, d.ho, d.wo});
        kernels::conv2d_forward(x, w, static_cast<const float*>(nullptr), yt, d);
        CHECK(bit_equal(y1, yt));
    }
    set_num_threads(1);
}

TEST_CASE("conv2d backward passes are bit-identical across thread counts") {
    const auto x = random_tensor({1, 6, 10, 10}, 9);
    const auto w = random_tensor({8, 6, 3, 3}, 10);
    const auto d = kernels::conv_dims(x.shape, w.shape, 2, 1, 1);
    const auto dy = random_tensor({d.batch, d.cout, d.ho, d.wo}, 11);

    set_num_threads(1);
    TensorF dx1(x.shape), dw1(w.shape);
    std::vector<float> db1(static_cast<size_t>(d.cout), 0.0f);
    kernels::conv2d_backward_input(dy, w, dx1, d);
    kernels::conv2d_backward_weight(dy, x, dw1, db1.data(), d);
    for (const int threads : {2, 4, 7}) {
        set_num_threads(threads);
        TensorF dxt(x.shape), dwt(w.shape);
        std::vector<float> dbt(static_cast<size_t>(d.cout), 0.0f);
        kernels::conv2d_backward_input(dy, w, dxt, d);
        kernels::conv2d_backward_weight(dy, x, dwt, dbt.data(), d);
        CHECK(bit_equal(dx1, dxt));
        CHECK(bit_equal(dw1, dwt));
        CHECK(dbt == db1);
    }
    set_num_threads(1);
}

TEST_CASE("maxpool matches the serial reference and is thread-count invariant") {
    const auto x = random_tensor({2, 5, 13, 13}, 12);
    for (const auto& [k, stride, pad] : std::vector<std::array<int, 3>>{{2, 2, 0}, {5, 1, 2}, {13, 1, 6}}) {
        const auto d = kernels::pool_dims(x.shape, k, stride, pad);
        TensorF y_ref({d.batch, d.c, d.ho, d.wo});
        ref::maxpool_forward(x, y_ref, d);
        for (const int threads : {1, 3}) {
            set_num_threads(threads);
            TensorF y({d.batch, d.c, d.ho, d.wo});
            std::vector<int32_t> argmax;
            kernels::maxpool_forward(x, y, argmax, d);
            CHECK(bit_equal(y, y_ref));
        }
    }
    set_num_threads(1);
}

TEST_CASE("matmul matches the serial reference incl. transposed operands") {
    Rng rng(21);
    for (const bool ta : {false, true})
        for (const bool tb : {false, true}) {
            const int batch = 2, M = 5, N = 4, K = 3;
            const auto a = random_tensor({batch, ta ? K : M, ta ? M : K}, rng.next_u64());
            const auto b = random_tensor({batch, tb ? N : K, tb ? K : N}, rng.next_u64());
            std::vector<float> c1(static_cast<size_t>(batch) * M * N), c2 = c1;
            set_num_threads(3);
            kernels::matmul(a.data.data(), b.data.data(), c1.data(), batch, M, N, K, ta, tb);
            ref::matmul(a.data.data(), b.data.data(), c2.data(), batch, M, N, K, ta, tb);
            for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i] == doctest::Approx(c2[i]).epsilon(1e-5));
        }
    set_num_threads(1);
}

TEST_CASE("softmax rows are stochastic and thread-count invariant") {
    const auto x = random_tensor({1, 1, 6, 9}, 22);
    const size_t rows = 6;
    const int cols = 9;
    std::vector<float> y1(x.data.size()), y2(x.data.size());
    set_num_threads(1);
    kernels::softmax_lastdim(x.data.data(), y1.data(), rows, cols);
    set_num_threads(4);
    kernels::softmax_lastdim(x.data.data(), y2.data(), rows, cols);
    CHECK(y1 == y2);
    for (size_t r = 0; r < rows; ++r) {
        double sum = 0;
        for (int c = 0; c < cols; ++c) sum += y1[r * cols + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    set_num_threads(1);
}
