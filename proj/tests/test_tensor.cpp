#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "pcvq/tensor.hpp"

using namespace pcvq;

namespace {

Tensor random_tensor(Shape dims, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(std::move(dims), lo, hi, rng);
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
    Rng rng(1);
    Tensor x = random_tensor({1, 1, 5, 5}, rng);
    Tensor k = Tensor::from({1, 1, 1, 1}, {1.0});
    Tape tape;
    Tensor y = conv2d(tape, x, k, 1, 0);
    REQUIRE(y.dims == Shape({1, 1, 5, 5}));
    for (int i = 0; i < 25; ++i) CHECK(y.ptr()[i] == x.ptr()[i]);
}

TEST_CASE("conv2d zero kernel gives zero output and zero kernel grad under zero upstream") {
    Rng rng(2);
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Tensor k = Tensor::zeros({3, 2, 3, 3});
    Tape tape;
    tape.watch(k);
    Tensor y = conv2d(tape, x, k, 1, 1);
    for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.ptr()[i] == 0.0);
    // zero upstream: loss = sum(y * 0)
    Tensor loss = reduce_sum(tape, scale(tape, y, 0.0));
    tape.backward(loss);
    for (double g : tape.grad(k)) CHECK(g == 0.0);
}

TEST_CASE("conv2d matches naive summation oracle") {
    Rng rng(3);
    SUBCASE("random 4x4 input, 3x3 kernel, padding 1") {
        Tensor x = random_tensor({1, 1, 4, 4}, rng);
        Tensor k = random_tensor({1, 1, 3, 3}, rng);
        Tape tape;
        Tensor y = conv2d(tape, x, k, 1, 1);
        int oh, ow;
        auto ref = oracles::naive_conv2d(*x.data, 1, 1, 4, 4, *k.data, 1, 3, 3, 1, 1, oh, ow);
        REQUIRE(y.dims == Shape({1, 1, oh, ow}));
        for (std::size_t i = 0; i < ref.size(); ++i)
            CHECK(std::abs(y.ptr()[i] - ref[i]) <= 1e-12);
    }
    SUBCASE("stride/padding grid {1,2}x{0,1}") {
        for (int stride : {1, 2})
            for (int pad : {0, 1}) {
                // 9x9 input keeps stride-2 output sizes exact
                Tensor x = random_tensor({2, 3, 9, 9}, rng);
                Tensor k = random_tensor({4, 3, 3, 3}, rng);
                Tape tape;
                Tensor y = conv2d(tape, x, k, stride, pad);
                int oh, ow;
                auto ref = oracles::naive_conv2d(*x.data, 2, 3, 9, 9, *k.data, 4, 3, 3, stride, pad, oh, ow);
                REQUIRE(y.dims == Shape({2, 4, oh, ow}));
                for (std::size_t i = 0; i < ref.size(); ++i)
                    CHECK(std::abs(y.ptr()[i] - ref[i]) <= 1e-12);
            }
    }
}

TEST_CASE("conv2d shape errors") {
    Rng rng(4);
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Tape tape;
    CHECK_THROWS_AS(conv2d(tape, x, random_tensor({1, 3, 3, 3}, rng), 1, 1), ShapeError);  // channel mismatch
    CHECK_THROWS_AS(conv2d(tape, x, random_tensor({1, 2, 2, 2}, rng), 1, 1), ShapeError);  // even kernel
    CHECK_THROWS_AS(conv2d(tape, x, random_tensor({1, 2, 3, 3}, rng), 2, 1), ShapeError);  // non-integer output
}

TEST_CASE("conv2d is deterministic") {
    Rng rng(5);
    Tensor x = random_tensor({1, 2, 6, 6}, rng);
    Tensor k = random_tensor({2, 2, 3, 3}, rng);
    Tape t1, t2;
    Tensor a = conv2d(t1, x, k, 1, 1);
    Tensor b = conv2d(t2, x, k, 1, 1);
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.ptr()[i] == b.ptr()[i]);
}

TEST_CASE("adam zero gradient is a fixed point") {
    Tensor p = Tensor::from({3}, {1.0, -2.0, 0.5});
    Tensor p0 = p.clone();
    AdamState st = AdamState::fresh(3, 3e-4);
    std::vector<double> g(3, 0.0);
    adam_step(p, g, st);
    adam_step(p, g, st);
    CHECK(st.step == 2);
    for (int i = 0; i < 3; ++i) CHECK(p.ptr()[i] == p0.ptr()[i]);
}

TEST_CASE("adam single step matches hand-evaluated formula") {
    // m_hat = 1, v_hat = 1 after one unit-gradient step from fresh state
    Tensor p = Tensor::from({1}, {1.0});
    AdamState st = AdamState::fresh(1, 3e-4);
    adam_step(p, {1.0}, st);
    const double expect = 1.0 - 3e-4 * (1.0 / (1.0 + 1e-8));
    CHECK(std::abs(p.ptr()[0] - expect) < 1e-15);
    CHECK(st.step == 1);
}

TEST_CASE("adam successive steps match the scalar oracle") {
    Tensor p = Tensor::from({1}, {1.0});
    AdamState st = AdamState::fresh(1, 3e-4);
    oracles::ScalarAdam ref(3e-4);
    double pr = 1.0;
    for (int i = 0; i < 5; ++i) {
        adam_step(p, {1.0}, st);
        pr = ref.step(pr, 1.0);
        CHECK(std::abs(p.ptr()[0] - pr) <= 1e-12);
    }
}

TEST_CASE("adam shape mismatch") {
    Tensor p = Tensor::from({2}, {1.0, 2.0});
    AdamState st = AdamState::fresh(3, 3e-4);
    CHECK_THROWS_AS(adam_step(p, {1.0, 1.0}, st), ShapeError);
}

TEST_CASE("softmax cross entropy basic values") {
    SUBCASE("uniform logits over K=256") {
        Tensor logits = Tensor::zeros({1, 256});
        Tape tape;
        Tensor loss = softmax_cross_entropy(tape, logits, {17});
        CHECK(loss.scalar() == doctest::Approx(std::log(256.0)).epsilon(1e-12));
    }
    SUBCASE("saturated correct class") {
        Tensor logits = Tensor::zeros({1, 8});
        logits.mut()[3] = 1000.0;
        Tape tape;
        Tensor loss = softmax_cross_entropy(tape, logits, {3});
        CHECK(loss.scalar() < 1e-12);
    }
    SUBCASE("target out of range") {
        Tensor logits = Tensor::zeros({1, 8});
        Tape tape;
        CHECK_THROWS_AS(softmax_cross_entropy(tape, logits, {8}), IndexError);
        CHECK_THROWS_AS(softmax_cross_entropy(tape, logits, {-1}), IndexError);
    }
}

TEST_CASE("softmax cross entropy gradient vs finite differences") {
    Rng rng(6);
    Tensor logits = random_tensor({3, 7}, rng);
    const double err = grad_check(
        [](Tape& t, std::vector<Tensor>& in) {
            return softmax_cross_entropy(t, in[0], {1, 4, 6});
        },
        {logits});
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check exact for quadratic") {
    Tensor x = Tensor::from({1}, {3.0});
    const double err = grad_check(
        [](Tape& t, std::vector<Tensor>& in) { return mul(t, in[0], in[0]); }, {x});
    CHECK(err < 1e-10);
}

TEST_CASE("grad_check conv2d followed by sum") {
    Rng rng(7);
    Tensor x = random_tensor({1, 2, 5, 5}, rng);
    Tensor k = random_tensor({2, 2, 3, 3}, rng);
    const double err = grad_check(
        [](Tape& t, std::vector<Tensor>& in) {
            return reduce_sum(t, conv2d(t, in[0], in[1], 1, 1));
        },
        {x, k});
    CHECK(err < 1e-6);
}

TEST_CASE("gradient invariant: 20 random instances per op under 1e-4") {
    Rng rng(8);
    struct Case {
        const char* name;
        ScalarFn fn;
        std::vector<Shape> shapes;
        double lo, hi;
    };
    auto sq_sum = [](Tape& t, const Tensor& y) { return reduce_sum(t, mul(t, y, y)); };
    std::vector<Case> cases = {
        {"conv2d_s1p1",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, conv2d(t, in[0], in[1], 1, 1)); },
         {{1, 2, 5, 5}, {2, 2, 3, 3}}, -1.0, 1.0},
        {"conv2d_s2p0",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, conv2d(t, in[0], in[1], 2, 0)); },
         {{1, 2, 5, 5}, {2, 2, 3, 3}}, -1.0, 1.0},
        {"add",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, add(t, in[0], in[1])); },
         {{2, 3}, {2, 3}}, -1.0, 1.0},
        {"mul",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, mul(t, in[0], in[1])); },
         {{2, 3}, {2, 3}}, -1.0, 1.0},
        {"bias",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, add_channel_bias(t, in[0], in[1])); },
         {{2, 3, 2, 2}, {3}}, -1.0, 1.0},
        {"relu",  // inputs kept away from the kink
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, relu(t, in[0])); },
         {{3, 4}}, 0.1, 1.0},
        {"sigmoid",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, sigmoid(t, in[0])); },
         {{3, 4}}, -2.0, 2.0},
        {"tanh",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, tanh_op(t, in[0])); },
         {{3, 4}}, -2.0, 2.0},
        {"avg_pool2x",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, avg_pool2x(t, in[0])); },
         {{1, 2, 4, 4}}, -1.0, 1.0},
        {"upsample_nearest2x",
         [&](Tape& t, std::vector<Tensor>& in) { return sq_sum(t, upsample_nearest2x(t, in[0])); },
         {{1, 2, 3, 3}}, -1.0, 1.0},
        {"concat_slice_shift",
         [&](Tape& t, std::vector<Tensor>& in) {
             Tensor c = concat_channels(t, in[0], in[1]);
             Tensor s = slice_channels(t, c, 1, 3);
             return sq_sum(t, shift_down1(t, s));
         },
         {{1, 2, 3, 3}, {1, 2, 3, 3}}, -1.0, 1.0},
        {"mse",
         [&](Tape& t, std::vector<Tensor>& in) { return mse_mean(t, in[0], in[1]); },
         {{3, 4}, {3, 4}}, -1.0, 1.0},
        {"attention",
         [&](Tape& t, std::vector<Tensor>& in) {
             return sq_sum(t, causal_attention(t, in[0], in[1], in[2], in[3]));
         },
         {{1, 3, 2, 2}, {3, 3}, {3, 3}, {3, 3}}, -1.0, 1.0},
        {"softmax_xent_spatial",
         [&](Tape& t, std::vector<Tensor>& in) {
             return softmax_cross_entropy(t, in[0], {0, 1, 2, 3, 0, 1, 2, 3});
         },
         {{2, 4, 2, 2}}, -1.0, 1.0},
    };
    for (const auto& tc : cases) {
        CAPTURE(tc.name);
        double worst = 0.0;
        for (int inst = 0; inst < 20; ++inst) {
            std::vector<Tensor> inputs;
            for (const Shape& s : tc.shapes) inputs.push_back(random_tensor(s, rng, tc.lo, tc.hi));
            worst = std::max(worst, grad_check(tc.fn, inputs));
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("embedding lookup and gradient") {
    Rng rng(9);
    Tensor table = random_tensor({5, 3}, rng);
    std::vector<int> idx = {0, 4, 2, 2};
    Tape tape;
    tape.watch(table);
    Tensor out = embedding(tape, table, idx, 1, 2, 2);
    REQUIRE(out.dims == Shape({1, 3, 2, 2}));
    // value check: position s takes row idx[s]
    for (int s = 0; s < 4; ++s)
        for (int c = 0; c < 3; ++c)
            CHECK(out.ptr()[c * 4 + s] == table.ptr()[idx[static_cast<std::size_t>(s)] * 3 + c]);
    CHECK_THROWS_AS(embedding(tape, table, {5}, 1, 1, 1), IndexError);

    const double err = grad_check(
        [&](Tape& t, std::vector<Tensor>& in) {
            Tensor e = embedding(t, in[0], idx, 1, 2, 2);
            return reduce_sum(t, mul(t, e, e));
        },
        {table});
    CHECK(err < 1e-6);
}

TEST_CASE("straight_through forward value and gradient routing") {
    Rng rng(10);
    Tensor z_e = random_tensor({2, 3}, rng);
    Tensor z_q = random_tensor({2, 3}, rng);
    Tape tape;
    tape.watch(z_e);
    Tensor out = straight_through(tape, z_e, z_q);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.ptr()[i] == z_q.ptr()[i]);
    Tensor loss = reduce_sum(tape, mul(tape, out, out));
    tape.backward(loss);
    // gradient at z_e equals d(loss)/d(out) = 2*z_q elementwise
    const auto& g = tape.grad(z_e);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        CHECK(g[static_cast<std::size_t>(i)] == doctest::Approx(2.0 * z_q.ptr()[i]).epsilon(1e-12));
}

TEST_CASE("dropout train/eval semantics") {
    Rng rng(11);
    Tensor x = Tensor::full({100}, 1.0);
    Tape tape;
    Rng dr = rng.derive("dropout");
    Tensor eval_out = dropout(tape, x, 0.5, dr, false);
    for (std::int64_t i = 0; i < 100; ++i) CHECK(eval_out.ptr()[i] == 1.0);
    Tensor train_out = dropout(tape, x, 0.5, dr, true);
    int kept = 0;
    for (std::int64_t i = 0; i < 100; ++i) {
        const double v = train_out.ptr()[i];
        CHECK((v == 0.0 || v == 2.0));
        kept += v != 0.0;
    }
    CHECK(kept > 20);
    CHECK(kept < 80);
}

TEST_CASE("non-finite values are rejected at op boundaries") {
    CHECK_THROWS_AS(Tensor::from({2}, {1.0, std::nan("")}), NumericError);
    Tape tape;
    Tensor big = Tensor::from({1}, {1e308});
    CHECK_THROWS_AS(mul(tape, big, big), NumericError);  // overflow caught at the op output
}

TEST_CASE("grad_check rejects eps outside [1e-7,1e-3]") {
    Tensor x = Tensor::from({1}, {1.0});
    auto f = [](Tape& t, std::vector<Tensor>& in) { return reduce_sum(t, in[0]); };
    CHECK_THROWS_AS(grad_check(f, {x}, 1e-8), ConfigError);
    CHECK_THROWS_AS(grad_check(f, {x}, 1e-2), ConfigError);
}
