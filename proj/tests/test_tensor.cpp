#include <doctest.h>

#include <cmath>

#include "lirm/tensor.hpp"

using namespace lirm;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, T scale = T(1)) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    for (auto& v : t.values()) v = static_cast<T>(rng.gaussian()) * scale;
    return t;
}

} // namespace

TEST_CASE("linear: identity and scalar affine") {
    Tape<double> tape;
    auto x = Tensor<double>::from({1, 2}, {1.0, 0.0});
    auto w = Tensor<double>::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto b = Tensor<double>::zeros({2});
    auto y = linear(&tape, x, w, b);
    CHECK(y.data()[0] == doctest::Approx(1.0));
    CHECK(y.data()[1] == doctest::Approx(0.0));

    auto x2 = Tensor<double>::from({1, 1}, {2.0});
    auto w2 = Tensor<double>::from({1, 1}, {3.0});
    auto b2 = Tensor<double>::from({1}, {1.0});
    CHECK(linear(&tape, x2, w2, b2).item() == doctest::Approx(7.0));
}

TEST_CASE("linear: shape mismatch names both shapes") {
    Tape<double> tape;
    auto x = Tensor<double>::zeros({2, 3});
    auto w = Tensor<double>::zeros({4, 2});
    auto b = Tensor<double>::zeros({2});
    CHECK_THROWS_WITH_AS(linear(&tape, x, w, b),
                         doctest::Contains("[2,3]"), Error);
}

TEST_CASE("linear: gradients match central differences") {
    Rng rng(11);
    auto x = random_tensor<double>({3, 4}, rng);
    auto w = random_tensor<double>({4, 5}, rng);
    auto b = random_tensor<double>({5}, rng);
    auto coeff = random_tensor<double>({3, 5}, rng);

    ParamStore<double> store;
    store.add("x", x);
    store.add("w", w);
    store.add("b", b);

    auto f = [&]() {
        Tape<double> t;
        return sum(&t, mul(&t, linear(&t, x, w, b), coeff)).item();
    };
    Tape<double> tape;
    auto loss = sum(&tape, mul(&tape, linear(&tape, x, w, b), coeff));
    tape.backward(loss);

    std::vector<ParamEntry<double>*> ps;
    for (auto& e : store.entries()) ps.push_back(&e);
    auto rep = finite_difference_check<double>(f, ps, 1e-5);
    CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("layer_norm: constant row maps to zero, unit-variance row preserved") {
    Tape<double> tape;
    auto g = Tensor<double>::full({4}, 1.0);
    auto b = Tensor<double>::zeros({4});
    auto x = Tensor<double>::full({1, 4}, 3.7);
    auto y = layer_norm(&tape, x, g, b);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(0.0));

    auto g2 = Tensor<double>::full({2}, 1.0);
    auto b2 = Tensor<double>::zeros({2});
    auto x2 = Tensor<double>::from({1, 2}, {-1.0, 1.0});
    auto y2 = layer_norm(&tape, x2, g2, b2);
    CHECK(y2.data()[0] == doctest::Approx(-1.0).epsilon(1e-4));
    CHECK(y2.data()[1] == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm: gradient check") {
    Rng rng(3);
    auto x = random_tensor<double>({2, 6}, rng);
    auto g = random_tensor<double>({6}, rng, 0.5);
    auto b = random_tensor<double>({6}, rng, 0.5);
    auto coeff = random_tensor<double>({2, 6}, rng);
    ParamStore<double> store;
    store.add("x", x);
    store.add("g", g);
    store.add("b", b);

    auto f = [&]() {
        Tape<double> t;
        return sum(&t, mul(&t, layer_norm(&t, x, g, b), coeff)).item();
    };
    Tape<double> tape;
    tape.backward(sum(&tape, mul(&tape, layer_norm(&tape, x, g, b), coeff)));
    std::vector<ParamEntry<double>*> ps;
    for (auto& e : store.entries()) ps.push_back(&e);
    CHECK(finite_difference_check<double>(f, ps, 1e-5).max_rel_err <= 1e-5);
}

namespace {

template <typename T>
AttentionWeights<T> identity_attention(std::size_t d) {
    AttentionWeights<T> w;
    w.ln_gain = Tensor<T>::full({d}, T(1));
    w.ln_bias = Tensor<T>::zeros({d});
    auto eye = Tensor<T>::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) eye.data()[i * d + i] = T(1);
    w.wq = eye.detach();
    w.wk = eye.detach();
    w.wv = eye.detach();
    w.wo = eye.detach();
    return w;
}

} // namespace

TEST_CASE("self_attention: single zero-mean unit-variance token doubles under identity projections") {
    Tape<double> tape;
    auto w = identity_attention<double>(2);
    auto x = Tensor<double>::from({1, 2}, {-1.0, 1.0});
    auto y = self_attention(&tape, x, 1, w);
    CHECK(y.data()[0] == doctest::Approx(-2.0).epsilon(1e-4));
    CHECK(y.data()[1] == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("self_attention: two identical tokens attend half-and-half") {
    Tape<double> tape;
    auto w = identity_attention<double>(4);
    auto x = Tensor<double>::from({2, 4}, {0.3, -0.7, 1.1, 0.2, 0.3, -0.7, 1.1, 0.2});
    std::vector<double> probs;
    self_attention(&tape, x, 2, w, &probs);
    REQUIRE(probs.size() == 8); // two heads of 2x2
    for (double p : probs) CHECK(p == doctest::Approx(0.5));
}

TEST_CASE("self_attention: head count must divide model dim") {
    Tape<double> tape;
    auto w = identity_attention<double>(4);
    auto x = Tensor<double>::zeros({2, 4});
    CHECK_THROWS_AS(self_attention(&tape, x, 3, w), Error);
}

TEST_CASE("self_attention: gradient check on all projections") {
    Rng rng(17);
    const std::size_t d = 6;
    AttentionWeights<double> w;
    w.ln_gain = random_tensor<double>({d}, rng, 0.3);
    for (auto& v : w.ln_gain.values()) v += 1.0;
    w.ln_bias = random_tensor<double>({d}, rng, 0.3);
    w.wq = random_tensor<double>({d, d}, rng, 0.5);
    w.wk = random_tensor<double>({d, d}, rng, 0.5);
    w.wv = random_tensor<double>({d, d}, rng, 0.5);
    w.wo = random_tensor<double>({d, d}, rng, 0.5);
    auto x = random_tensor<double>({4, d}, rng);
    auto coeff = random_tensor<double>({4, d}, rng);

    ParamStore<double> store;
    store.add("wq", w.wq);
    store.add("wk", w.wk);
    store.add("wv", w.wv);
    store.add("wo", w.wo);
    store.add("ln_g", w.ln_gain);
    store.add("ln_b", w.ln_bias);
    store.add("x", x);

    auto f = [&]() {
        Tape<double> t;
        return sum(&t, mul(&t, self_attention(&t, x, 2, w), coeff)).item();
    };
    Tape<double> tape;
    tape.backward(sum(&tape, mul(&tape, self_attention(&tape, x, 2, w), coeff)));
    std::vector<ParamEntry<double>*> ps;
    for (auto& e : store.entries()) ps.push_back(&e);
    auto rep = finite_difference_check<double>(f, ps, 1e-5);
    CHECK(rep.max_rel_err <= 1e-5);
}

TEST_CASE("backward: quadratic and sum seeds") {
    Tape<double> tape;
    auto x = Tensor<double>::scalar(3.0, true);
    auto y = mul(&tape, x, x);
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(6.0));

    Tape<double> t2;
    auto v = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    t2.backward(sum(&t2, v));
    for (double g : v.grad()) CHECK(g == doctest::Approx(1.0));
}

TEST_CASE("backward: rejects non-scalar loss") {
    Tape<double> tape;
    auto v = Tensor<double>::from({2}, {1, 2}, true);
    CHECK_THROWS_AS(tape.backward(v), Error);
}

TEST_CASE("backward: additivity over separate losses") {
    Rng rng(5);
    auto x = random_tensor<double>({3, 3}, rng);
    x.set_requires_grad(true);

    Tape<double> t1;
    auto l1 = mse(&t1, silu(&t1, x), Tensor<double>::zeros({3, 3}));
    auto l2 = sum(&t1, sigmoid(&t1, x));
    t1.backward(add(&t1, l1, l2));
    std::vector<double> combined = x.grad();

    x.zero_grad();
    Tape<double> t2;
    t2.backward(mse(&t2, silu(&t2, x), Tensor<double>::zeros({3, 3})));
    Tape<double> t3;
    t3.backward(sum(&t3, sigmoid(&t3, x)));
    for (std::size_t i = 0; i < combined.size(); ++i)
        CHECK(combined[i] == doctest::Approx(x.grad()[i]).epsilon(1e-12));
}

TEST_CASE("backward: composed linear+layer_norm+attention chain matches finite differences") {
    Rng rng(23);
    const std::size_t d = 4;
    auto x = random_tensor<double>({3, d}, rng);
    auto w_in = random_tensor<double>({d, d}, rng, 0.5);
    auto b_in = random_tensor<double>({d}, rng, 0.2);
    AttentionWeights<double> aw;
    aw.ln_gain = Tensor<double>::full({d}, 1.0);
    aw.ln_bias = Tensor<double>::zeros({d});
    aw.wq = random_tensor<double>({d, d}, rng, 0.5);
    aw.wk = random_tensor<double>({d, d}, rng, 0.5);
    aw.wv = random_tensor<double>({d, d}, rng, 0.5);
    aw.wo = random_tensor<double>({d, d}, rng, 0.5);
    auto gain = Tensor<double>::full({d}, 1.0);
    auto bias = Tensor<double>::zeros({d});
    auto coeff = random_tensor<double>({3, d}, rng);

    ParamStore<double> store;
    store.add("w_in", w_in);
    store.add("b_in", b_in);
    store.add("wq", aw.wq);
    store.add("wo", aw.wo);

    auto run = [&](Tape<double>* t) {
        auto h = linear(t, x, w_in, b_in);
        h = layer_norm(t, h, gain, bias);
        h = self_attention(t, h, 2, aw);
        return sum(t, mul(t, h, coeff));
    };
    Tape<double> tape;
    tape.backward(run(&tape));
    auto f = [&]() {
        Tape<double> t;
        return run(&t).item();
    };
    std::vector<ParamEntry<double>*> ps;
    for (auto& e : store.entries()) ps.push_back(&e);
    CHECK(finite_difference_check<double>(f, ps, 1e-5).max_rel_err <= 1e-5);
}

TEST_CASE("adamw: weight-decay-only step scales parameters") {
    ParamStore<float> store;
    auto p = Tensor<float>::from({2}, {1.0f, -2.0f});
    store.add("p", p);
    p.grad_accum(); // zero grad present
    AdamW<float> opt;
    AdamWConfig<float> cfg;
    cfg.lr = 0.1f;
    cfg.weight_decay = 0.1f;
    opt.step(store, cfg);
    CHECK(p.data()[0] == doctest::Approx(0.99f));
    CHECK(p.data()[1] == doctest::Approx(-1.98f));
}

TEST_CASE("adamw: first step with constant gradient is a signed lr step") {
    ParamStore<double> store;
    auto p = Tensor<double>::from({1}, {0.5});
    store.add("p", p);
    p.grad_accum()[0] = 0.37;
    AdamW<double> opt;
    AdamWConfig<double> cfg;
    cfg.lr = 0.01;
    opt.step(store, cfg);
    // bias correction cancels at step 1: delta = -lr * g / (|g| + eps)
    CHECK(p.data()[0] == doctest::Approx(0.5 - 0.01 * 0.37 / (0.37 + 1e-8)).epsilon(1e-9));
}

TEST_CASE("adamw: identity when wd=0 and grad=0") {
    ParamStore<double> store;
    auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.25});
    store.add("p", p);
    p.grad_accum();
    AdamW<double> opt;
    AdamWConfig<double> cfg;
    cfg.lr = 0.1;
    opt.step(store, cfg);
    CHECK(p.data()[0] == doctest::Approx(1.0));
    CHECK(p.data()[1] == doctest::Approx(-2.0));
    CHECK(p.data()[2] == doctest::Approx(0.25));
}

TEST_CASE("adamw: 100 steps drive a quadratic toward zero") {
    ParamStore<double> store;
    auto x = Tensor<double>::from({1}, {1.0});
    store.add("x", x);
    AdamW<double> opt;
    AdamWConfig<double> cfg;
    cfg.lr = 0.05;
    for (int i = 0; i < 100; ++i) {
        store.zero_grad();
        Tape<double> tape;
        tape.backward(mul(&tape, x, x));
        opt.step(store, cfg);
    }
    CHECK(std::abs(x.data()[0]) < 0.1);
}

TEST_CASE("adamw: NaN gradient rejects the step and names the parameter") {
    ParamStore<double> store;
    auto p = Tensor<double>::from({1}, {1.0});
    store.add("weights.w0", p);
    p.grad_accum()[0] = std::nan("");
    AdamW<double> opt;
    CHECK_THROWS_WITH_AS(opt.step(store, AdamWConfig<double>{}),
                         doctest::Contains("weights.w0"), Error);
    CHECK(p.data()[0] == doctest::Approx(1.0)); // untouched
}

TEST_CASE("finite_difference_check: quadratic is tight, corrupted rule is loud") {
    auto x = Tensor<double>::from({2}, {0.7, -1.3});
    ParamStore<double> store;
    store.add("x", x);
    auto f = [&]() {
        Tape<double> t;
        return mse(&t, x, Tensor<double>::zeros({2})).item();
    };
    Tape<double> tape;
    tape.backward(mse(&tape, x, Tensor<double>::zeros({2})));
    std::vector<ParamEntry<double>*> ps;
    for (auto& e : store.entries()) ps.push_back(&e);
    CHECK(finite_difference_check<double>(f, ps).max_rel_err <= 1e-8);

    // negative control: corrupt one gradient entry by 10%
    x.grad_accum()[0] *= 1.1;
    CHECK(finite_difference_check<double>(f, ps).max_rel_err >= 1e-2);
}

TEST_CASE("finite_difference_check: non-finite objective is an error") {
    auto x = Tensor<double>::from({1}, {1.0});
    ParamStore<double> store;
    store.add("x", x);
    x.grad_accum();
    auto f = [&]() { return std::numeric_limits<double>::infinity(); };
    std::vector<ParamEntry<double>*> ps{&store.entries()[0]};
    CHECK_THROWS_AS(finite_difference_check<double>(f, ps), Error);
}

TEST_CASE("tape: reusable after reset") {
    auto x = Tensor<double>::scalar(2.0, true);
    Tape<double> tape;
    tape.backward(mul(&tape, x, x));
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    tape.reset();
    CHECK(tape.num_ops() == 0);
    x.zero_grad();
    tape.backward(mul(&tape, x, x));
    CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("memory meter tracks live tensor bytes") {
    long long before = MemMeter::current().load();
    {
        auto t = Tensor<float>::zeros({1024});
        CHECK(MemMeter::current().load() >= before + 4096);
    }
    CHECK(MemMeter::current().load() == before);
}
