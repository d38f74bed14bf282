#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "daso/grad_check.hpp"
#include "daso/nn.hpp"

using namespace daso;

namespace {

bool layers_equal(const std::vector<Layer>& a, const std::vector<Layer>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t l = 0; l < a.size(); ++l) {
        if (a[l].w.a != b[l].w.a || a[l].b != b[l].b) return false;
    }
    return true;
}

// hand-rolled central difference of a scalar loss in one classifier weight,
// independent of grad_check.hpp
double classifier_fd(ModelParams m, const Vec& x, const Vec& target, std::size_t idx, double eps) {
    m.classifier.w.a[idx] += eps;
    double up = softmax_ce(target, forward(m, x, false).logits).loss;
    m.classifier.w.a[idx] -= 2.0 * eps;
    double down = softmax_ce(target, forward(m, x, false).logits).loss;
    return (up - down) / (2.0 * eps);
}

}  // namespace

TEST_CASE("init_model is deterministic and shape-correct") {
    ModelParams a = init_model({2, 8}, 2, 0);
    ModelParams b = init_model({2, 8}, 2, 0);
    REQUIRE(layers_equal(a.encoder, b.encoder));
    REQUIRE(a.classifier.w.a == b.classifier.w.a);

    REQUIRE(a.encoder.size() == 1);
    REQUIRE(a.encoder[0].fan_in() == 2);
    REQUIRE(a.encoder[0].fan_out() == 8);
    REQUIRE(a.classifier.w.rows == 8);
    REQUIRE(a.classifier.w.cols == 2);
    REQUIRE(a.classifier.b.size() == 2);

    // EMA shadow starts as an exact copy
    REQUIRE(layers_equal(a.encoder, a.ema_encoder));
    // biases zero, weights within the fan-in bound
    for (double v : a.encoder[0].b) REQUIRE(v == 0.0);
    double bound = 1.0 / std::sqrt(2.0);
    for (double v : a.encoder[0].w.a) {
        REQUIRE(std::abs(v) <= bound);
    }

    ModelParams c = init_model({2, 8}, 2, 1);
    REQUIRE_FALSE(layers_equal(a.encoder, c.encoder));

    REQUIRE_THROWS_AS(init_model({}, 2, 0), ConfigError);
    REQUIRE_THROWS_AS(init_model({2, 8}, 1, 0), ConfigError);
    REQUIRE_THROWS_AS(init_model({2, 0, 4}, 2, 0), ConfigError);
}

TEST_CASE("forward basics") {
    SECTION("all-zero parameters give zero feature and logits") {
        ModelParams m = init_model({3, 4}, 2, 0);
        for (auto& l : m.encoder) {
            std::fill(l.w.a.begin(), l.w.a.end(), 0.0);
        }
        std::fill(m.classifier.w.a.begin(), m.classifier.w.a.end(), 0.0);
        ForwardTape t = forward(m, {1.0, -2.0, 3.0}, false);
        REQUIRE(t.feature() == Vec{0.0, 0.0, 0.0, 0.0});
        REQUIRE(t.logits == Vec{0.0, 0.0});
    }

    SECTION("identity encoder layer passes non-negative inputs through") {
        ModelParams m = init_model({3, 3}, 2, 0);
        std::fill(m.encoder[0].w.a.begin(), m.encoder[0].w.a.end(), 0.0);
        for (int i = 0; i < 3; ++i) m.encoder[0].w(i, i) = 1.0;
        Vec x{0.5, 0.0, 2.0};
        REQUIRE(forward(m, x, false).feature() == x);
        // negative coordinates clip
        REQUIRE(forward(m, {-1.0, 1.0, -2.0}, false).feature() == Vec{0.0, 1.0, 0.0});
    }

    SECTION("deterministic across calls and dimension-checked") {
        ModelParams m = init_model({3, 5, 4}, 3, 7);
        Vec x{0.3, -0.4, 1.2};
        ForwardTape a = forward(m, x, false);
        ForwardTape b = forward(m, x, false);
        REQUIRE(a.logits == b.logits);
        REQUIRE(a.feature() == b.feature());
        REQUIRE_THROWS_AS(forward(m, {1.0, 2.0}, false), ShapeError);
    }
}

TEST_CASE("softmax_ce values and gradient") {
    SECTION("one-hot target with uniform logits over K=4") {
        auto r = softmax_ce({1.0, 0.0, 0.0, 0.0}, {0.7, 0.7, 0.7, 0.7});
        REQUIRE_THAT(r.loss, Catch::Matchers::WithinAbs(std::log(4.0), 1e-12));
    }
    SECTION("logits = log target is a fixed point") {
        Vec target{0.6, 0.3, 0.1};
        Vec logits{std::log(0.6), std::log(0.3), std::log(0.1)};
        auto r = softmax_ce(target, logits);
        double entropy = -(0.6 * std::log(0.6) + 0.3 * std::log(0.3) + 0.1 * std::log(0.1));
        REQUIRE_THAT(r.loss, Catch::Matchers::WithinAbs(entropy, 1e-12));
        for (double g : r.dlogits) REQUIRE_THAT(g, Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
    SECTION("frozen scalar case") {
        auto r = softmax_ce({1.0, 0.0}, {3.0, 1.0});
        REQUIRE_THAT(r.loss, Catch::Matchers::WithinAbs(0.12692801104297263, 1e-13));
    }
    SECTION("loss is non-negative, tiny at a large correct margin") {
        auto r = softmax_ce({0.0, 1.0}, {-10.0, 10.0});
        REQUIRE(r.loss >= 0.0);
        REQUIRE(r.loss < 1e-6);
    }
    SECTION("non-normalized target rejected") {
        REQUIRE_THROWS_AS(softmax_ce({0.5, 0.4}, {0.0, 0.0}), ContractError);
        REQUIRE_THROWS_AS(softmax_ce({1.5, -0.5}, {0.0, 0.0}), ContractError);
    }
}

TEST_CASE("backward matches a hand-rolled finite difference") {
    ModelParams m = init_model({3, 6, 4}, 3, 11);
    Vec x{0.4, -1.1, 0.7};
    Vec target{0.2, 0.5, 0.3};
    ForwardTape tape = forward(m, x, false);
    auto ce = softmax_ce(target, tape.logits);
    Grads g = Grads::zeros_like(m);
    backward(m, tape, &ce.dlogits, nullptr, 1.0, g);
    for (std::size_t idx : {std::size_t{0}, std::size_t{5}, std::size_t{9}}) {
        double fd = classifier_fd(m, x, target, idx, 1e-6);
        REQUIRE_THAT(g.classifier.w.a[idx], Catch::Matchers::WithinAbs(fd, 1e-7));
    }
}

TEST_CASE("EMA tapes refuse to backpropagate") {
    ModelParams m = init_model({3, 4}, 2, 3);
    ForwardTape t = forward(m, {1.0, 2.0, 3.0}, true);
    Vec d{1.0, 0.0};
    Grads g = Grads::zeros_like(m);
    REQUIRE_THROWS_AS(backward(m, t, &d, nullptr, 1.0, g), ContractError);
}

TEST_CASE("sgd_step update rule") {
    SECTION("plain SGD without momentum") {
        ModelParams m = init_model({1, 1}, 2, 0);
        m.encoder[0].w.a[0] = 1.0;
        OptState opt = OptState::make(m, 0.5, 0.0, 0.0, false);
        Grads g = Grads::zeros_like(m);
        g.encoder[0].w.a[0] = 0.2;
        sgd_step(m, g, opt);
        REQUIRE_THAT(m.encoder[0].w.a[0], Catch::Matchers::WithinAbs(1.0 - 0.5 * 0.2, 1e-15));
    }
    SECTION("zero gradients leave parameters unchanged") {
        ModelParams m = init_model({2, 3}, 2, 5);
        ModelParams before = m;
        OptState opt = OptState::make(m, 0.1, 0.9, 0.0, true);
        Grads g = Grads::zeros_like(m);
        sgd_step(m, g, opt);
        REQUIRE(layers_equal(m.encoder, before.encoder));
        REQUIRE(m.classifier.w.a == before.classifier.w.a);
    }
    SECTION("momentum accumulates: updates -0.1 then -0.19") {
        ModelParams m = init_model({1, 1}, 2, 0);
        m.encoder[0].w.a[0] = 0.0;
        OptState opt = OptState::make(m, 0.1, 0.9, 0.0, false);
        Grads g = Grads::zeros_like(m);
        g.encoder[0].w.a[0] = 1.0;
        sgd_step(m, g, opt);
        REQUIRE_THAT(m.encoder[0].w.a[0], Catch::Matchers::WithinAbs(-0.1, 1e-15));
        sgd_step(m, g, opt);
        REQUIRE_THAT(m.encoder[0].w.a[0], Catch::Matchers::WithinAbs(-0.29, 1e-15));  // second delta -0.19
    }
    SECTION("nesterov looks ahead") {
        ModelParams m = init_model({1, 1}, 2, 0);
        m.encoder[0].w.a[0] = 0.0;
        OptState opt = OptState::make(m, 0.1, 0.9, 0.0, true);
        Grads g = Grads::zeros_like(m);
        g.encoder[0].w.a[0] = 1.0;
        sgd_step(m, g, opt);
        // v = 1, step = g + 0.9 v = 1.9
        REQUIRE_THAT(m.encoder[0].w.a[0], Catch::Matchers::WithinAbs(-0.19, 1e-15));
    }
    SECTION("weight decay pulls toward zero") {
        ModelParams m = init_model({1, 1}, 2, 0);
        m.encoder[0].w.a[0] = 2.0;
        OptState opt = OptState::make(m, 0.1, 0.0, 0.5, false);
        Grads g = Grads::zeros_like(m);
        sgd_step(m, g, opt);
        REQUIRE_THAT(m.encoder[0].w.a[0], Catch::Matchers::WithinAbs(2.0 - 0.1 * (0.5 * 2.0), 1e-15));
    }
}

TEST_CASE("ema_update") {
    auto scalar_model = [] {
        ModelParams m = init_model({1, 1}, 2, 0);
        m.encoder[0].w.a[0] = 1.0;
        m.ema_encoder[0].w.a[0] = 0.0;
        return m;
    };
    SECTION("rho = 0 copies, rho = 1 freezes") {
        ModelParams m = scalar_model();
        ema_update(m, 0.0);
        REQUIRE(m.ema_encoder[0].w.a[0] == 1.0);
        m.ema_encoder[0].w.a[0] = 0.25;
        ema_update(m, 1.0);
        REQUIRE(m.ema_encoder[0].w.a[0] == 0.25);
    }
    SECTION("three updates at rho 0.9: 0.1, 0.19, 0.271") {
        ModelParams m = scalar_model();
        ema_update(m, 0.9);
        REQUIRE_THAT(m.ema_encoder[0].w.a[0], Catch::Matchers::WithinAbs(0.1, 1e-15));
        ema_update(m, 0.9);
        REQUIRE_THAT(m.ema_encoder[0].w.a[0], Catch::Matchers::WithinAbs(0.19, 1e-15));
        ema_update(m, 0.9);
        REQUIRE_THAT(m.ema_encoder[0].w.a[0], Catch::Matchers::WithinAbs(0.271, 1e-15));
    }
    SECTION("rho outside [0,1] rejected") {
        ModelParams m = scalar_model();
        REQUIRE_THROWS_AS(ema_update(m, -0.1), ConfigError);
        REQUIRE_THROWS_AS(ema_update(m, 1.1), ConfigError);
    }
    SECTION("contraction: |ema - p| <= rho^n |ema0 - p|") {
        ModelParams m = init_model({2, 3}, 2, 9);
        ModelParams target = m;  // live params held fixed
        for (auto& l : m.ema_encoder) {
            for (double& v : l.w.a) v += 0.7;
        }
        double rho = 0.8;
        for (int n = 1; n <= 12; ++n) {
            ema_update(m, rho);
            double bound = std::pow(rho, n) * 0.7 + 1e-12;
            for (std::size_t l = 0; l < m.ema_encoder.size(); ++l) {
                for (std::size_t i = 0; i < m.ema_encoder[l].w.a.size(); ++i) {
                    REQUIRE(std::abs(m.ema_encoder[l].w.a[i] - target.encoder[l].w.a[i]) <= bound);
                }
            }
        }
    }
}

TEST_CASE("finite_diff_check on a plain classification loss") {
    ModelParams m = init_model({3, 8, 6}, 4, 17);
    Rng data_rng(99);
    std::vector<Vec> xs;
    std::vector<int> ys;
    for (int i = 0; i < 5; ++i) {
        Vec x(3);
        for (double& v : x) v = data_rng.gaussian();
        xs.push_back(x);
        ys.push_back(i % 4);
    }

    auto loss_fn = [&](const ModelParams& p, std::uint64_t* key) {
        double total = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            ForwardTape t = forward(p, xs[i], false);
            if (key != nullptr) *key = relu_pattern_key(t, *key);
            Vec target(4, 0.0);
            target[ys[i]] = 1.0;
            total += softmax_ce(target, t.logits).loss / xs.size();
        }
        return total;
    };

    Grads g = Grads::zeros_like(m);
    for (std::size_t i = 0; i < xs.size(); ++i) {
        ForwardTape t = forward(m, xs[i], false);
        Vec target(4, 0.0);
        target[ys[i]] = 1.0;
        auto ce = softmax_ce(target, t.logits);
        for (double& v : ce.dlogits) v /= xs.size();
        backward(m, t, &ce.dlogits, nullptr, 1.0, g);
    }

    Rng rng(1);
    GradCheckReport report = finite_diff_check(m, loss_fn, g, 1e-5, static_cast<std::size_t>(-1), rng);
    REQUIRE(report.coords_checked > 100);
    REQUIRE(report.max_rel_err < 1e-4);
}

TEST_CASE("finite_diff_check reports zero error for a constant-loss parameter") {
    ModelParams m = init_model({2, 3}, 2, 21);
    auto loss_fn = [](const ModelParams&, std::uint64_t*) { return 3.5; };
    Grads g = Grads::zeros_like(m);
    Rng rng(2);
    GradCheckReport report = finite_diff_check(m, loss_fn, g, 1e-5, static_cast<std::size_t>(-1), rng);
    REQUIRE(report.max_rel_err == 0.0);
}

TEST_CASE("finite_diff_check rejects a loss that keeps crossing kinks") {
    ModelParams m = init_model({2, 3}, 2, 23);
    // pathological evaluator: every call reports a different ReLU region
    int calls = 0;
    auto loss_fn = [&calls](const ModelParams&, std::uint64_t* key) {
        if (key != nullptr) *key = static_cast<std::uint64_t>(calls++);
        return 1.0;
    };
    Grads g = Grads::zeros_like(m);
    Rng rng(3);
    REQUIRE_THROWS_AS(finite_diff_check(m, loss_fn, g, 1e-5, static_cast<std::size_t>(-1), rng), NumericError);
}
