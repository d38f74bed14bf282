#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "daso/blend.hpp"
#include "daso/rng.hpp"

using namespace daso;

namespace {

// Straight-line reference for the whole blending procedure, kept deliberately
// independent of blend_weights/blend: temperature-scale the empirical
// distribution, normalize by its max, then convex-mix at the linear argmax.
Vec blend_reference(const Vec& p_hat, const Vec& q_hat, const Vec& m_hat, double t_dist) {
    std::size_t K = p_hat.size();
    Vec u(K);
    for (std::size_t k = 0; k < K; ++k) u[k] = m_hat[k] == 0.0 ? 0.0 : std::pow(m_hat[k], 1.0 / t_dist);
    double mx = u[0];
    for (double v : u) mx = std::max(mx, v);
    for (std::size_t k = 0; k < K; ++k) u[k] /= mx;
    std::size_t kp = 0;
    for (std::size_t k = 1; k < K; ++k) {
        if (p_hat[k] > p_hat[kp]) kp = k;
    }
    Vec out(K);
    for (std::size_t k = 0; k < K; ++k) out[k] = (1.0 - u[kp]) * p_hat[k] + u[kp] * q_hat[k];
    return out;
}

Vec random_probs(Rng& rng, std::size_t k, bool allow_zeros = false) {
    Vec p(k);
    double sum = 0.0;
    for (double& v : p) {
        v = allow_zeros && rng.uniform() < 0.25 ? 0.0 : rng.uniform() + 1e-4;
        sum += v;
    }
    if (sum == 0.0) p[rng.uniform_index(k)] = sum = 1.0;
    for (double& v : p) v /= sum;
    return p;
}

}  // namespace

TEST_CASE("tracker segments") {
    PseudoLabelTracker t(3, 4);
    // uniform before any snapshot
    for (double v : t.m_hat()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-15));

    SECTION("a segment of pure class-0 predictions snapshots to e_0") {
        for (int step = 0; step < 4; ++step) {
            bool snap = t.record_predictions({0, 0});
            REQUIRE(snap == (step == 3));
        }
        REQUIRE(t.m_hat() == Vec{1.0, 0.0, 0.0});
    }
    SECTION("an empty segment leaves m_hat unchanged") {
        for (int step = 0; step < 4; ++step) t.record_predictions({1});
        Vec before = t.m_hat();
        for (int step = 0; step < 4; ++step) t.record_predictions({});
        REQUIRE(t.m_hat() == before);
    }
    SECTION("counts normalize: [50, 30, 20] -> [0.5, 0.3, 0.2]") {
        std::vector<int> preds;
        for (int i = 0; i < 50; ++i) preds.push_back(0);
        for (int i = 0; i < 30; ++i) preds.push_back(1);
        for (int i = 0; i < 20; ++i) preds.push_back(2);
        for (int step = 0; step < 4; ++step) t.record_predictions(preds);
        REQUIRE_THAT(t.m_hat()[0], Catch::Matchers::WithinAbs(0.5, 1e-15));
        REQUIRE_THAT(t.m_hat()[1], Catch::Matchers::WithinAbs(0.3, 1e-15));
        REQUIRE_THAT(t.m_hat()[2], Catch::Matchers::WithinAbs(0.2, 1e-15));
    }
    SECTION("counts reset between segments") {
        for (int step = 0; step < 4; ++step) t.record_predictions({0});
        for (int step = 0; step < 4; ++step) t.record_predictions({2});
        REQUIRE(t.m_hat() == Vec{0.0, 0.0, 1.0});
    }
    SECTION("out-of-range predictions rejected") {
        REQUIRE_THROWS_AS(t.record_predictions({3}), InputError);
        REQUIRE_THROWS_AS(t.record_predictions({-1}), InputError);
    }
}

TEST_CASE("tracker sliding window") {
    PseudoLabelTracker t(2, 100, TrackerMode::Window, 3);
    t.record_predictions({0});
    REQUIRE(t.m_hat() == Vec{1.0, 0.0});
    t.record_predictions({1});
    t.record_predictions({1});
    REQUIRE_THAT(t.m_hat()[1], Catch::Matchers::WithinAbs(2.0 / 3.0, 1e-15));
    // the class-0 step falls out of the window
    t.record_predictions({1});
    REQUIRE(t.m_hat() == Vec{0.0, 1.0});
    // empty steps inside the window keep the last non-empty estimate
    t.record_predictions({});
    t.record_predictions({});
    t.record_predictions({});
    REQUIRE(t.m_hat() == Vec{0.0, 1.0});
}

TEST_CASE("blend_weights") {
    SECTION("uniform m_hat gives all ones") {
        Vec u = blend_weights({0.25, 0.25, 0.25, 0.25}, 0.7);
        REQUIRE(u == Vec{1.0, 1.0, 1.0, 1.0});
    }
    SECTION("hand values at T_dist = 1") {
        Vec u = blend_weights({0.5, 0.3, 0.2}, 1.0);
        REQUIRE_THAT(u[0], Catch::Matchers::WithinAbs(1.0, 1e-15));
        REQUIRE_THAT(u[1], Catch::Matchers::WithinAbs(0.6, 1e-15));
        REQUIRE_THAT(u[2], Catch::Matchers::WithinAbs(0.4, 1e-15));
    }
    SECTION("independently computed values at T_dist = 0.3") {
        Vec u = blend_weights({0.5, 0.3, 0.2}, 0.3);
        REQUIRE_THAT(u[0], Catch::Matchers::WithinAbs(1.0, 1e-15));
        REQUIRE_THAT(u[1], Catch::Matchers::WithinAbs(0.182181, 1e-6));
        REQUIRE_THAT(u[2], Catch::Matchers::WithinAbs(0.047156, 1e-6));
    }
    SECTION("zero mass maps to exactly zero weight, argmax to exactly one") {
        Vec u = blend_weights({0.7, 0.0, 0.3}, 0.521);
        REQUIRE(u[0] == 1.0);
        REQUIRE(u[1] == 0.0);
        REQUIRE(u[2] > 0.0);
        // two tied argmaxes both map to 1
        Vec tied = blend_weights({0.4, 0.4, 0.2}, 0.9);
        REQUIRE(tied[0] == 1.0);
        REQUIRE(tied[1] == 1.0);
    }
    SECTION("range and monotonicity in T_dist for non-max entries") {
        Rng rng(11);
        for (int trial = 0; trial < 200; ++trial) {
            Vec m = random_probs(rng, 4, true);
            double t1 = 0.1 + rng.uniform() * 2.0;
            double t2 = t1 + rng.uniform() * 2.0;
            Vec u1 = blend_weights(m, t1);
            Vec u2 = blend_weights(m, t2);
            double mx = max_entry(m);
            for (std::size_t k = 0; k < 4; ++k) {
                REQUIRE(u1[k] >= 0.0);
                REQUIRE(u1[k] <= 1.0);
                if (m[k] < mx) REQUIRE(u2[k] >= u1[k] - 1e-12);
            }
        }
    }
    SECTION("contract violations") {
        REQUIRE_THROWS_AS(blend_weights({0.5, 0.3, 0.2}, 0.0), ConfigError);
        REQUIRE_THROWS_AS(blend_weights({0.5, 0.3}, 1.0), ContractError);
    }
}

TEST_CASE("blend") {
    Vec p{0.7, 0.2, 0.1};
    Vec q{0.2, 0.5, 0.3};

    SECTION("upsilon 0 keeps the linear pseudo-label, 1 takes the semantic one") {
        REQUIRE(blend(p, q, {0.0, 0.0, 0.0}) == p);
        REQUIRE(blend(p, q, {1.0, 1.0, 1.0}) == q);
    }
    SECTION("hand-computed convex mixture at upsilon_{k'} = 0.5") {
        Vec out = blend(p, q, {0.5, 0.9, 0.1});  // k' = 0
        REQUIRE_THAT(out[0], Catch::Matchers::WithinAbs(0.45, 1e-15));
        REQUIRE_THAT(out[1], Catch::Matchers::WithinAbs(0.35, 1e-15));
        REQUIRE_THAT(out[2], Catch::Matchers::WithinAbs(0.20, 1e-15));
    }
    SECTION("argmax ties break to the lowest index") {
        Vec tied{0.4, 0.4, 0.2};
        Vec out = blend(tied, q, {1.0, 0.0, 0.0});  // k' must be 0 -> full replacement
        REQUIRE(out == q);
    }
    SECTION("p == q is a fixed point for any upsilon") {
        Rng rng(12);
        for (int trial = 0; trial < 50; ++trial) {
            Vec pp = random_probs(rng, 5);
            Vec u(5);
            for (double& v : u) v = rng.uniform();
            Vec out = blend(pp, pp, u);
            for (std::size_t k = 0; k < 5; ++k) REQUIRE_THAT(out[k], Catch::Matchers::WithinAbs(pp[k], 1e-15));
        }
    }
    SECTION("output is always a probability vector") {
        Rng rng(13);
        for (int trial = 0; trial < 500; ++trial) {
            Vec pp = random_probs(rng, 6);
            Vec qq = random_probs(rng, 6);
            Vec u = blend_weights(random_probs(rng, 6, true), 0.2 + rng.uniform() * 2.0);
            Vec out = blend(pp, qq, u);
            double sum = 0.0;
            for (double v : out) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
                sum += v;
            }
            REQUIRE(std::abs(sum - 1.0) <= 1e-12);
        }
    }
    SECTION("a fully over-predicted class is fully replaced") {
        // k' = argmax p = argmax m_hat -> upsilon_{k'} = 1 -> p' = q
        Rng rng(14);
        for (int trial = 0; trial < 100; ++trial) {
            Vec pp = random_probs(rng, 4);
            Vec qq = random_probs(rng, 4);
            Vec m = random_probs(rng, 4);
            std::size_t kp = argmax(pp);
            std::size_t km = argmax(m);
            if (kp != km) {
                std::swap(m[kp], m[km]);
            }
            Vec out = blend(pp, qq, blend_weights(m, 0.5));
            for (std::size_t k = 0; k < 4; ++k) REQUIRE_THAT(out[k], Catch::Matchers::WithinAbs(qq[k], 1e-15));
        }
    }
    SECTION("contract violations") {
        REQUIRE_THROWS_AS(blend({0.5, 0.4}, {0.5, 0.5}, {0.0, 0.0}), ContractError);
        REQUIRE_THROWS_AS(blend({0.5, 0.5}, {0.5, 0.5}, {1.5, 0.0}), ContractError);
    }
}

TEST_CASE("full blending pipeline matches the straight-line reference on 1000 random tuples") {
    Rng rng(2024);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t k = 2 + rng.uniform_index(9);
        Vec p = random_probs(rng, k);
        Vec q = random_probs(rng, k);
        Vec m = random_probs(rng, k, /*allow_zeros=*/true);
        double t_dist = 0.1 + rng.uniform() * 2.9;
        Vec mine = blend(p, q, blend_weights(m, t_dist));
        Vec ref = blend_reference(p, q, m, t_dist);
        for (std::size_t i = 0; i < k; ++i) REQUIRE_THAT(mine[i], Catch::Matchers::WithinAbs(ref[i], 1e-12));
    }
}
