#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "harmony/error.hpp"
#include "harmony/model.hpp"
#include "harmony/rng.hpp"
#include "support.hpp"

using namespace harmony;
using namespace harmony::testing;

TEST_CASE("layout is contiguous and sized by config") {
    const auto cfg = tiny_config();
    const auto l = build_layout(cfg);
    l.validate();
    CHECK(l.segment("head.weight").shape == std::vector<std::size_t>{2, 8});
    CHECK(l.segment("embed.timestep").kind == SegmentKind::Embedding);
    CHECK(l.total() == l.segments().back().offset + l.segments().back().size());
}

TEST_CASE("config validation") {
    auto cfg = tiny_config();
    cfg.embed_dim = 9;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = tiny_config();
    cfg.dropout = 1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("zero parameters give zero actions") {
    const auto cfg = tiny_config();
    Rng rng(1);
    const auto tb = random_batch(cfg, 3, rng);
    const std::vector<double> theta(build_layout(cfg).total(), 0.0);
    for (double a : forward(theta, cfg, tb)) CHECK(a == 0.0);
}

TEST_CASE("forward matches the scalar oracle") {
    SUBCASE("single step, one head, two-dim embedding") {
        ModelConfig cfg;
        cfg.n_layers = 1;
        cfg.n_heads = 1;
        cfg.embed_dim = 2;
        cfg.context_k = 1;
        cfg.prompt_k = 0;
        cfg.state_dim = 2;
        cfg.action_dim = 1;
        cfg.max_timestep = 4;
        cfg.dropout = 0.0;
        Rng rng(11);
        const auto theta = random_theta(cfg, rng, 0.8);
        const auto tb = random_batch(cfg, 1, rng);
        const auto got = forward(theta, cfg, tb);
        const auto want = ScalarForward(theta, cfg).run(tb, 0);
        REQUIRE(got.size() == 1);
        CHECK(got[0] == doctest::Approx(want[0][0]).epsilon(1e-12));
    }
    SUBCASE("prompt, padding and several heads") {
        auto cfg = tiny_config();
        cfg.n_layers = 2;
        Rng rng(5);
        const auto theta = random_theta(cfg, rng);
        const auto tb = random_batch(cfg, 3, rng, /*pad=*/2);
        const auto got = forward(theta, cfg, tb);
        ScalarForward oracle(theta, cfg);
        for (int b = 0; b < 3; ++b) {
            const auto want = oracle.run(tb, b);
            for (int j = 0; j < cfg.context_k; ++j)
                for (int a = 0; a < cfg.action_dim; ++a)
                    CHECK(got[(b * cfg.context_k + j) * cfg.action_dim + a] ==
                          doctest::Approx(want[j][a]).epsilon(1e-10));
        }
    }
}

TEST_CASE("batch rows are independent") {
    const auto cfg = tiny_config();
    Rng rng(3);
    const auto theta = random_theta(cfg, rng);
    const auto tb = random_batch(cfg, 3, rng);
    TokenBatch swapped = tb;
    // Reverse the batch order.
    const int L = tb.steps();
    for (int b = 0; b < 3; ++b) {
        const int src = 2 - b;
        std::copy_n(tb.rtg.begin() + src * L, L, swapped.rtg.begin() + b * L);
        std::copy_n(tb.timesteps.begin() + src * L, L, swapped.timesteps.begin() + b * L);
        std::copy_n(tb.valid.begin() + src * L, L, swapped.valid.begin() + b * L);
        std::copy_n(tb.states.begin() + src * L * 3, L * 3, swapped.states.begin() + b * L * 3);
        std::copy_n(tb.actions.begin() + src * L * 2, L * 2, swapped.actions.begin() + b * L * 2);
    }
    const auto a = forward(theta, cfg, tb);
    const auto c = forward(theta, cfg, swapped);
    const int row = cfg.context_k * cfg.action_dim;
    for (int b = 0; b < 3; ++b)
        for (int i = 0; i < row; ++i) CHECK(c[b * row + i] == a[(2 - b) * row + i]);
}

TEST_CASE("causality: future tokens do not affect earlier predictions") {
    const auto cfg = tiny_config();
    Rng rng(8);
    const auto theta = random_theta(cfg, rng);
    const auto tb = random_batch(cfg, 1, rng);
    const auto base = forward(theta, cfg, tb);
    // Perturb everything after the state token of history step 1.
    TokenBatch cut = tb;
    const int s1 = cfg.prompt_k + 1;
    for (int a = 0; a < cfg.action_dim; ++a) cut.actions[s1 * cfg.action_dim + a] = 0.0;
    for (int s = s1 + 1; s < tb.steps(); ++s) {
        cut.rtg[s] = 0.0;
        for (int i = 0; i < cfg.state_dim; ++i) cut.states[s * cfg.state_dim + i] = 0.0;
        for (int a = 0; a < cfg.action_dim; ++a) cut.actions[s * cfg.action_dim + a] = 0.0;
    }
    const auto after = forward(theta, cfg, cut);
    for (int j = 0; j <= 1; ++j)
        for (int a = 0; a < cfg.action_dim; ++a) CHECK(after[j * cfg.action_dim + a] == base[j * cfg.action_dim + a]);
}

TEST_CASE("loss values") {
    auto cfg = tiny_config();
    Rng rng(4);
    SUBCASE("constant zero prediction against unit targets") {
        auto tb = random_batch(cfg, 2, rng);
        std::fill(tb.target_actions.begin(), tb.target_actions.end(), 1.0);
        const std::vector<double> theta(build_layout(cfg).total(), 0.0);
        CHECK(loss(theta, cfg, tb) == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("targets equal to predictions") {
        const auto theta = random_theta(cfg, rng);
        auto tb = random_batch(cfg, 2, rng);
        tb.target_actions = forward(theta, cfg, tb);
        CHECK(loss(theta, cfg, tb) == 0.0);
        const auto lg = loss_and_grad(theta, cfg, tb);
        CHECK(lg.loss == 0.0);
        CHECK(std::all_of(lg.grad.begin(), lg.grad.end(), [](double g) { return g == 0.0; }));
    }
    SUBCASE("explicit summation over valid positions") {
        const auto theta = random_theta(cfg, rng);
        const auto tb = random_batch(cfg, 3, rng, /*pad=*/1);
        ScalarForward oracle(theta, cfg);
        double sum = 0.0;
        int count = 0;
        for (int b = 0; b < 3; ++b) {
            const auto pred = oracle.run(tb, b);
            for (int j = 0; j < cfg.context_k; ++j) {
                if (!tb.valid[b * tb.steps() + cfg.prompt_k + j]) continue;
                ++count;
                for (int a = 0; a < cfg.action_dim; ++a) {
                    const double e = pred[j][a] - tb.target_actions[(b * cfg.context_k + j) * cfg.action_dim + a];
                    sum += e * e;
                }
            }
        }
        CHECK(count == 8);
        CHECK(loss(theta, cfg, tb) == doctest::Approx(sum / (count * cfg.action_dim)).epsilon(1e-12));
    }
    SUBCASE("no valid history is an error") {
        auto tb = TokenBatch::zeros(1, cfg.prompt_k, cfg.context_k, cfg.state_dim, cfg.action_dim);
        const std::vector<double> theta(build_layout(cfg).total(), 0.0);
        CHECK_THROWS_AS(loss(theta, cfg, tb), Error);
    }
}

TEST_CASE("analytic gradient agrees with central differences") {
    auto cfg = tiny_config();
    cfg.n_layers = 2;
    Rng rng(21);
    const auto theta = random_theta(cfg, rng);
    const auto tb = random_batch(cfg, 2, rng, /*pad=*/1);
    const auto lg = loss_and_grad(theta, cfg, tb);
    REQUIRE(lg.grad.size() == theta.size());
    auto f = [&](const std::vector<double>& t) { return loss(t, cfg, tb); };
    double worst = 0.0;
    for (std::size_t i = 0; i < theta.size(); i += 7) {
        const double fd = central_difference(f, theta, i);
        const double denom = std::max({std::abs(fd), std::abs(lg.grad[i]), 1e-6});
        worst = std::max(worst, std::abs(fd - lg.grad[i]) / denom);
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("head bias gradient is odd in the targets at zero parameters") {
    const auto cfg = tiny_config();
    Rng rng(2);
    auto tb = random_batch(cfg, 2, rng);
    const std::vector<double> theta(build_layout(cfg).total(), 0.0);
    const auto g1 = loss_and_grad(theta, cfg, tb).grad;
    for (double& t : tb.target_actions) t = -t;
    const auto g2 = loss_and_grad(theta, cfg, tb).grad;
    const auto layout = build_layout(cfg);
    const auto& seg = layout.segment("head.bias");
    for (std::size_t k = 0; k < seg.size(); ++k) {
        CHECK(g1[seg.offset + k] != 0.0);
        CHECK(g2[seg.offset + k] == -g1[seg.offset + k]);
    }
}

TEST_CASE("dropout is deterministic for a given generator and absent without one") {
    auto cfg = tiny_config();
    cfg.dropout = 0.5;
    Rng rng(6);
    const auto theta = random_theta(cfg, rng);
    const auto tb = random_batch(cfg, 2, rng);
    Rng d1(99), d2(99);
    CHECK(forward(theta, cfg, tb, &d1) == forward(theta, cfg, tb, &d2));
    Rng d3(100);
    CHECK(forward(theta, cfg, tb, &d3) != forward(theta, cfg, tb));
    auto off = cfg;
    off.dropout = 0.0;
    CHECK(forward(theta, cfg, tb) == forward(theta, off, tb));
}

TEST_CASE("dropout gradients match differences under a frozen dropout pattern") {
    auto cfg = tiny_config();
    cfg.dropout = 0.3;
    Rng rng(13);
    const auto theta = random_theta(cfg, rng);
    const auto tb = random_batch(cfg, 2, rng);
    Rng d(5);
    const auto lg = loss_and_grad(theta, cfg, tb, &d);
    auto f = [&](const std::vector<double>& t) {
        Rng same(5);
        const auto pred = forward(t, cfg, tb, &same);
        double s = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - tb.target_actions[i]) * (pred[i] - tb.target_actions[i]);
        return s / static_cast<double>(pred.size());
    };
    for (std::size_t i = 0; i < theta.size(); i += 37) {
        const double fd = central_difference(f, theta, i);
        CHECK(lg.grad[i] == doctest::Approx(fd).epsilon(1e-5).scale(1e-6));
    }
}

TEST_CASE("predict_next_action") {
    const auto cfg = tiny_config();  // K = 3
    Rng rng(17);
    const auto theta = random_theta(cfg, rng);
    auto make_step = [&](int t) {
        Step s;
        s.rtg = rng.uniform(0, 10);
        s.state = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
        s.action = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
        s.timestep = t;
        return s;
    };
    std::vector<Step> prompt{make_step(0), make_step(1)};
    std::vector<Step> history{make_step(0), make_step(1), make_step(2), make_step(3)};

    SUBCASE("equals the last row of forward on the truncated window") {
        TokenBatch tb = TokenBatch::zeros(1, 2, 3, 3, 2);
        tb.set_step(0, 0, prompt[0]);
        tb.set_step(0, 1, prompt[1]);
        for (int j = 0; j < 3; ++j) tb.set_step(0, 2 + j, history[1 + j]);
        const auto full = forward(theta, cfg, tb);
        const auto a = predict_next_action(theta, cfg, prompt, history);
        CHECK(a[0] == full[4]);
        CHECK(a[1] == full[5]);
    }
    SUBCASE("short history is left padded") {
        const std::vector<Step> short_hist{history[0]};
        TokenBatch tb = TokenBatch::zeros(1, 2, 3, 3, 2);
        tb.set_step(0, 0, prompt[0]);
        tb.set_step(0, 1, prompt[1]);
        tb.set_step(0, 4, history[0]);
        const auto full = forward(theta, cfg, tb);
        const auto a = predict_next_action(theta, cfg, prompt, short_hist);
        CHECK(a[0] == full[4]);
    }
    SUBCASE("zero parameters and empty history") {
        const std::vector<double> zero(theta.size(), 0.0);
        const auto a = predict_next_action(zero, cfg, prompt, history);
        CHECK(a == std::vector<double>{0.0, 0.0});
        CHECK_THROWS_AS(predict_next_action(theta, cfg, prompt, std::vector<Step>{}), Error);
    }
}

TEST_CASE("non-finite input is reported with its location") {
    const auto cfg = tiny_config();
    Rng rng(1);
    const auto theta = random_theta(cfg, rng);
    auto tb = random_batch(cfg, 1, rng);
    tb.states[cfg.prompt_k * cfg.state_dim] = std::nan("");
    try {
        forward(theta, cfg, tb);
        FAIL("expected numeric error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Numeric);
        CHECK(std::string(e.what()).find("block0") != std::string::npos);
    }
}

TEST_CASE("init_params follows the initialization convention") {
    const auto cfg = tiny_config();
    const auto p = init_params(cfg, 42);
    for (double g : p.segment("block0.ln1.gamma")) CHECK(g == 1.0);
    for (double b : p.segment("head.bias")) CHECK(b == 0.0);
    for (double w : p.segment("block0.mlp.fc.weight")) CHECK(std::abs(w) <= 0.04);
    CHECK(init_params(cfg, 42).values == p.values);
}
