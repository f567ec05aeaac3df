#include <cmath>
#include <numbers>

#include "doctest.h"
#include "harmony/envs.hpp"
#include "harmony/error.hpp"
#include "harmony/rng.hpp"
#include "support.hpp"

using namespace harmony;

namespace {

PointTaskSpec dir(double angle, TaskId id = 0) {
    PointTaskSpec s;
    s.task_id = id;
    s.kind = TaskKind::Dir;
    s.angle = angle;
    return s;
}

double mean_return(const TaskDataset& ds) {
    double sum = 0.0;
    for (const auto& t : ds.trajectories()) sum += t.total_return();
    return sum / static_cast<double>(ds.trajectories().size());
}

}  // namespace

TEST_CASE("env rewards") {
    const PointState s0{0, 0, 0, 0};
    CHECK(env_step(dir(0), s0, std::vector<double>{1, 0}).reward == doctest::Approx(1.0));
    CHECK(env_step(dir(0), s0, std::vector<double>{-1, 0}).reward == doctest::Approx(-1.0));
    PointTaskSpec vel;
    vel.kind = TaskKind::Vel;
    vel.target_speed = 0.5;
    CHECK(env_step(vel, s0, std::vector<double>{0.3, 0.4}).reward == doctest::Approx(0.0));
    // Actions are clipped to the bound.
    const auto big = env_step(dir(0), s0, std::vector<double>{5, 0});
    CHECK(big.reward == doctest::Approx(1.0));
    CHECK(big.next[0] == doctest::Approx(kDt));
    // Deterministic.
    const auto again = env_step(dir(0), s0, std::vector<double>{5, 0});
    CHECK(again.next == big.next);
}

TEST_CASE("expert and thresholds") {
    const auto spec = dir(std::numbers::pi / 2);
    CHECK(expert_return(spec) >= 0.9 * spec.horizon);
    CHECK(zero_policy_return(spec) == 0.0);
    CHECK(success_threshold(spec) == doctest::Approx(0.8 * expert_return(spec)));
}

TEST_CASE("gen_dataset determinism and regimes") {
    const auto spec = dir(1.0);
    const auto a = gen_dataset(spec, 20, Regime::NearOptimal, 5);
    const auto b = gen_dataset(spec, 20, Regime::NearOptimal, 5);
    const auto c = gen_dataset(spec, 20, Regime::NearOptimal, 6);
    CHECK(a.trajectories() == b.trajectories());
    CHECK(a.trajectories() != c.trajectories());
    const auto near = gen_dataset(spec, 100, Regime::NearOptimal, 1);
    const auto sub = gen_dataset(spec, 100, Regime::SubOptimal, 1);
    CHECK(mean_return(sub) < mean_return(near));
    CHECK_THROWS_AS(gen_dataset(spec, 0, Regime::NearOptimal, 1), Error);
}

TEST_CASE("rollout of the zero model") {
    const auto cfg = testing::point_config();
    const auto layout = build_layout(cfg);
    const std::vector<double> theta(layout.total(), 0.0);
    const TaskMask mask{0, std::vector<uint8_t>(layout.total(), 1)};
    const auto spec = dir(0.3);
    const auto data = gen_dataset(spec, 10, Regime::NearOptimal, 2);
    const auto rep = rollout(theta, cfg, mask, spec, data, expert_return(spec), 3, 1);
    CHECK(rep.episodes == 3);
    CHECK(rep.success_rate == 0.0);
    CHECK(rep.mean_return == doctest::Approx(0.0).epsilon(1e-12));
    const auto empty = rollout(theta, cfg, mask, spec, data, expert_return(spec), 0, 1);
    CHECK(empty.per_episode_returns.empty());
    CHECK(empty.success_rate == 0.0);
}

TEST_CASE("scripted expert through the rollout loop succeeds") {
    const auto spec = dir(2.0);
    const auto data = gen_dataset(spec, 10, Regime::NearOptimal, 2);
    Policy expert = [&](std::span<const Step>, std::span<const Step> history) {
        PointState s{};
        for (int i = 0; i < kPointStateDim; ++i) s[i] = history.back().state[i];
        const auto a = expert_action(spec, s);
        return std::vector<double>(a.begin(), a.end());
    };
    RolloutOptions opts;
    opts.context_k = 3;
    opts.prompt_k = 2;
    opts.episodes = 5;
    opts.seed = 4;
    const auto rep = rollout_policy(expert, spec, data, expert_return(spec), opts);
    CHECK(rep.success_rate == 1.0);
    CHECK(rollout_policy(expert, spec, data, expert_return(spec), opts) == rep);
}
