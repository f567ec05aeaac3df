#include "harmony/envs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "harmony/error.hpp"
#include "harmony/rng.hpp"

namespace harmony {

const char* to_string(TaskKind k) { return k == TaskKind::Dir ? "dir" : "vel"; }
const char* to_string(Regime r) { return r == Regime::NearOptimal ? "near_optimal" : "sub_optimal"; }

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "dir") return TaskKind::Dir;
    if (s == "vel") return TaskKind::Vel;
    fail(ErrorKind::Config, "unknown task kind '" + s + "' (expected dir or vel)");
}

Regime regime_from_string(const std::string& s) {
    if (s == "near_optimal") return Regime::NearOptimal;
    if (s == "sub_optimal") return Regime::SubOptimal;
    fail(ErrorKind::Config, "unknown regime '" + s + "' (expected near_optimal or sub_optimal)");
}

void PointTaskSpec::validate() const {
    require(horizon >= 1, ErrorKind::Config, "task horizon must be >= 1");
    require(action_bound > 0.0 && std::isfinite(action_bound), ErrorKind::Config, "task action_bound must be > 0");
    require(target_speed >= 0.0 && target_speed <= action_bound, ErrorKind::Config,
            "task target_speed must lie in [0, action_bound]");
    require(std::isfinite(angle), ErrorKind::Config, "task angle must be finite");
    require(gamma >= 0.0 && gamma <= 1.0, ErrorKind::Config, "task gamma must lie in [0, 1]");
}

EnvStep env_step(const PointTaskSpec& spec, const PointState& state, std::span<const double> action) {
    require(action.size() == kPointActionDim, ErrorKind::Dimension, "env_step: action must have 2 components");
    for (double s : state) require(std::isfinite(s), ErrorKind::Numeric, "env_step: non-finite state");
    for (double a : action) require(std::isfinite(a), ErrorKind::Numeric, "env_step: non-finite action");
    const double vx = std::clamp(action[0], -spec.action_bound, spec.action_bound);
    const double vy = std::clamp(action[1], -spec.action_bound, spec.action_bound);
    EnvStep out;
    out.next = {state[0] + vx * kDt, state[1] + vy * kDt, vx, vy};
    if (spec.kind == TaskKind::Dir)
        out.reward = vx * std::cos(spec.angle) + vy * std::sin(spec.angle);
    else
        out.reward = -std::abs(std::hypot(vx, vy) - spec.target_speed);
    return out;
}

PointState initial_state(const PointTaskSpec& spec, Rng& rng) {
    PointState s;
    s[0] = rng.uniform(-1.0, 1.0);
    s[1] = rng.uniform(-1.0, 1.0);
    s[2] = rng.uniform(-spec.action_bound, spec.action_bound);
    s[3] = rng.uniform(-spec.action_bound, spec.action_bound);
    return s;
}

std::array<double, kPointActionDim> expert_action(const PointTaskSpec& spec, const PointState&) {
    if (spec.kind == TaskKind::Dir)
        return {spec.action_bound * std::cos(spec.angle), spec.action_bound * std::sin(spec.angle)};
    return {spec.target_speed, 0.0};
}

namespace {

template <class ActionFn>
double episode_return(const PointTaskSpec& spec, PointState s, ActionFn&& act) {
    double ret = 0.0;
    for (int t = 0; t < spec.horizon; ++t) {
        const auto a = act(s);
        const auto st = env_step(spec, s, a);
        ret += st.reward;
        s = st.next;
    }
    return ret;
}

}  // namespace

double expert_return(const PointTaskSpec& spec) {
    spec.validate();
    // Rewards do not depend on the start state, so one episode is exact.
    return episode_return(spec, PointState{}, [&](const PointState& s) { return expert_action(spec, s); });
}

double zero_policy_return(const PointTaskSpec& spec) {
    spec.validate();
    return episode_return(spec, PointState{}, [](const PointState&) { return std::array<double, 2>{0.0, 0.0}; });
}

double success_threshold(const PointTaskSpec& spec) {
    const double lo = zero_policy_return(spec);
    return lo + 0.8 * (expert_return(spec) - lo);
}

TaskDataset gen_dataset(const PointTaskSpec& spec, int n_traj, Regime regime, uint64_t seed, double prompt_fraction) {
    spec.validate();
    require(n_traj >= 1, ErrorKind::Precondition, "gen_dataset: n_traj must be >= 1");
    const double bound = spec.action_bound;
    const int n_first = n_traj / 2;  // expert (near-optimal) or random (sub-optimal) half
    const int n_mixed = n_traj - n_first;

    auto run = [&](Rng& rng, auto&& choose) {
        Trajectory tr;
        tr.task_id = spec.task_id;
        tr.state_dim = kPointStateDim;
        tr.action_dim = kPointActionDim;
        PointState s = initial_state(spec, rng);
        for (int t = 0; t < spec.horizon; ++t) {
            auto a = choose(s, rng);
            for (double& x : a) x = std::clamp(x, -bound, bound);
            const auto st = env_step(spec, s, a);
            tr.states.insert(tr.states.end(), s.begin(), s.end());
            tr.actions.insert(tr.actions.end(), a.begin(), a.end());
            tr.rewards.push_back(st.reward);
            s = st.next;
        }
        return tr;
    };

    std::vector<Trajectory> trajs;
    trajs.reserve(n_traj);
    Rng first_rng(derive_seed(seed, regime == Regime::NearOptimal ? "expert" : "random"));
    for (int k = 0; k < n_first; ++k) {
        if (regime == Regime::NearOptimal) {
            trajs.push_back(run(first_rng, [&](const PointState& s, Rng& r) {
                auto a = expert_action(spec, s);
                for (double& x : a) x += 0.05 * bound * r.normal();
                return a;
            }));
        } else {
            trajs.push_back(run(first_rng, [&](const PointState&, Rng& r) {
                return std::array<double, 2>{r.uniform(-bound, bound), r.uniform(-bound, bound)};
            }));
        }
    }
    // Noise decays from 0.5 to 0.05 of the bound across the mixed half.
    Rng mixed_rng(derive_seed(seed, "mixed"));
    for (int k = 0; k < n_mixed; ++k) {
        const double frac = n_mixed > 1 ? static_cast<double>(k) / (n_mixed - 1) : 1.0;
        const double sigma = (0.5 + (0.05 - 0.5) * frac) * bound;
        trajs.push_back(run(mixed_rng, [&](const PointState& s, Rng& r) {
            auto a = expert_action(spec, s);
            for (double& x : a) x += sigma * r.normal();
            return a;
        }));
    }
    return TaskDataset(spec.task_id, std::move(trajs), spec.gamma, prompt_fraction);
}

EvalReport rollout_policy(const Policy& policy, const PointTaskSpec& spec, const TaskDataset& prompt_source,
                          double target_return, const RolloutOptions& opts) {
    spec.validate();
    require(std::isfinite(target_return), ErrorKind::Precondition, "rollout: target return must be finite");
    require(opts.episodes >= 0, ErrorKind::Precondition, "rollout: episodes must be >= 0");
    EvalReport rep;
    rep.task_id = spec.task_id;
    rep.episodes = opts.episodes;
    if (opts.episodes == 0) return rep;

    const double threshold = success_threshold(spec);
    int successes = 0;
    for (int ep = 0; ep < opts.episodes; ++ep) {
        Rng rng(derive_seed(opts.seed, "rollout", static_cast<uint64_t>(ep)));
        PointState s = initial_state(spec, rng);
        const auto prompt = sample_prompt(prompt_source, opts.prompt_k, rng);
        std::vector<Step> history;
        double rtg = target_return;
        double ret = 0.0;
        for (int t = 0; t < spec.horizon; ++t) {
            history.push_back(Step{rtg, std::vector<double>(s.begin(), s.end()), std::vector<double>(kPointActionDim, 0.0), t});
            if (history.size() > static_cast<std::size_t>(opts.context_k)) history.erase(history.begin());
            const auto a = policy(prompt, history);
            history.back().action = a;
            const auto st = env_step(spec, s, a);
            ret += st.reward;
            rtg -= st.reward;
            s = st.next;
        }
        rep.per_episode_returns.push_back(ret);
        successes += ret >= threshold ? 1 : 0;
    }
    rep.mean_return = std::accumulate(rep.per_episode_returns.begin(), rep.per_episode_returns.end(), 0.0) / opts.episodes;
    rep.success_rate = static_cast<double>(successes) / opts.episodes;
    return rep;
}

EvalReport rollout(std::span<const double> theta, const ModelConfig& cfg, const TaskMask& mask,
                   const PointTaskSpec& spec, const TaskDataset& prompt_source, double target_return, int episodes,
                   uint64_t seed) {
    require(cfg.state_dim == kPointStateDim && cfg.action_dim == kPointActionDim, ErrorKind::Config,
            "rollout: model dims do not match the point-mass tasks");
    const std::vector<double> masked = apply_mask(theta, mask);
    Policy policy = [&](std::span<const Step> prompt, std::span<const Step> history) {
        return predict_next_action(masked, cfg, prompt, history);
    };
    return rollout_policy(policy, spec, prompt_source, target_return,
                          RolloutOptions{cfg.context_k, cfg.prompt_k, episodes, seed});
}

}  // namespace harmony
