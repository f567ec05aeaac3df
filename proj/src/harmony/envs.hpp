#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "harmony/data.hpp"
#include "harmony/model.hpp"
#include "harmony/params.hpp"

namespace harmony {

class Rng;

// Point-mass control tasks. State is (x, y, vx, vy); the action sets the
// velocity directly.
enum class TaskKind { Dir, Vel };
enum class Regime { NearOptimal, SubOptimal };

const char* to_string(TaskKind k);
const char* to_string(Regime r);
TaskKind task_kind_from_string(const std::string& s);
Regime regime_from_string(const std::string& s);

inline constexpr double kDt = 0.1;
inline constexpr int kPointStateDim = 4;
inline constexpr int kPointActionDim = 2;

struct PointTaskSpec {
    TaskId task_id = 0;
    TaskKind kind = TaskKind::Dir;
    double angle = 0.0;         // radians, kind = Dir
    double target_speed = 0.0;  // kind = Vel
    int horizon = 50;
    double action_bound = 1.0;
    double gamma = 1.0;

    void validate() const;
    friend bool operator==(const PointTaskSpec&, const PointTaskSpec&) = default;
};

using PointState = std::array<double, kPointStateDim>;

struct EnvStep {
    PointState next;
    double reward = 0.0;
};

EnvStep env_step(const PointTaskSpec& spec, const PointState& state, std::span<const double> action);

// Position uniform in [-1, 1]^2, velocity uniform in the action box.
PointState initial_state(const PointTaskSpec& spec, Rng& rng);

std::array<double, kPointActionDim> expert_action(const PointTaskSpec& spec, const PointState& state);

// Return of the noise-free scripted expert and of the all-zero policy.
double expert_return(const PointTaskSpec& spec);
double zero_policy_return(const PointTaskSpec& spec);

// Episode return needed for success: 80% of the way from the zero policy to
// the expert (for direction tasks, 0.8 x expert return).
double success_threshold(const PointTaskSpec& spec);

TaskDataset gen_dataset(const PointTaskSpec& spec, int n_traj, Regime regime, uint64_t seed,
                        double prompt_fraction = 0.1);

struct EvalReport {
    TaskId task_id = 0;
    int episodes = 0;
    double mean_return = 0.0;
    double success_rate = 0.0;
    std::vector<double> per_episode_returns;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

using Policy = std::function<std::vector<double>(std::span<const Step> prompt, std::span<const Step> history)>;

struct RolloutOptions {
    int context_k = 20;
    int prompt_k = 5;
    int episodes = 20;
    uint64_t seed = 0;
};

// Return-conditioned evaluation loop shared by model and scripted policies.
EvalReport rollout_policy(const Policy& policy, const PointTaskSpec& spec, const TaskDataset& prompt_source,
                          double target_return, const RolloutOptions& opts);

// Evaluates the masked model (mask applied once) on one task.
EvalReport rollout(std::span<const double> theta, const ModelConfig& cfg, const TaskMask& mask,
                   const PointTaskSpec& spec, const TaskDataset& prompt_source, double target_return, int episodes,
                   uint64_t seed);

}  // namespace harmony
