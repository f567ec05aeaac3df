#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "harmony/params.hpp"

namespace harmony {

class Rng;

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int embed_dim = 32;
    int context_k = 20;  // history steps K
    int prompt_k = 5;    // prompt steps K*
    int state_dim = 4;
    int action_dim = 2;
    int max_timestep = 64;
    double dropout = 0.1;
    double rtg_scale = 1.0;     // multiplies return-to-go before embedding
    double action_scale = 1.0;  // tanh output is scaled to [-action_scale, action_scale]

    void validate() const;
    int steps() const { return prompt_k + context_k; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One (return-to-go, state, action) step of a trajectory.
struct Step {
    double rtg = 0.0;
    std::vector<double> state;
    std::vector<double> action;
    int timestep = 0;
};

// Model input: K* prompt steps followed by K history steps per row, each step
// expanding to three tokens (rtg, state, action).
struct TokenBatch {
    int batch = 0;
    int prompt = 0;
    int history = 0;
    int state_dim = 0;
    int action_dim = 0;
    std::vector<double> rtg;             // [B, L]
    std::vector<double> states;          // [B, L, state_dim]
    std::vector<double> actions;         // [B, L, action_dim]
    std::vector<int> timesteps;          // [B, L]
    std::vector<uint8_t> valid;          // [B, L]
    std::vector<double> target_actions;  // [B, K, action_dim]

    int steps() const { return prompt + history; }
    static TokenBatch zeros(int batch, int prompt, int history, int state_dim, int action_dim);
    void set_step(int b, int s, const Step& step);
    void check(const ModelConfig& cfg) const;

    friend bool operator==(const TokenBatch&, const TokenBatch&) = default;
};

LayerLayout build_layout(const ModelConfig& cfg);

// Truncated-normal(0.02) matrices and embeddings, unit layer-norm gains, zero biases.
ParamVector init_params(const ModelConfig& cfg, uint64_t seed);

// Predicted actions at every history state token, [B, K, action_dim].
// Dropout is active only when a generator is supplied and cfg.dropout > 0.
std::vector<double> forward(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch,
                            Rng* dropout_rng = nullptr);

// Mean squared action error over valid history positions and action dims.
double loss(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch);

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

LossGrad loss_and_grad(std::span<const double> theta, const ModelConfig& cfg, const TokenBatch& batch,
                       Rng* dropout_rng = nullptr);

// Action for the last history step; history is truncated to the last K steps.
std::vector<double> predict_next_action(std::span<const double> theta, const ModelConfig& cfg,
                                        std::span<const Step> prompt, std::span<const Step> history);

}  // namespace harmony
