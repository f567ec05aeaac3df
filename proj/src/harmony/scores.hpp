#pragma once

#include <map>
#include <span>
#include <vector>

#include "harmony/model.hpp"
#include "harmony/params.hpp"

namespace harmony {

inline constexpr double kLogLossGuard = 1e-12;
inline constexpr double kHarmonyGuard = 1e-12;

// Gradients of one weights-evaluation round.
struct GradientBundle {
    std::map<TaskId, std::vector<double>> per_task_masked;  // grad L(theta * M) * M
    std::map<TaskId, std::vector<double>> per_task_raw;     // grad L(theta)
    std::map<TaskId, double> masked_losses;                 // L(theta * M)
    std::vector<double> average;                            // mean of the masked gradients
};

struct MaskedGradient {
    double loss = 0.0;
    std::vector<double> grad;
};

// Loss and gradient at theta * mask, with the gradient masked again.
MaskedGradient masked_gradient(std::span<const double> theta, const ModelConfig& cfg, const TaskMask& mask,
                               const TokenBatch& batch, Rng* dropout_rng = nullptr);

// Element-wise mean in the order given.
std::vector<double> average_gradient(const std::vector<const std::vector<double>*>& grads);

std::vector<double> agreement_score(std::span<const double> masked_grad, std::span<const double> avg_grad);

std::vector<double> importance_magnitude(std::span<const double> theta, const TaskMask& mask);

// ((grad / loss) * mask)^2; throws Numeric when loss <= kLogLossGuard.
std::vector<double> importance_fisher(std::span<const double> grad, double loss, const TaskMask& mask);

// A + lambda * I on active coordinates, +inf on inactive ones.
std::vector<double> harmony_score(std::span<const double> agreement, std::span<const double> importance,
                                  double lambda, const TaskMask& mask);

// Mean over tasks and coordinates of the sign agreement between each task
// gradient and the mean gradient; coordinates with a zero factor contribute 0.
double avg_harmony_metric(const std::vector<std::vector<double>>& grads, double epsilon = kHarmonyGuard);

}  // namespace harmony
