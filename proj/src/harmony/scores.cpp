#include "harmony/scores.hpp"

#include <cmath>
#include <limits>

#include "harmony/error.hpp"

namespace harmony {

MaskedGradient masked_gradient(std::span<const double> theta, const ModelConfig& cfg, const TaskMask& mask,
                               const TokenBatch& batch, Rng* dropout_rng) {
    const auto masked_theta = apply_mask(theta, mask);
    auto lg = loss_and_grad(masked_theta, cfg, batch, dropout_rng);
    for (std::size_t i = 0; i < lg.grad.size(); ++i)
        if (!mask.bits[i]) lg.grad[i] = 0.0;
    return {lg.loss, std::move(lg.grad)};
}

std::vector<double> average_gradient(const std::vector<const std::vector<double>*>& grads) {
    require(!grads.empty(), ErrorKind::Precondition, "average_gradient: no gradients");
    const std::size_t n = grads.front()->size();
    std::vector<double> avg(n, 0.0);
    for (const auto* g : grads) {
        require(g->size() == n, ErrorKind::Dimension, "average_gradient: length mismatch");
        for (std::size_t j = 0; j < n; ++j) avg[j] += (*g)[j];
    }
    const double inv = 1.0 / static_cast<double>(grads.size());
    for (double& v : avg) v *= inv;
    return avg;
}

std::vector<double> agreement_score(std::span<const double> masked_grad, std::span<const double> avg_grad) {
    require(masked_grad.size() == avg_grad.size(), ErrorKind::Dimension, "agreement_score: length mismatch");
    std::vector<double> a(masked_grad.size());
    for (std::size_t j = 0; j < a.size(); ++j) a[j] = masked_grad[j] * avg_grad[j];
    return a;
}

std::vector<double> importance_magnitude(std::span<const double> theta, const TaskMask& mask) {
    require(theta.size() == mask.size(), ErrorKind::Dimension, "importance_magnitude: length mismatch");
    std::vector<double> out(theta.size());
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = mask.bits[j] ? std::abs(theta[j]) : 0.0;
    return out;
}

std::vector<double> importance_fisher(std::span<const double> grad, double loss, const TaskMask& mask) {
    require(grad.size() == mask.size(), ErrorKind::Dimension, "importance_fisher: length mismatch");
    if (!(loss > kLogLossGuard)) fail(ErrorKind::Numeric, "importance_fisher: loss too small for log-gradient");
    std::vector<double> out(grad.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        const double v = mask.bits[j] ? grad[j] / loss : 0.0;
        out[j] = v * v;
    }
    return out;
}

std::vector<double> harmony_score(std::span<const double> agreement, std::span<const double> importance,
                                  double lambda, const TaskMask& mask) {
    require(lambda >= 0.0, ErrorKind::Config, "harmony_score: lambda must be >= 0");
    require(agreement.size() == mask.size() && importance.size() == mask.size(), ErrorKind::Dimension,
            "harmony_score: length mismatch");
    std::vector<double> h(mask.size());
    for (std::size_t j = 0; j < h.size(); ++j)
        h[j] = mask.bits[j] ? agreement[j] + lambda * importance[j] : std::numeric_limits<double>::infinity();
    return h;
}

double avg_harmony_metric(const std::vector<std::vector<double>>& grads, double epsilon) {
    require(!grads.empty(), ErrorKind::Precondition, "avg_harmony_metric: no gradients");
    require(epsilon > 0.0, ErrorKind::Precondition, "avg_harmony_metric: epsilon must be > 0");
    std::vector<const std::vector<double>*> ptrs;
    for (const auto& g : grads) ptrs.push_back(&g);
    const auto avg = average_gradient(ptrs);
    const std::size_t k = avg.size();
    if (k == 0) return 0.0;
    double sum = 0.0;
    for (const auto& g : grads)
        for (std::size_t j = 0; j < k; ++j) {
            const double num = g[j] * avg[j];
            if (num == 0.0) continue;
            sum += num / std::max(std::abs(g[j]) * std::abs(avg[j]), epsilon);
        }
    return sum / (static_cast<double>(grads.size()) * static_cast<double>(k));
}

}  // namespace harmony
