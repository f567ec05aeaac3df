#include "harmony/mask_update.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <thread>

#include "harmony/error.hpp"

namespace harmony {

namespace {

template <class Less>
std::vector<uint8_t> select_k(std::span<const double> values, std::size_t k, Less less, const char* who) {
    std::vector<std::size_t> idx;
    idx.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        if (std::isfinite(values[i])) idx.push_back(i);
    require(k <= idx.size(), ErrorKind::Selection,
            std::string(who) + ": k=" + std::to_string(k) + " exceeds " + std::to_string(idx.size()) + " finite entries");
    std::vector<uint8_t> out(values.size(), 0);
    if (k == 0) return out;
    auto cmp = [&](std::size_t a, std::size_t b) {
        if (values[a] != values[b]) return less(values[a], values[b]);
        return a < b;
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), cmp);
    for (std::size_t i = 0; i < k; ++i) out[idx[i]] = 1;
    return out;
}

std::vector<std::size_t> ones_of(const std::vector<uint8_t>& ind) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < ind.size(); ++i)
        if (ind[i]) out.push_back(i);
    return out;
}

}  // namespace

std::vector<uint8_t> arg_btm_k(std::span<const double> values, std::size_t k) {
    return select_k(values, k, std::less<double>(), "arg_btm_k");
}

std::vector<uint8_t> arg_top_k(std::span<const double> values, std::size_t k) {
    return select_k(values, k, std::greater<double>(), "arg_top_k");
}

MaskUpdateResult mask_update(const MaskSet& masks, std::span<const double> theta, const ModelConfig& cfg,
                             const std::map<TaskId, TokenBatch>& batches, const MaskUpdateOptions& opts) {
    require(!masks.masks.empty(), ErrorKind::Precondition, "mask_update: empty mask set");
    const auto ids = masks.task_ids();
    for (TaskId id : ids)
        require(batches.contains(id), ErrorKind::Config, "mask_update: no batch for task " + std::to_string(id));

    std::vector<MaskedGradient> masked(ids.size());
    std::vector<std::vector<double>> raw(ids.size());
    auto work = [&](std::size_t i) {
        const auto& batch = batches.at(ids[i]);
        masked[i] = masked_gradient(theta, cfg, masks.at(ids[i]), batch);
        raw[i] = loss_and_grad(theta, cfg, batch).grad;
    };
    if (opts.threads <= 1 || ids.size() == 1) {
        for (std::size_t i = 0; i < ids.size(); ++i) work(i);
    } else {
        // Each task writes only its own slots; any exception is rethrown after join.
        std::vector<std::exception_ptr> errors(ids.size());
        std::vector<std::thread> pool;
        const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(opts.threads), ids.size());
        for (std::size_t w = 0; w < n_threads; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < ids.size(); i += n_threads) {
                    try {
                        work(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    GradientBundle bundle;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        bundle.masked_losses[ids[i]] = masked[i].loss;
        bundle.per_task_masked[ids[i]] = std::move(masked[i].grad);
        bundle.per_task_raw[ids[i]] = std::move(raw[i]);
    }
    return mask_update_from_gradients(masks, theta, std::move(bundle), opts);
}

MaskUpdateResult mask_update_from_gradients(const MaskSet& masks, std::span<const double> theta,
                                            GradientBundle gradients, const MaskUpdateOptions& opts) {
    require(opts.alpha >= 0, ErrorKind::Config, "mask_update: alpha must be >= 0");
    require(opts.lambda >= 0.0, ErrorKind::Config, "mask_update: lambda must be >= 0");
    const std::size_t n = masks.param_count();
    require(theta.size() == n, ErrorKind::Dimension, "mask_update: theta length does not match masks");

    std::vector<const std::vector<double>*> ptrs;
    for (const auto& [id, g] : gradients.per_task_masked) {
        require(masks.masks.contains(id), ErrorKind::Config, "mask_update: gradient for unknown task");
        ptrs.push_back(&g);
    }
    require(ptrs.size() == masks.masks.size(), ErrorKind::Config, "mask_update: missing task gradients");
    gradients.average = average_gradient(ptrs);
    const auto& avg = gradients.average;

    MaskUpdateResult result;
    result.masks = masks;
    for (auto& [id, mask] : result.masks.masks) {
        MaskUpdateRecord rec;
        rec.task_id = id;
        rec.round = opts.round;
        rec.requested_alpha = opts.alpha;
        rec.ones_before = mask.ones();
        const std::size_t alpha = std::min<std::size_t>(static_cast<std::size_t>(opts.alpha), rec.ones_before);
        rec.clamped = alpha < static_cast<std::size_t>(opts.alpha);
        rec.alpha = static_cast<int>(alpha);

        const auto& gm = gradients.per_task_masked.at(id);
        const auto& graw = gradients.per_task_raw.at(id);
        require(gm.size() == n && graw.size() == n, ErrorKind::Dimension, "mask_update: gradient length mismatch");

        // Weights evaluation.
        const auto agreement = agreement_score(gm, avg);
        std::vector<double> importance;
        if (opts.importance == ImportanceKind::Fisher && gradients.masked_losses.at(id) > kLogLossGuard) {
            importance = importance_fisher(gm, gradients.masked_losses.at(id), mask);
        } else {
            rec.fisher_fallback = opts.importance == ImportanceKind::Fisher;
            importance = importance_magnitude(theta, mask);
        }
        const auto h = harmony_score(agreement, importance, opts.lambda, mask);

        // Weights masking.
        const auto drop = arg_btm_k(h, alpha);
        for (std::size_t j = 0; j < n; ++j)
            if (drop[j]) mask.bits[j] = 0;

        // Weights recovery over coordinates inactive after masking.
        std::vector<double> score(n);
        for (std::size_t j = 0; j < n; ++j)
            score[j] = mask.bits[j] ? -std::numeric_limits<double>::infinity() : graw[j] * avg[j];
        const auto back = arg_top_k(score, alpha);
        for (std::size_t j = 0; j < n; ++j)
            if (back[j]) mask.bits[j] = 1;

        rec.masked_indices = ones_of(drop);
        rec.recovered_indices = ones_of(back);
        rec.ones_after = mask.ones();
        result.records.push_back(std::move(rec));
    }
    result.gradients = std::move(gradients);
    return result;
}

TaskMask unseen_mask(const MaskSet& masks, int thresh, TaskId task_id) {
    require(!masks.masks.empty(), ErrorKind::Precondition, "unseen_mask: empty mask set");
    const int n_tasks = static_cast<int>(masks.masks.size());
    require(thresh >= 0 && thresh <= n_tasks, ErrorKind::Precondition, "unseen_mask: thresh must lie in [0, N]");
    const std::size_t n = masks.param_count();
    std::vector<int> votes(n, 0);
    for (const auto& [_, m] : masks.masks) {
        require(m.size() == n, ErrorKind::Dimension, "unseen_mask: masks differ in length");
        for (std::size_t j = 0; j < n; ++j) votes[j] += m.bits[j];
    }
    TaskMask out{task_id, std::vector<uint8_t>(n, 0)};
    for (std::size_t j = 0; j < n; ++j) out.bits[j] = votes[j] > thresh ? 1 : 0;
    return out;
}

}  // namespace harmony
