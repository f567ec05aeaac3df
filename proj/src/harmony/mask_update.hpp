#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "harmony/model.hpp"
#include "harmony/params.hpp"
#include "harmony/scores.hpp"

namespace harmony {

enum class ImportanceKind { Magnitude, Fisher };

struct MaskUpdateRecord {
    TaskId task_id = 0;
    long round = 0;
    int alpha = 0;            // bits changed in each direction
    int requested_alpha = 0;  // before clamping to the active count
    bool clamped = false;
    bool fisher_fallback = false;  // loss too small for the log-gradient; magnitude used
    std::size_t ones_before = 0;
    std::size_t ones_after = 0;
    std::vector<std::size_t> masked_indices;
    std::vector<std::size_t> recovered_indices;
};

// Indicator of the k smallest finite values; ties go to the lower index.
std::vector<uint8_t> arg_btm_k(std::span<const double> values, std::size_t k);

// Indicator of the k largest finite values; ties go to the lower index.
std::vector<uint8_t> arg_top_k(std::span<const double> values, std::size_t k);

struct MaskUpdateResult {
    MaskSet masks;
    std::vector<MaskUpdateRecord> records;
    GradientBundle gradients;
};

struct MaskUpdateOptions {
    double lambda = 10.0;
    int alpha = 0;
    ImportanceKind importance = ImportanceKind::Magnitude;
    long round = 0;
    int threads = 1;
};

// One round of weights evaluation, masking and recovery over every task.
// batches must hold one batch per task in the mask set.
MaskUpdateResult mask_update(const MaskSet& masks, std::span<const double> theta, const ModelConfig& cfg,
                             const std::map<TaskId, TokenBatch>& batches, const MaskUpdateOptions& opts);

// Same round from precomputed gradients; the part of the update that does not
// touch the model.
MaskUpdateResult mask_update_from_gradients(const MaskSet& masks, std::span<const double> theta,
                                            GradientBundle gradients, const MaskUpdateOptions& opts);

// Coordinate j is active iff more than thresh task masks keep it.
TaskMask unseen_mask(const MaskSet& masks, int thresh, TaskId task_id = -1);

}  // namespace harmony
