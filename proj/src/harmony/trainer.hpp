#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "harmony/data.hpp"
#include "harmony/mask_update.hpp"
#include "harmony/model.hpp"
#include "harmony/params.hpp"
#include "harmony/rng.hpp"

namespace harmony {

// none: all-ones masks (prompt-conditioned baseline); R: frozen ERK masks;
// M / F: learned masks with magnitude / Fisher importance.
enum class Variant { None, R, M, F };
enum class OptimizerKind { Sgd, Adam };

const char* to_string(Variant v);
const char* to_string(OptimizerKind o);
Variant variant_from_string(const std::string& s);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
    long rounds = 20000;        // E
    long mask_interval = 5000;  // t_m
    double lr = 1e-4;
    int eta_min = 0;
    int eta_max = -1;  // < 0 resolves to ceil(1e-5 * parameter count)
    double sparsity = 0.2;
    double lambda = 10.0;
    Variant variant = Variant::F;
    int batch_size = 8;
    int stat_batch_size = 64;
    int probe_batch_size = 16;
    uint64_t seed = 0;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    long log_every = 100;
    double ema_decay = 0.99;
    int threads = 1;
    ModelConfig model;

    void validate() const;
    int resolved_eta_max(std::size_t param_count) const;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Cosine-shaped count of mask bits changed in round t of E.
int alpha_schedule(long t, long rounds, double eta_min, double eta_max);

struct TrainState {
    ParamVector theta;
    MaskSet masks;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
    long adam_step = 0;
    long round = 0;  // last completed round
    Rng rng;
    std::map<TaskId, double> loss_ema;
};

TrainState init_train_state(const TrainConfig& cfg, const std::vector<TaskId>& task_ids);

// Optimizer step with an already-masked gradient; coordinates whose mask bit
// is 0 are never written.
void apply_update(TrainState& state, const TrainConfig& cfg, const TaskMask& mask, std::span<const double> grad);

// One masked inner-loop step on a batch of task_id; returns the batch loss.
double inner_step(TrainState& state, const TrainConfig& cfg, TaskId task_id, const TokenBatch& batch);

struct MetricsRow {
    long round = 0;
    TaskId task_id = -1;  // -1: aggregate over tasks
    double loss_ema = 0.0;
    double avg_harmony_raw = 0.0;
    double avg_harmony_masked = 0.0;
    int alpha = 0;
};

inline constexpr int kMetricsSchemaVersion = 1;
std::string metrics_csv_header();
std::string format_metrics_row(const MetricsRow& row);

struct InnerStepEvent {
    long round;
    TaskId task_id;
    double loss;
    const TaskMask& mask;
    std::span<const double> theta_before;
    std::span<const double> theta_after;
};

struct TrainHooks {
    std::function<void(long round, int alpha, const MaskUpdateResult&)> on_mask_update;
    std::function<void(const InnerStepEvent&)> on_inner_step;  // copies theta; leave empty when not needed
    std::function<void(const MetricsRow&)> on_metrics;
};

// Continues training from state.round + 1 through until_round (clamped to E).
void train_until(TrainState& state, const TrainConfig& cfg, const std::vector<TaskDataset>& datasets, long until_round,
                 const TrainHooks& hooks = {});

struct TrainResult {
    TrainState state;
    std::vector<MetricsRow> metrics;
    std::vector<MaskUpdateRecord> mask_records;
};

TrainResult train(const TrainConfig& cfg, const std::vector<TaskDataset>& datasets);

// Raw and masked averaged-harmony metrics on one batch per task.
std::pair<double, double> harmony_probe(std::span<const double> theta, const ModelConfig& cfg, const MaskSet& masks,
                                        const std::map<TaskId, TokenBatch>& probes);

// Checkpoint: JSON manifest at `path`, binary blob next to it (".bin").
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    TrainConfig config;
    TrainState state;
};

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace harmony
