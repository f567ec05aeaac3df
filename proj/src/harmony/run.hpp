#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "harmony/envs.hpp"
#include "harmony/trainer.hpp"
#include "json.hpp"

namespace harmony {

struct SuiteConfig {
    std::vector<PointTaskSpec> tasks;
    std::vector<TaskId> held_out;
    Regime regime = Regime::NearOptimal;  // regime used for training
    int n_traj = 50;
    double prompt_fraction = 0.1;
};

struct EvalConfig {
    int episodes = 20;
    int demo_traj = 10;  // fresh demonstrations per held-out task
};

// One run: suite, training and evaluation settings plus where artifacts go.
struct RunConfig {
    uint64_t seed = 0;
    std::filesystem::path output_dir;
    SuiteConfig suite;
    TrainConfig train;  // train.seed mirrors the root seed
    EvalConfig eval;

    std::vector<PointTaskSpec> training_tasks() const;
    std::vector<PointTaskSpec> held_out_tasks() const;
    const PointTaskSpec& task(TaskId id) const;

    std::filesystem::path data_dir() const { return output_dir / "data"; }
    std::filesystem::path dataset_path(TaskId id, Regime regime) const;
    std::filesystem::path header_path() const { return data_dir() / "header.json"; }
    std::filesystem::path checkpoint_path() const { return output_dir / "checkpoint.json"; }
    std::filesystem::path metrics_path() const { return output_dir / "metrics.csv"; }
    std::filesystem::path mask_audit_path() const { return output_dir / "mask_audit.jsonl"; }
};

// Relative output_dir is resolved against base_dir.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);
RunConfig load_run_config(const std::filesystem::path& path);

// Datasets for every training task in both regimes, plus a header with
// expert returns and success thresholds. Returns the written paths.
std::vector<std::filesystem::path> gen_data(const RunConfig& run);

// Training-regime datasets in ascending task order.
std::vector<TaskDataset> load_training_data(const RunConfig& run);

struct TrainOptions {
    std::optional<std::filesystem::path> resume;
    long until = -1;  // < 0: run to E
    int threads = 0;  // 0: keep the configured value
};

struct TrainSummary {
    long round = 0;
    long mask_rounds = 0;
};

TrainSummary run_training(const RunConfig& run, const TrainOptions& opts);

struct EvalOptions {
    std::optional<std::filesystem::path> checkpoint;
    std::vector<TaskId> tasks;  // empty: all training tasks
    int episodes = -1;          // < 0: configured value
    std::optional<uint64_t> seed;
};

// Report JSON (also written to output_dir/eval_report.json).
nlohmann::json run_eval(const RunConfig& run, const EvalOptions& opts);

struct UnseenOptions {
    std::optional<std::filesystem::path> checkpoint;
    int thresh = -1;  // < 0: ceil(N / 2)
    bool random_control = false;
    int episodes = -1;
    std::optional<uint64_t> seed;
};

// Voted-mask (or sparsity-matched random control) evaluation on held-out
// tasks; written to output_dir/eval_unseen_report.json.
nlohmann::json run_eval_unseen(const RunConfig& run, const UnseenOptions& opts);

// Random mask with exactly `ones` active coordinates.
TaskMask random_mask(std::size_t n, std::size_t ones, uint64_t seed, TaskId task_id = -1);

// Hamming matrix and per-segment densities as CSV files in out_dir.
nlohmann::json inspect_masks(const std::filesystem::path& checkpoint, const std::filesystem::path& out_dir);

}  // namespace harmony
