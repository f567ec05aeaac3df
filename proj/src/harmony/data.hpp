#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "harmony/model.hpp"
#include "harmony/params.hpp"

namespace harmony {

class Rng;

struct Trajectory {
    TaskId task_id = 0;
    int state_dim = 0;
    int action_dim = 0;
    std::vector<double> states;   // [T, state_dim]
    std::vector<double> actions;  // [T, action_dim]
    std::vector<double> rewards;  // [T]

    std::size_t length() const { return rewards.size(); }
    double total_return() const;
    void check() const;

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

// Suffix discounted sums: out[T-1] = r[T-1], out[t] = r[t] + gamma * out[t+1].
std::vector<double> compute_rtg(std::span<const double> rewards, double gamma);

class TaskDataset {
public:
    TaskDataset() = default;
    // prompt_fraction selects the top share of trajectories by return as the
    // prompt pool (at least one trajectory).
    TaskDataset(TaskId task_id, std::vector<Trajectory> trajectories, double gamma = 1.0,
                double prompt_fraction = 0.1);

    TaskId task_id() const { return task_id_; }
    double gamma() const { return gamma_; }
    const std::vector<Trajectory>& trajectories() const { return trajectories_; }
    const std::vector<double>& rtg(std::size_t i) const { return rtg_cache_.at(i); }
    const std::vector<std::size_t>& prompt_pool() const { return prompt_pool_; }
    bool empty() const { return trajectories_.empty(); }

    // One step of trajectory i at time t, with its cached return-to-go.
    Step step(std::size_t i, std::size_t t) const;

private:
    TaskId task_id_ = 0;
    double gamma_ = 1.0;
    std::vector<Trajectory> trajectories_;
    std::vector<std::vector<double>> rtg_cache_;
    std::vector<std::size_t> prompt_pool_;
};

// Uniform pool trajectory, then a uniform contiguous window of kstar steps.
std::vector<Step> sample_prompt(const TaskDataset& dataset, int kstar, Rng& rng);

// B windows of K history steps (left padded), each with its own prompt.
TokenBatch sample_batch(const TaskDataset& dataset, int k, int kstar, int batch, Rng& rng);

// One JSON object per line: task_id, states, actions, rewards. Trajectories are
// grouped per task in order of first appearance.
std::vector<TaskDataset> load_jsonl(const std::filesystem::path& path, double gamma = 1.0,
                                    double prompt_fraction = 0.1);
void save_jsonl(std::span<const TaskDataset> datasets, const std::filesystem::path& path);

// Writes through a sibling temp file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace harmony
