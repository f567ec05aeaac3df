// Command-line front end. Talks to the library only through harmony.h.

#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "harmony/harmony.h"
#include "json.hpp"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

int exit_code(hm_status s) {
    if (s == HM_OK) return kExitOk;
    if (s == HM_ERR_NUMERIC) return kExitNumeric;
    return kExitUsage;
}

int report(hm_status s, const char* what) {
    if (s != HM_OK) std::fprintf(stderr, "harmony %s: %s error: %s\n", what, hm_status_name(s), hm_last_error());
    return exit_code(s);
}

struct RunDeleter {
    void operator()(hm_run* r) const { hm_run_free(r); }
};
using RunPtr = std::unique_ptr<hm_run, RunDeleter>;

// Takes ownership of a library string and parses it.
json take_json(char* s) {
    if (!s) return json{};
    json j = json::parse(s);
    hm_string_free(s);
    return j;
}

void print_eval_table(const json& j) {
    std::printf("%-8s %10s %12s %12s\n", "task", "episodes", "mean_return", "success");
    for (const auto& r : j.at("reports"))
        std::printf("%-8d %10d %12.3f %12.3f\n", r.at("task_id").get<int>(), r.at("episodes").get<int>(),
                    r.at("mean_return").get<double>(), r.at("success_rate").get<double>());
    std::printf("mean success rate: %.4f  mean return: %.3f\n", j.at("mean_success_rate").get<double>(),
                j.at("mean_return").get<double>());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-task decision transformer with task-specific masks"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(hm_version()));

    std::string config;
    auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config, "run config JSON")->required(); };

    auto* gen = app.add_subcommand("gen-data", "generate offline datasets for every training task");
    add_config(gen);

    auto* train = app.add_subcommand("train", "train and write checkpoint, metrics and mask audit");
    add_config(train);
    std::string resume;
    long until = -1;
    int threads = 0;
    train->add_option("--resume", resume, "checkpoint to continue from");
    train->add_option("--until", until, "stop after this round");
    train->add_option("--threads", threads, "worker threads for mask updates")->check(CLI::NonNegativeNumber);

    auto* eval = app.add_subcommand("eval", "roll out the masked policy on trained tasks");
    add_config(eval);
    std::string checkpoint;
    std::vector<int> tasks;
    int episodes = -1;
    std::optional<uint64_t> seed;
    eval->add_option("--checkpoint", checkpoint, "checkpoint manifest (default: the run's)");
    eval->add_option("--tasks", tasks, "task ids")->delimiter(',');
    eval->add_option("--episodes", episodes, "episodes per task")->check(CLI::NonNegativeNumber);
    eval->add_option("--seed", seed, "evaluation seed");

    auto* unseen = app.add_subcommand("eval-unseen", "evaluate held-out tasks with the voted mask");
    add_config(unseen);
    int thresh = -1;
    bool random_control = false;
    unseen->add_option("--checkpoint", checkpoint, "checkpoint manifest (default: the run's)");
    unseen->add_option("--thresh", thresh, "vote threshold (default: ceil(N/2))")->check(CLI::NonNegativeNumber);
    unseen->add_flag("--random-control", random_control, "use a random mask of the same sparsity");
    unseen->add_option("--episodes", episodes, "episodes per task")->check(CLI::NonNegativeNumber);
    unseen->add_option("--seed", seed, "evaluation seed");

    auto* inspect = app.add_subcommand("inspect-masks", "export the Hamming matrix and per-segment densities");
    std::string out_dir;
    inspect->add_option("--checkpoint", checkpoint, "checkpoint manifest")->required();
    inspect->add_option("--out", out_dir, "output directory (default: next to the checkpoint)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    if (inspect->parsed()) {
        char* out = nullptr;
        const auto s = hm_inspect_masks(checkpoint.c_str(), out_dir.empty() ? nullptr : out_dir.c_str(), &out);
        if (s != HM_OK) return report(s, "inspect-masks");
        const auto j = take_json(out);
        const auto& ids = j.at("task_ids");
        std::printf("%-28s %8s", "segment", "size");
        for (const auto& id : ids) std::printf(" %8s", ("t" + std::to_string(id.get<int>())).c_str());
        std::printf("\n");
        for (const auto& seg : j.at("segments")) {
            std::printf("%-28s %8zu", seg.at("segment").get<std::string>().c_str(), seg.at("size").get<size_t>());
            for (const auto& d : seg.at("densities")) std::printf(" %8.4f", d.get<double>());
            std::printf("\n");
        }
        for (const auto& f : j.at("files")) std::printf("wrote %s\n", f.get<std::string>().c_str());
        return kExitOk;
    }

    hm_run* raw = nullptr;
    if (auto s = hm_run_load(config.c_str(), &raw); s != HM_OK) return report(s, "config");
    RunPtr run(raw);

    if (gen->parsed()) {
        char* out = nullptr;
        const auto s = hm_gen_data(run.get(), &out);
        if (s != HM_OK) return report(s, "gen-data");
        for (const auto& f : take_json(out).at("files")) std::printf("wrote %s\n", f.get<std::string>().c_str());
        return kExitOk;
    }

    if (train->parsed()) {
        auto opts = hm_train_options_default();
        if (!resume.empty()) opts.resume = resume.c_str();
        opts.until = until;
        opts.threads = threads;
        char* out = nullptr;
        const auto s = hm_train(run.get(), &opts, &out);
        if (s != HM_OK) return report(s, "train");
        const auto j = take_json(out);
        std::printf("round %ld, %ld mask-update rounds, checkpoint %s\n", j.at("round").get<long>(),
                    j.at("mask_rounds").get<long>(), j.at("checkpoint").get<std::string>().c_str());
        return kExitOk;
    }

    if (eval->parsed()) {
        auto opts = hm_eval_options_default();
        if (!checkpoint.empty()) opts.checkpoint = checkpoint.c_str();
        opts.tasks = tasks.empty() ? nullptr : tasks.data();
        opts.n_tasks = tasks.size();
        opts.episodes = episodes;
        if (seed) {
            opts.has_seed = 1;
            opts.seed = *seed;
        }
        char* out = nullptr;
        const auto s = hm_eval(run.get(), &opts, &out);
        if (s != HM_OK) return report(s, "eval");
        print_eval_table(take_json(out));
        return kExitOk;
    }

    if (unseen->parsed()) {
        auto opts = hm_unseen_options_default();
        if (!checkpoint.empty()) opts.checkpoint = checkpoint.c_str();
        opts.thresh = thresh;
        opts.random_control = random_control ? 1 : 0;
        opts.episodes = episodes;
        if (seed) {
            opts.has_seed = 1;
            opts.seed = *seed;
        }
        char* out = nullptr;
        const auto s = hm_eval_unseen(run.get(), &opts, &out);
        if (s != HM_OK) return report(s, "eval-unseen");
        const auto j = take_json(out);
        std::printf("thresh %d over %d tasks, mask density %.4f%s\n", j.at("thresh").get<int>(),
                    j.at("observed_tasks").get<int>(), j.at("mask_density").get<double>(),
                    random_control ? " (random control)" : "");
        print_eval_table(j);
        return kExitOk;
    }
    return kExitUsage;
}
