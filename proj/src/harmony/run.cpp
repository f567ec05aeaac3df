#include "harmony/run.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "harmony/error.hpp"
#include "harmony/serialize.hpp"

namespace harmony {

namespace fs = std::filesystem;

std::vector<PointTaskSpec> RunConfig::training_tasks() const {
    std::vector<PointTaskSpec> out;
    for (const auto& t : suite.tasks)
        if (std::find(suite.held_out.begin(), suite.held_out.end(), t.task_id) == suite.held_out.end()) out.push_back(t);
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.task_id < b.task_id; });
    return out;
}

std::vector<PointTaskSpec> RunConfig::held_out_tasks() const {
    std::vector<PointTaskSpec> out;
    for (TaskId id : suite.held_out) out.push_back(task(id));
    return out;
}

const PointTaskSpec& RunConfig::task(TaskId id) const {
    for (const auto& t : suite.tasks)
        if (t.task_id == id) return t;
    fail(ErrorKind::Config, "unknown task id " + std::to_string(id));
}

fs::path RunConfig::dataset_path(TaskId id, Regime regime) const {
    return data_dir() / ("task_" + std::to_string(id) + "_" + to_string(regime) + ".jsonl");
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
    StrictObject o(j, "config");
    RunConfig run;
    run.seed = o.get<uint64_t>("seed", 0);
    run.output_dir = o.required<std::string>("output_dir");
    if (run.output_dir.is_relative()) run.output_dir = base_dir / run.output_dir;
    run.output_dir = run.output_dir.lexically_normal();

    StrictObject s(o.raw("suite"), "config.suite");
    const auto& tasks = s.raw("tasks");
    require(tasks.is_array() && !tasks.empty(), ErrorKind::Config, "config.suite.tasks must be a non-empty array");
    std::set<TaskId> ids;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        run.suite.tasks.push_back(task_spec_from_json(tasks[i], "config.suite.tasks[" + std::to_string(i) + "]"));
        require(ids.insert(run.suite.tasks.back().task_id).second, ErrorKind::Config,
                "duplicate task id " + std::to_string(run.suite.tasks.back().task_id));
        require(run.suite.tasks.back().task_id >= 0, ErrorKind::Config, "task ids must be >= 0");
    }
    run.suite.held_out = s.get<std::vector<TaskId>>("held_out", {});
    for (TaskId id : run.suite.held_out)
        require(ids.contains(id), ErrorKind::Config, "held-out task " + std::to_string(id) + " is not in the suite");
    run.suite.regime = regime_from_string(s.get<std::string>("regime", to_string(run.suite.regime)));
    run.suite.n_traj = s.get("n_traj", run.suite.n_traj);
    run.suite.prompt_fraction = s.get("prompt_fraction", run.suite.prompt_fraction);
    s.finish();
    require(run.suite.n_traj >= 1, ErrorKind::Config, "config.suite.n_traj must be >= 1");
    require(run.suite.prompt_fraction > 0.0 && run.suite.prompt_fraction <= 1.0, ErrorKind::Config,
            "config.suite.prompt_fraction must lie in (0, 1]");
    require(!run.training_tasks().empty(), ErrorKind::Config, "every task is held out");

    if (o.has("train")) {
        const auto& t = o.raw("train");
        require(!t.is_object() || !t.contains("seed"), ErrorKind::Config,
                "config.train: 'seed' is set once at the top level");
        run.train = train_config_from_json(t, "config.train");
    }
    run.train.seed = run.seed;
    require(run.train.model.state_dim == kPointStateDim && run.train.model.action_dim == kPointActionDim,
            ErrorKind::Config, "config.train.model: point-mass tasks need state_dim 4 and action_dim 2");
    for (const auto& t : run.suite.tasks)
        require(t.horizon <= run.train.model.max_timestep, ErrorKind::Config,
                "task horizon exceeds model max_timestep");

    if (o.has("eval")) {
        StrictObject e(o.raw("eval"), "config.eval");
        run.eval.episodes = e.get("episodes", run.eval.episodes);
        run.eval.demo_traj = e.get("demo_traj", run.eval.demo_traj);
        e.finish();
    }
    require(run.eval.episodes >= 0, ErrorKind::Config, "config.eval.episodes must be >= 0");
    require(run.eval.demo_traj >= 1, ErrorKind::Config, "config.eval.demo_traj must be >= 1");
    o.finish();
    return run;
}

RunConfig load_run_config(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        fail(ErrorKind::Parse, "config " + path.string() + ": " + e.what());
    }
    return parse_run_config(j, fs::absolute(path).parent_path());
}

namespace {

uint64_t data_seed(const RunConfig& run, TaskId id, Regime regime) {
    return derive_seed(run.seed, std::string("data/") + to_string(regime), static_cast<uint64_t>(id));
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec && fs::is_directory(dir), ErrorKind::Io, "cannot create directory " + dir.string());
}

Checkpoint load_run_checkpoint(const RunConfig& run, const std::optional<fs::path>& path) {
    auto ckpt = load_checkpoint(path.value_or(run.checkpoint_path()));
    require(ckpt.config.model == run.train.model, ErrorKind::Config,
            "checkpoint model does not match the run config");
    return ckpt;
}

// Keeps lines whose leading round field is <= round; `skip` header lines pass through.
std::string keep_rounds(const std::string& text, long round, std::size_t skip, bool json_lines) {
    std::istringstream in(text);
    std::string line, out;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        if (n++ < skip) {
            out += line + "\n";
            continue;
        }
        if (line.empty()) continue;
        long r = 0;
        if (json_lines)
            r = json::parse(line).at("round").get<long>();
        else
            r = std::stol(line.substr(0, line.find(',')));
        if (r <= round) out += line + "\n";
    }
    return out;
}

}  // namespace

std::vector<fs::path> gen_data(const RunConfig& run) {
    ensure_dir(run.data_dir());
    std::vector<fs::path> written;
    json header;
    header["schema_version"] = 1;
    header["seed"] = run.seed;
    header["n_traj"] = run.suite.n_traj;
    header["tasks"] = json::array();
    for (const auto& spec : run.training_tasks()) {
        json entry;
        entry["spec"] = to_json(spec);
        entry["expert_return"] = expert_return(spec);
        entry["zero_policy_return"] = zero_policy_return(spec);
        entry["success_threshold"] = success_threshold(spec);
        for (Regime regime : {Regime::NearOptimal, Regime::SubOptimal}) {
            const auto ds = gen_dataset(spec, run.suite.n_traj, regime, data_seed(run, spec.task_id, regime),
                                        run.suite.prompt_fraction);
            const auto path = run.dataset_path(spec.task_id, regime);
            save_jsonl(std::span<const TaskDataset>(&ds, 1), path);
            written.push_back(path);
            double mean = 0.0;
            for (const auto& t : ds.trajectories()) mean += t.total_return();
            entry["files"][to_string(regime)] = path.filename().string();
            entry["mean_return"][to_string(regime)] = mean / static_cast<double>(ds.trajectories().size());
        }
        header["tasks"].push_back(entry);
    }
    write_file_atomic(run.header_path(), header.dump(2) + "\n");
    written.push_back(run.header_path());
    return written;
}

std::vector<TaskDataset> load_training_data(const RunConfig& run) {
    std::vector<TaskDataset> out;
    for (const auto& spec : run.training_tasks()) {
        const auto path = run.dataset_path(spec.task_id, run.suite.regime);
        require(fs::exists(path), ErrorKind::Io, "missing dataset " + path.string() + " (run gen-data first)");
        auto sets = load_jsonl(path, spec.gamma, run.suite.prompt_fraction);
        require(sets.size() == 1 && sets[0].task_id() == spec.task_id, ErrorKind::Schema,
                path.string() + " must hold trajectories of task " + std::to_string(spec.task_id) + " only");
        out.push_back(std::move(sets[0]));
    }
    return out;
}

TrainSummary run_training(const RunConfig& run, const TrainOptions& opts) {
    TrainConfig cfg = run.train;
    if (opts.threads > 0) cfg.threads = opts.threads;
    const auto datasets = load_training_data(run);
    ensure_dir(run.output_dir);

    TrainState state;
    std::string metrics = metrics_csv_header();
    std::string audit;
    if (opts.resume) {
        auto ckpt = load_checkpoint(*opts.resume);
        TrainConfig a = ckpt.config, b = cfg;
        a.threads = b.threads = 1;
        require(a == b, ErrorKind::Config, "checkpoint config does not match the run config");
        state = std::move(ckpt.state);
        // Earlier artifacts are carried over up to the checkpoint's round.
        if (fs::exists(run.metrics_path())) metrics = keep_rounds(read_file(run.metrics_path()), state.round, 2, false);
        if (fs::exists(run.mask_audit_path()))
            audit = keep_rounds(read_file(run.mask_audit_path()), state.round, 0, true);
    } else {
        std::vector<TaskId> ids;
        for (const auto& d : datasets) ids.push_back(d.task_id());
        state = init_train_state(cfg, ids);
    }

    TrainSummary summary;
    TrainHooks hooks;
    hooks.on_metrics = [&](const MetricsRow& r) { metrics += format_metrics_row(r); };
    hooks.on_mask_update = [&](long round, int alpha, const MaskUpdateResult& res) {
        json line{{"round", round}, {"alpha", alpha}, {"records", json::array()}};
        for (const auto& rec : res.records) line["records"].push_back(to_json(rec));
        audit += line.dump() + "\n";
        ++summary.mask_rounds;
    };
    train_until(state, cfg, datasets, opts.until < 0 ? cfg.rounds : opts.until, hooks);

    cfg.threads = run.train.threads;  // the checkpoint records the configured value
    save_checkpoint({cfg, state}, run.checkpoint_path());
    write_file_atomic(run.metrics_path(), metrics);
    write_file_atomic(run.mask_audit_path(), audit);
    summary.round = state.round;
    return summary;
}

json run_eval(const RunConfig& run, const EvalOptions& opts) {
    const auto ckpt = load_run_checkpoint(run, opts.checkpoint);
    std::vector<TaskId> tasks = opts.tasks;
    if (tasks.empty()) tasks = ckpt.state.masks.task_ids();
    for (TaskId id : tasks)
        require(ckpt.state.masks.masks.contains(id), ErrorKind::Config,
                "task " + std::to_string(id) + " has no mask in the checkpoint");
    const int episodes = opts.episodes < 0 ? run.eval.episodes : opts.episodes;
    const uint64_t seed = opts.seed.value_or(derive_seed(run.seed, "eval"));
    const auto datasets = load_training_data(run);

    json reports = json::array();
    double sr = 0.0, ret = 0.0;
    for (TaskId id : tasks) {
        const auto& spec = run.task(id);
        const auto it = std::find_if(datasets.begin(), datasets.end(), [&](const auto& d) { return d.task_id() == id; });
        require(it != datasets.end(), ErrorKind::Config, "no dataset for task " + std::to_string(id));
        const auto rep = rollout(ckpt.state.theta.values, ckpt.config.model, ckpt.state.masks.at(id), spec, *it,
                                 expert_return(spec), episodes, derive_seed(seed, "task", static_cast<uint64_t>(id)));
        auto rj = to_json(rep);
        rj["success_threshold"] = success_threshold(spec);
        reports.push_back(rj);
        sr += rep.success_rate;
        ret += rep.mean_return;
    }
    const double n = static_cast<double>(tasks.size());
    json out{{"schema_version", 1},
             {"kind", "eval"},
             {"round", ckpt.state.round},
             {"variant", to_string(ckpt.config.variant)},
             {"episodes", episodes},
             {"seed", seed},
             {"reports", reports},
             {"mean_success_rate", tasks.empty() ? 0.0 : sr / n},
             {"mean_return", tasks.empty() ? 0.0 : ret / n}};
    ensure_dir(run.output_dir);
    write_file_atomic(run.output_dir / "eval_report.json", out.dump(2) + "\n");
    return out;
}

TaskMask random_mask(std::size_t n, std::size_t ones, uint64_t seed, TaskId task_id) {
    require(ones <= n, ErrorKind::Precondition, "random_mask: more ones than coordinates");
    TaskMask m{task_id, std::vector<uint8_t>(n, 0)};
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(seed);
    for (std::size_t i = 0; i < ones; ++i) {
        std::swap(idx[i], idx[i + rng.index(n - i)]);
        m.bits[idx[i]] = 1;
    }
    return m;
}

json run_eval_unseen(const RunConfig& run, const UnseenOptions& opts) {
    require(!run.suite.held_out.empty(), ErrorKind::Config, "config.suite.held_out is empty");
    const auto ckpt = load_run_checkpoint(run, opts.checkpoint);
    const auto& masks = ckpt.state.masks;
    const int n_tasks = static_cast<int>(masks.masks.size());
    const int thresh = opts.thresh < 0 ? (n_tasks + 1) / 2 : opts.thresh;
    const int episodes = opts.episodes < 0 ? run.eval.episodes : opts.episodes;
    const uint64_t seed = opts.seed.value_or(derive_seed(run.seed, "eval-unseen"));

    TaskMask mask = unseen_mask(masks, thresh);
    const std::size_t voted_ones = mask.ones();
    if (opts.random_control) mask = random_mask(mask.size(), voted_ones, derive_seed(seed, "control"));

    json reports = json::array();
    double sr = 0.0, ret = 0.0;
    for (const auto& spec : run.held_out_tasks()) {
        const auto demos = gen_dataset(spec, run.eval.demo_traj, Regime::NearOptimal,
                                       derive_seed(seed, "demos", static_cast<uint64_t>(spec.task_id)),
                                       run.suite.prompt_fraction);
        const auto rep = rollout(ckpt.state.theta.values, ckpt.config.model, mask, spec, demos, expert_return(spec),
                                 episodes, derive_seed(seed, "task", static_cast<uint64_t>(spec.task_id)));
        auto rj = to_json(rep);
        rj["success_threshold"] = success_threshold(spec);
        reports.push_back(rj);
        sr += rep.success_rate;
        ret += rep.mean_return;
    }
    const double n = static_cast<double>(run.suite.held_out.size());
    json out{{"schema_version", 1},
             {"kind", opts.random_control ? "eval_unseen_random_control" : "eval_unseen"},
             {"round", ckpt.state.round},
             {"variant", to_string(ckpt.config.variant)},
             {"thresh", thresh},
             {"observed_tasks", n_tasks},
             {"mask_density", static_cast<double>(voted_ones) / static_cast<double>(mask.size())},
             {"episodes", episodes},
             {"seed", seed},
             {"reports", reports},
             {"mean_success_rate", sr / n},
             {"mean_return", ret / n}};
    ensure_dir(run.output_dir);
    write_file_atomic(run.output_dir / (opts.random_control ? "eval_unseen_control_report.json"
                                                            : "eval_unseen_report.json"),
                      out.dump(2) + "\n");
    return out;
}

json inspect_masks(const fs::path& checkpoint, const fs::path& out_dir) {
    const auto ckpt = load_checkpoint(checkpoint);
    const auto& masks = ckpt.state.masks;
    const auto& layout = ckpt.state.theta.layout;
    const auto ids = masks.task_ids();
    const auto ham = mask_hamming_matrix(masks);

    auto num = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    std::string csv = "task_id";
    for (TaskId id : ids) csv += "," + std::to_string(id);
    csv += "\n";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        csv += std::to_string(ids[i]);
        for (std::size_t k = 0; k < ids.size(); ++k) csv += "," + num(ham[i][k]);
        csv += "\n";
    }

    // ERK reference counts only make sense for a masked variant.
    std::vector<std::size_t> erk;
    if (ckpt.config.variant != Variant::None) erk = erk_active_counts(layout, ckpt.config.sparsity);
    std::string dens = "segment,size";
    if (!erk.empty()) dens += ",erk";
    for (TaskId id : ids) dens += ",task_" + std::to_string(id);
    dens += "\n";
    std::vector<std::vector<double>> per_task;
    for (TaskId id : ids) per_task.push_back(segment_densities(layout, masks.at(id)));
    json segs = json::array();
    for (std::size_t s = 0; s < layout.segments().size(); ++s) {
        const auto& seg = layout.segments()[s];
        dens += seg.name + "," + std::to_string(seg.size());
        json sj{{"segment", seg.name}, {"size", seg.size()}};
        if (!erk.empty()) {
            const double d = static_cast<double>(erk[s]) / static_cast<double>(seg.size());
            dens += "," + num(d);
            sj["erk"] = d;
        }
        json td = json::array();
        for (std::size_t t = 0; t < ids.size(); ++t) {
            dens += "," + num(per_task[t][s]);
            td.push_back(per_task[t][s]);
        }
        sj["densities"] = td;
        segs.push_back(sj);
        dens += "\n";
    }
    ensure_dir(out_dir);
    write_file_atomic(out_dir / "masks_hamming.csv", csv);
    write_file_atomic(out_dir / "masks_density.csv", dens);
    return json{{"schema_version", 1},
                {"task_ids", ids},
                {"hamming", ham},
                {"segments", segs},
                {"files", {(out_dir / "masks_hamming.csv").string(), (out_dir / "masks_density.csv").string()}}};
}

}  // namespace harmony
